import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delta_lfm.cohort import (
    REGIONS,
    CohortFormatError,
    CohortConfig,
    cohort_from_config,
    generate_cohort,
    load_cohort,
    render_scan,
    rle_decode,
    rle_encode,
    save_cohort,
    severity_offset,
    split_cohort,
    split_sizes,
    ventricle_area,
)


def _areas(seed, sev):
    _, m = render_scan(seed, sev, noise_seed=0, noise_std=0.0)
    return m.ventricle.sum(), m.hippocampus.sum(), m.cortex.sum()


def test_ventricle_grows_hippocampus_and_cortex_shrink():
    v0, h0, c0 = _areas(11, 0.0)
    v2, h2, c2 = _areas(11, 2.0)
    assert v2 > v0
    assert h2 < h0
    assert c2 < c0


def test_ventricle_area_monotone_on_grid():
    grid = np.linspace(0.0, 5.0, 20)
    for seed in range(10):
        soft = [ventricle_area(seed, s) for s in grid]
        assert np.all(np.diff(soft) > 0), seed
        hard = [_areas(seed, s)[0] for s in grid]
        assert np.all(np.diff(hard) >= 0), seed


def test_render_is_deterministic_and_bounded():
    a, ma = render_scan(5, 1.3, 9, 0.05)
    b, mb = render_scan(5, 1.3, 9, 0.05)
    np.testing.assert_array_equal(a, b)
    assert a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0
    for r in REGIONS:
        np.testing.assert_array_equal(getattr(ma, r), getattr(mb, r))


def test_noise_magnitude_matches_half_normal():
    clean, _ = render_scan(4, 1.0, 0, 0.0)
    noisy, _ = render_scan(4, 1.0, 0, 0.05)
    inner = (clean > 0.2) & (clean < 0.8)  # away from the clip at 0 and 1
    d = np.abs(noisy.astype(float) - clean.astype(float))[inner]
    expected = 0.05 * np.sqrt(2 / np.pi)
    assert inner.sum() > 100
    assert abs(d.mean() - expected) < 0.2 * expected


@given(seed=st.integers(0, 10_000), sev=st.floats(0, 8))
def test_masks_partition_the_image(seed, sev):
    _, m = render_scan(seed, sev, 0, 0.0)
    stack = np.stack([getattr(m, r) for r in REGIONS]).astype(int)
    assert np.all(stack.sum(axis=0) == 1)
    assert m.hippocampus.sum() >= 1


def test_generate_cohort_counts_and_order():
    c = generate_cohort(64, (4, 8), seed=0)
    assert 256 <= c.n_scans <= 512
    for p in c.patients:
        ages = [v.age for v in p.visits]
        sev = [v.severity for v in p.visits]
        assert np.all(np.diff(ages) > 0)
        assert np.all(np.diff(sev) > 0)
        assert 4 <= len(p.visits) <= 8
        assert p.status in (0, 3, 6)
        assert np.all(np.diff(ages) >= 0.5 - 1e-9)


def test_generate_cohort_is_deterministic():
    a = generate_cohort(10, seed=7)
    b = generate_cohort(10, seed=7)
    for p, q in zip(a.patients, b.patients):
        assert (p.id, p.sex, p.baseline_age, p.status, p.progression_rate) == (q.id, q.sex, q.baseline_age, q.status, q.progression_rate)
        for v, w in zip(p.visits, q.visits):
            assert v.age == w.age
            np.testing.assert_array_equal(v.image, w.image)


def test_infeasible_visit_schedule_rejected():
    with pytest.raises(ValueError, match="infeasible"):
        generate_cohort(3, (8, 8), span_years=3.0)


def test_piecewise_rate_mode():
    assert severity_offset(0.5, 4.0) == 2.0
    assert severity_offset(0.5, 4.0, (2.0, 3.0)) == 0.5 * 2 + 0.5 * 3 * 2
    c = generate_cohort(6, seed=2, rate_mode="piecewise")
    for p in c.patients:
        assert np.all(np.diff([v.severity for v in p.visits]) > 0)
    assert c.meta["rate_mode"] == "piecewise"
    linear = cohort_from_config(CohortConfig(n_patients=6, seed=2))
    assert linear.patients[0].progression_rate == c.patients[0].progression_rate


def test_split_sizes_follow_rounding_rule():
    assert split_sizes(20) == (16, 1, 3)
    assert split_sizes(64) == (51, 3, 10)
    assert split_sizes(5, (1.0, 0.0, 0.0)) == (5, 0, 0)


def test_split_is_patient_level_and_deterministic():
    c = generate_cohort(20, seed=1)
    tr, va, te = split_cohort(c, seed=4)
    ids = [set(p.id for p in s.patients) for s in (tr, va, te)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set().union(*ids) == {p.id for p in c.patients}
    again = split_cohort(c, seed=4)
    assert [p.id for p in again[2].patients] == [p.id for p in te.patients]


@given(st.lists(st.booleans(), min_size=1, max_size=64))
def test_rle_round_trip(bits):
    m = np.array(bits).reshape(1, -1)
    np.testing.assert_array_equal(rle_decode(rle_encode(m), m.shape), m)


def test_save_load_round_trip(tmp_path, tiny_cohort):
    save_cohort(tiny_cohort, tmp_path / "c")
    back = load_cohort(tmp_path / "c")
    assert back.meta == json.loads(json.dumps(tiny_cohort.meta))
    for p, q in zip(tiny_cohort.patients, back.patients):
        assert (p.id, p.sex, p.baseline_age, p.status, p.progression_rate, p.anatomy_seed) == (
            q.id, q.sex, q.baseline_age, q.status, q.progression_rate, q.anatomy_seed)
        for v, w in zip(p.visits, q.visits):
            assert (v.age, v.severity) == (w.age, w.severity)
            np.testing.assert_array_equal(v.image, w.image)
            for r in REGIONS:
                np.testing.assert_array_equal(getattr(v.masks, r), getattr(w.masks, r))


def test_corrupted_payload_detected(tmp_path, tiny_cohort):
    save_cohort(tiny_cohort, tmp_path / "c")
    scans = tmp_path / "c" / "scans.bin"
    blob = bytearray(scans.read_bytes())
    blob[100] ^= 0xFF
    scans.write_bytes(bytes(blob))
    with pytest.raises(CohortFormatError, match="checksum"):
        load_cohort(tmp_path / "c")
    scans.write_bytes(bytes(blob[:-4]))
    with pytest.raises(CohortFormatError, match="truncated"):
        load_cohort(tmp_path / "c")


def test_version_mismatch_detected(tmp_path, tiny_cohort):
    save_cohort(tiny_cohort, tmp_path / "c")
    doc = json.loads((tmp_path / "c" / "cohort.json").read_text())
    doc["format_version"] = 99
    (tmp_path / "c" / "cohort.json").write_text(json.dumps(doc))
    with pytest.raises(CohortFormatError, match="format_version"):
        load_cohort(tmp_path / "c")


def test_empty_cohort_round_trip(tmp_path):
    c = generate_cohort(0)
    save_cohort(c, tmp_path / "e")
    assert load_cohort(tmp_path / "e").patients == []
