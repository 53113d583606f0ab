import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delta_lfm import gradcore as gc
from delta_lfm.cohort import PatientRecord
from delta_lfm.flow import (
    FlowConfig,
    FlowTrainConfig,
    adaln_modulate,
    all_pairs,
    flow_time_to_age,
    fm_loss,
    fm_training_sample,
    init_velocity_net,
    make_condition,
    sinusoidal_embed,
    status_noise_draws,
    train_flow,
    velocity,
    velocity_forward,
)

REC = PatientRecord(id=1, sex=1, baseline_age=70.0, status=3, progression_rate=0.3, anatomy_seed=5)
SMALL = FlowConfig(hidden=16, cond_width=8, embed_dim=4)


def _perturbed_params(seed=0, cfg=SMALL, d=4):
    # zero-initialized AdaLN generators hide half the network; wake them up
    P = init_velocity_net(d, cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for k in P:
        if k.startswith("ada"):
            P[k] = rng.normal(0.0, 0.2, P[k].shape)
    return P


def test_sinusoidal_examples():
    np.testing.assert_array_equal(sinusoidal_embed(0.0, 4), [0.0, 1.0, 0.0, 1.0])
    e = sinusoidal_embed(np.pi / 2, 2)
    assert e[0] == pytest.approx(1.0, abs=1e-15)
    assert abs(e[1]) < 1e-15
    with pytest.raises(ValueError):
        sinusoidal_embed(1.0, 3)


@given(t=st.floats(-50, 50), dim=st.sampled_from([2, 4, 8, 16]))
def test_sinusoidal_pairs_lie_on_unit_circle(t, dim):
    e = sinusoidal_embed(t, dim)
    np.testing.assert_allclose(e[0::2] ** 2 + e[1::2] ** 2, 1.0, atol=1e-12)


def test_condition_layout_and_errors():
    c = make_condition(REC, 71.0, 72.0, 75.0, SMALL)
    assert c.shape == (SMALL.cond_dim,)
    np.testing.assert_array_equal(c[:4], sinusoidal_embed(1.0, 4))
    np.testing.assert_array_equal(c[-3:], [1.0, 0.7, 3.0])
    with pytest.raises(ValueError, match="order"):
        make_condition(REC, 72.0, 71.0, 75.0, SMALL)
    bare = make_condition(REC, 71.0, 72.0, 75.0, FlowConfig(embed_dim=4, conditioning_enabled=False))
    assert bare.shape == (12,)


def test_status_noise_only_in_training():
    a = make_condition(REC, 70.0, 70.0, 71.0, SMALL, training=True, rng=np.random.default_rng(3))
    b = make_condition(REC, 70.0, 70.0, 71.0, SMALL, training=True, rng=np.random.default_rng(3))
    assert a[-1] == b[-1] != 3.0
    assert make_condition(REC, 70.0, 70.0, 71.0, SMALL)[-1] == 3.0


def test_status_noise_statistics():
    d = status_noise_draws(100_000, FlowConfig(), seed=0)
    assert abs(d.mean()) < 0.02
    assert abs(d.std() - 1.0) < 0.02


def test_adaln_identity_at_init_and_scale_invariant(rng):
    P = init_velocity_net(4, SMALL, 0)
    h = rng.normal(size=(3, SMALL.hidden))
    c = rng.normal(size=(3, SMALL.cond_width))
    out = adaln_modulate(h, c, P, 0).data
    mu = h.mean(-1, keepdims=True)
    ref = (h - mu) / np.sqrt(((h - mu) ** 2).mean(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    P = _perturbed_params()
    np.testing.assert_allclose(adaln_modulate(10 * h, c, P, 0).data, adaln_modulate(h, c, P, 0).data, rtol=1e-4, atol=1e-6)  # eps keeps it approximate


def test_velocity_shape_determinism_and_tape_agreement(rng):
    P = _perturbed_params()
    z = rng.normal(size=(5, 2, 2))
    cond = rng.normal(size=(5, SMALL.cond_dim))
    v = velocity(P, z, cond)
    assert v.shape == z.shape
    np.testing.assert_array_equal(v, velocity(P, z, cond))
    np.testing.assert_allclose(v.reshape(5, 4), velocity_forward(P, z.reshape(5, 4), cond).data, atol=1e-13)
    assert velocity(P, z[0], cond[0]).shape == (2, 2)
    with pytest.raises(ValueError, match="shape"):
        velocity(P, rng.normal(size=(3, 3)), cond[0])


def test_velocity_gradients(rng):
    P = _perturbed_params()
    z = rng.normal(size=(3, 4))
    cond = rng.normal(size=(3, SMALL.cond_dim))
    w = rng.normal(size=(3, 4))
    assert gc.check_gradients(lambda x: (velocity_forward(P, x, cond) * w).sum(), z, step=1e-6) < 1e-4
    for key in ("ada1.scale.w", "in.w"):
        def f(x, key=key):
            Q = {k: (x if k == key else v) for k, v in P.items()}
            return (velocity_forward(Q, z, cond) * w).sum()
        assert gc.check_gradients(f, P[key], step=1e-6) < 1e-4, key


def test_training_sample_examples():
    zi, zj = np.zeros((2, 2)), np.ones((2, 2))
    z_t, t, v, T = fm_training_sample(zi, zj, 70.0, 74.0, "temporal_0T", None, t=1.0)
    np.testing.assert_array_equal(z_t, 0.25 * np.ones((2, 2)))
    np.testing.assert_array_equal(v, 0.25 * np.ones((2, 2)))
    assert T == 4.0
    z_p, _, v_p, _ = fm_training_sample(zi, zj, 70.0, 74.0, "physical_01", None, t=0.25)
    np.testing.assert_array_equal(z_p, z_t)
    np.testing.assert_array_equal(v_p, 4 * v)
    with pytest.raises(ValueError):
        fm_training_sample(zi, zj, 74.0, 74.0, "temporal_0T", None)
    with pytest.raises(ValueError, match="mode"):
        fm_training_sample(zi, zj, 70.0, 74.0, "bogus", None, t=0.0)


@given(seed=st.integers(0, 2**31), T=st.floats(0.5, 12), mode=st.sampled_from(["temporal_0T", "physical_01"]))
def test_training_sample_lies_on_path(seed, T, mode):
    rng = np.random.default_rng(seed)
    zi, zj = rng.normal(size=(2, 3, 3))
    z_t, t, v, TT = fm_training_sample(zi, zj, 60.0, 60.0 + T, mode, rng)
    age = flow_time_to_age(t, 60.0, TT, mode)
    assert 60.0 <= age <= 60.0 + T + 1e-12
    frac = (age - 60.0) / T
    np.testing.assert_allclose(z_t, zi + frac * (zj - zi), atol=1e-12)
    span = T if mode == "temporal_0T" else 1.0
    end = fm_training_sample(zi, zj, 60.0, 60.0 + T, mode, rng, t=span)[0]
    np.testing.assert_allclose(end, zj, atol=1e-12)
    np.testing.assert_allclose(zi + span * v, zj, atol=1e-9)


def test_fm_loss_examples(rng):
    P = init_velocity_net(4, SMALL, 0)
    z = rng.normal(size=(2, 2, 2))
    cond = rng.normal(size=(2, SMALL.cond_dim))
    v = velocity(P, z, cond)
    assert float(fm_loss(P, z, cond, v).data) == pytest.approx(0.0, abs=1e-20)
    assert float(fm_loss(P, z, cond, v + 1.0).data) == pytest.approx(4.0)
    with pytest.raises(ValueError, match="empty"):
        fm_loss(P, np.zeros((0, 2, 2)), np.zeros((0, SMALL.cond_dim)), np.zeros((0, 2, 2)))


def _toy_latents(rng, n=4):
    lat, recs = {}, {}
    for pid in range(n):
        ages = 70.0 + np.cumsum(rng.uniform(0.5, 2.0, 3))
        base = rng.normal(size=(2, 2))
        lat[pid] = (ages, np.stack([base + 0.3 * (a - 70.0) for a in ages]))
        recs[pid] = PatientRecord(id=pid, sex=pid % 2, baseline_age=70.0, status=3, progression_rate=0.3, anatomy_seed=pid)
    return lat, recs


def test_all_pairs():
    lat = {3: (np.arange(3.0), None), 1: (np.arange(2.0), None)}
    assert all_pairs(lat) == [(1, 0, 1), (3, 0, 1), (3, 0, 2), (3, 1, 2)]


def test_train_flow_deterministic_and_learns(rng):
    lat, recs = _toy_latents(rng)
    tcfg = FlowTrainConfig(lr=3e-3, epochs=30, batch_size=4, seed=1)
    p1, h1 = train_flow(lat, recs, SMALL, tcfg)
    p2, h2 = train_flow(lat, recs, SMALL, tcfg)
    assert [r["fm"] for r in h1] == [r["fm"] for r in h2]
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])
    assert np.mean([r["fm"] for r in h1[-5:]]) < 0.5 * np.mean([r["fm"] for r in h1[:5]])


def test_train_flow_needs_pairs():
    lat = {0: (np.array([70.0]), np.zeros((1, 2, 2)))}
    with pytest.raises(ValueError, match="pairs"):
        train_flow(lat, {0: REC}, SMALL, FlowTrainConfig(epochs=1))
