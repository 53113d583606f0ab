"""Synthetic longitudinal cohort: rendering, generation, splitting, persistence.

Each scan is a 32×32 axial-slice cartoon: an elliptical brain with a bright
cortical ring, a dark ventricle ellipse in the middle and two hippocampal
blobs below it. Severity enlarges the ventricle, shrinks the hippocampi and
thins the cortex. Edges are anti-aliased so images vary smoothly with
severity; masks come from the hard (noiseless) geometry.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
REGIONS = ("ventricle", "hippocampus", "cortex", "background")
ANATOMICAL = ("ventricle", "hippocampus", "cortex")
STATUS_LEVELS = (0, 3, 6)  # CN / MCI / AD, class interval 3


class CohortFormatError(IOError):
    pass


@dataclass(eq=False)
class RegionMasks:
    ventricle: np.ndarray
    hippocampus: np.ndarray
    cortex: np.ndarray
    background: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {r: getattr(self, r) for r in REGIONS}


@dataclass(eq=False)
class Visit:
    age: float
    severity: float
    image: np.ndarray  # float32, values in [0, 1]
    masks: RegionMasks


@dataclass(eq=False)
class PatientRecord:
    id: int
    sex: int
    baseline_age: float
    status: int
    progression_rate: float
    anatomy_seed: int
    visits: list[Visit] = field(default_factory=list)

    @property
    def ages(self) -> list[float]:
        return [v.age for v in self.visits]


@dataclass(eq=False)
class Cohort:
    patients: list[PatientRecord]
    image_size: int = 32
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.patients)

    def by_id(self, pid: int) -> PatientRecord:
        for p in self.patients:
            if p.id == pid:
                return p
        raise KeyError(f"no patient with id {pid}")

    def subset(self, ids) -> "Cohort":
        keep = set(int(i) for i in ids)
        return Cohort([p for p in self.patients if p.id in keep], self.image_size, dict(self.meta))

    @property
    def n_scans(self) -> int:
        return sum(len(p.visits) for p in self.patients)


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class Anatomy:
    cx: float
    cy: float
    brain_rx: float
    brain_ry: float
    cortex_thickness: float
    vent_rx: float
    vent_ry: float
    vent_dy: float
    hippo_r: float
    hippo_dx: float
    hippo_dy: float
    tissue: float


def anatomy_from_seed(anatomy_seed: int, size: int = 32) -> Anatomy:
    rng = np.random.default_rng([anatomy_seed, 17])
    c = (size - 1) / 2.0
    k = size / 32.0
    u = rng.uniform
    return Anatomy(
        cx=c + u(-1.0, 1.0) * k,
        cy=c + u(-1.0, 1.0) * k,
        brain_rx=u(11.5, 13.0) * k,
        brain_ry=u(13.0, 14.5) * k,
        cortex_thickness=u(2.6, 3.4) * k,
        vent_rx=u(2.6, 3.4) * k,
        vent_ry=u(1.6, 2.2) * k,
        vent_dy=u(-2.0, -0.5) * k,
        hippo_r=u(2.2, 2.8) * k,
        hippo_dx=u(4.5, 5.5) * k,
        hippo_dy=u(4.0, 5.0) * k,
        tissue=u(0.45, 0.55),
    )


VENT_GROWTH = 0.2  # semi-axis scale per severity unit
HIPPO_SHRINK = 0.15
CORTEX_THINNING = 0.1


def _ellipse_sdf(x, y, cx, cy, rx, ry):
    """Approximate signed distance (pixels) to an axis-aligned ellipse."""
    q = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    return (q - 1.0) * min(rx, ry)


def _coverage(sdf, width: float = 0.5):
    return 0.5 * (1.0 - np.tanh(sdf / width))


def _ventricle_sdf(a: Anatomy, severity: float, x, y):
    g = 1.0 + VENT_GROWTH * severity
    return _ellipse_sdf(x, y, a.cx, a.cy + a.vent_dy, a.vent_rx * g, a.vent_ry * g)


def ventricle_area(anatomy_seed: int, severity: float, size: int = 32) -> float:
    """Anti-aliased ventricle area in pixels (sum of edge coverage)."""
    a = anatomy_from_seed(anatomy_seed, size)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return float(_coverage(_ventricle_sdf(a, max(float(severity), 0.0), x, y)).sum())


def render_scan(
    anatomy_seed: int, severity: float, noise_seed: int, noise_std: float, size: int = 32
) -> tuple[np.ndarray, RegionMasks]:
    severity = max(float(severity), 0.0)
    noise_std = min(max(float(noise_std), 0.0), 0.1)
    a = anatomy_from_seed(anatomy_seed, size)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)

    brain = _ellipse_sdf(x, y, a.cx, a.cy, a.brain_rx, a.brain_ry)
    th = a.cortex_thickness / (1.0 + CORTEX_THINNING * severity)
    inner = _ellipse_sdf(x, y, a.cx, a.cy, a.brain_rx - th, a.brain_ry - th)
    vent = _ventricle_sdf(a, severity, x, y)
    hr = a.hippo_r / (1.0 + HIPPO_SHRINK * severity)
    hl = _ellipse_sdf(x, y, a.cx - a.hippo_dx, a.cy + a.hippo_dy, hr, hr)
    hrr = _ellipse_sdf(x, y, a.cx + a.hippo_dx, a.cy + a.hippo_dy, hr, hr)
    hippo = np.minimum(hl, hrr)

    c_brain = _coverage(brain)
    c_inner = _coverage(inner)
    c_vent = _coverage(vent)
    c_hippo = _coverage(hippo)
    img = c_brain * (0.9 * (1.0 - c_inner) + a.tissue * c_inner)
    img = img * (1.0 - c_hippo) + 0.75 * c_hippo * c_brain
    img = img * (1.0 - c_vent) + 0.08 * c_vent

    if noise_std > 0:
        img = img + np.random.default_rng([noise_seed, 29]).normal(0.0, noise_std, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    m_vent = vent < 0
    m_hippo = (hippo < 0) & ~m_vent
    m_cortex = (brain < 0) & (inner >= 0) & ~m_vent & ~m_hippo
    m_bg = ~(m_vent | m_hippo | m_cortex)
    return img, RegionMasks(m_vent, m_hippo, m_cortex, m_bg)


# ---------------------------------------------------------------------------
# cohort generation


@dataclass
class CohortConfig:
    n_patients: int = 64
    visit_range: tuple[int, int] = (4, 8)
    age_range: tuple[float, float] = (60.0, 80.0)
    span_years: float = 10.0
    rate_range: tuple[float, float] = (0.15, 0.5)
    baseline_severity: tuple[float, float] = (0.0, 2.0)
    min_gap: float = 0.5
    noise_std: float = 0.005
    image_size: int = 32
    seed: int = 0
    rate_mode: str = "linear"
    rate_change: tuple[float, float] = (0.5, 2.0)


def _visit_offsets(rng, n: int, span: float, min_gap: float) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    spacing = span / (n - 1)
    jitter = max(spacing - min_gap, 0.0) / 2.0
    off = np.arange(n) * spacing + rng.uniform(-jitter, jitter, n)
    off[0] = 0.0
    off[-1] = min(off[-1], span)
    return off - off[0]


def severity_offset(rate: float, years: float, bend: tuple[float, float] | None = None) -> float:
    """Severity gained ``years`` after baseline; ``bend`` is (breakpoint, rate factor)."""
    if bend is None:
        return rate * years
    at, factor = bend
    return rate * min(years, at) + rate * factor * max(years - at, 0.0)


def generate_cohort(
    n_patients: int,
    visit_range: tuple[int, int] = (4, 8),
    age_range: tuple[float, float] = (60.0, 80.0),
    rate_range: tuple[float, float] = (0.15, 0.5),
    seed: int = 0,
    *,
    span_years: float = 10.0,
    baseline_severity: tuple[float, float] = (0.0, 2.0),
    min_gap: float = 0.5,
    noise_std: float = 0.005,
    image_size: int = 32,
    rate_mode: str = "linear",
    rate_change: tuple[float, float] = (0.5, 2.0),
) -> Cohort:
    """Sample patients and render every visit. Pure function of its arguments.

    ``rate_mode="piecewise"`` multiplies each patient's rate by a factor drawn
    from ``rate_change`` after a breakpoint drawn uniformly over the span.
    """
    lo_v, hi_v = visit_range
    if n_patients < 0:
        raise ValueError("n_patients must be nonnegative")
    if not (2 <= lo_v <= hi_v <= 10):
        raise ValueError(f"visit_range must satisfy 2 <= min <= max <= 10, got {visit_range}")
    if age_range[0] > age_range[1] or rate_range[0] > rate_range[1] or not rate_range[0] > 0:
        raise ValueError("age_range/rate_range must be nonempty with positive rates")
    if hi_v * min_gap > span_years:
        raise ValueError(
            f"infeasible: {hi_v} visits with min gap {min_gap} do not fit in {span_years} years"
        )
    if rate_mode not in ("linear", "piecewise"):
        raise ValueError(f"unknown rate_mode {rate_mode!r}")
    if rate_mode == "piecewise" and not 0 < rate_change[0] <= rate_change[1]:
        raise ValueError("rate_change must be a nonempty range of positive factors")
    rng = np.random.default_rng(seed)
    raw = []
    for pid in range(n_patients):
        raw.append(
            dict(
                id=pid,
                sex=int(rng.integers(0, 2)),
                baseline_age=float(round(rng.uniform(*age_range), 2)),
                rate=float(rng.uniform(*rate_range)),
                s0=float(rng.uniform(*baseline_severity)),
                anatomy_seed=int(rng.integers(0, 2**31 - 1)),
                n_visits=int(rng.integers(lo_v, hi_v + 1)),
                offsets=None,
            )
        )
        raw[-1]["offsets"] = _visit_offsets(rng, raw[-1]["n_visits"], span_years, min_gap)
        if rate_mode == "piecewise":
            raw[-1]["bend"] = (float(rng.uniform(0.0, span_years)), float(rng.uniform(*rate_change)))

    if raw:
        s0s = np.array([r["s0"] for r in raw])
        t1, t2 = np.quantile(s0s, [1 / 3, 2 / 3])
    patients = []
    for r in raw:
        status = STATUS_LEVELS[0] if r["s0"] < t1 else STATUS_LEVELS[1] if r["s0"] < t2 else STATUS_LEVELS[2]
        visits = []
        for k, off in enumerate(r["offsets"]):
            age = float(r["baseline_age"] + off)
            sev = float(r["s0"] + severity_offset(r["rate"], off, r.get("bend")))
            img, masks = render_scan(
                r["anatomy_seed"], sev, noise_seed=r["anatomy_seed"] + 1000 * (k + 1),
                noise_std=noise_std, size=image_size,
            )
            visits.append(Visit(age=age, severity=sev, image=img, masks=masks))
        patients.append(
            PatientRecord(
                id=r["id"], sex=r["sex"], baseline_age=r["baseline_age"], status=status,
                progression_rate=r["rate"], anatomy_seed=r["anatomy_seed"], visits=visits,
            )
        )
    meta = dict(
        n_patients=n_patients, visit_range=list(visit_range), age_range=list(age_range),
        rate_range=list(rate_range), seed=seed, span_years=span_years,
        baseline_severity=list(baseline_severity), min_gap=min_gap, noise_std=noise_std,
        rate_mode=rate_mode,
    )
    if rate_mode == "piecewise":
        meta["rate_change"] = list(rate_change)
    return Cohort(patients, image_size, meta)


def cohort_from_config(cfg: CohortConfig) -> Cohort:
    return generate_cohort(
        cfg.n_patients, tuple(cfg.visit_range), tuple(cfg.age_range), tuple(cfg.rate_range),
        cfg.seed, span_years=cfg.span_years, baseline_severity=tuple(cfg.baseline_severity),
        min_gap=cfg.min_gap, noise_std=cfg.noise_std, image_size=cfg.image_size,
        rate_mode=cfg.rate_mode, rate_change=tuple(cfg.rate_change),
    )


# ---------------------------------------------------------------------------
# splitting


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int, fractions=(0.80, 0.05, 0.15)) -> tuple[int, int, int]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n_val = _round_half_up(n * fractions[1])
    n_test = _round_half_up(n * fractions[2])
    if fractions[2] > 0 and n_test == 0:
        raise ValueError(f"{n} patients are too few for a nonempty test split")
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ValueError("split sizes exceed patient count")
    return n_train, n_val, n_test


def split_ids(ids, fractions=(0.80, 0.05, 0.15), seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    ids = sorted(int(i) for i in ids)
    _, n_val, n_test = split_sizes(len(ids), fractions)
    perm = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    val = sorted(perm[:n_val])
    test = sorted(perm[n_val : n_val + n_test])
    train = sorted(perm[n_val + n_test :])
    return train, val, test


def split_cohort(cohort: Cohort, fractions=(0.80, 0.05, 0.15), seed: int = 0):
    """Patient-level split into (train, val, test); no patient spans two splits."""
    tr, va, te = split_ids([p.id for p in cohort.patients], fractions, seed)
    return cohort.subset(tr), cohort.subset(va), cohort.subset(te)


# ---------------------------------------------------------------------------
# persistence


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of a row-major boolean mask, starting with a False run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    cur = False
    n = 0
    for v in flat:
        if v == cur:
            n += 1
        else:
            runs.append(n)
            cur = v
            n = 1
    runs.append(n)
    return runs


def rle_decode(runs: list[int], shape) -> np.ndarray:
    vals = np.zeros(len(runs), dtype=bool)
    vals[1::2] = True
    flat = np.repeat(vals, runs)
    if flat.size != int(np.prod(shape)):
        raise CohortFormatError("mask run lengths do not match image size")
    return flat.reshape(shape)


def save_cohort(cohort: Cohort, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = bytearray()
    patients = []
    for p in cohort.patients:
        visits = []
        for v in p.visits:
            payload += np.asarray(v.image, dtype="<f4").tobytes(order="C")
            visits.append(
                dict(
                    age=v.age,
                    severity=v.severity,
                    masks={r: rle_encode(m) for r, m in v.masks.as_dict().items()},
                )
            )
        patients.append(
            dict(
                id=p.id, sex=p.sex, baseline_age=p.baseline_age, status=p.status,
                progression_rate=p.progression_rate, anatomy_seed=p.anatomy_seed, visits=visits,
            )
        )
    payload = bytes(payload)
    doc = dict(
        format_version=FORMAT_VERSION,
        image_size=cohort.image_size,
        meta=cohort.meta,
        n_scans=cohort.n_scans,
        payload_crc32=zlib.crc32(payload),
        patients=patients,
    )
    (path / "scans.bin").write_bytes(payload)
    (path / "cohort.json").write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    return path


def load_cohort(path) -> Cohort:
    path = Path(path)
    try:
        doc = json.loads((path / "cohort.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CohortFormatError(f"{path / 'cohort.json'}: malformed JSON ({e})") from e
    if doc.get("format_version") != FORMAT_VERSION:
        raise CohortFormatError(
            f"{path}: format_version {doc.get('format_version')} != {FORMAT_VERSION}"
        )
    payload = (path / "scans.bin").read_bytes()
    size = doc["image_size"]
    n_px = size * size
    if len(payload) != doc["n_scans"] * n_px * 4:
        raise CohortFormatError(f"{path / 'scans.bin'}: truncated or oversized payload")
    if zlib.crc32(payload) != doc["payload_crc32"]:
        raise CohortFormatError(f"{path / 'scans.bin'}: checksum mismatch")
    scans = np.frombuffer(payload, dtype="<f4").reshape(-1, size, size)
    k = 0
    patients = []
    for pd in doc["patients"]:
        visits = []
        for vd in pd["visits"]:
            masks = RegionMasks(**{r: rle_decode(vd["masks"][r], (size, size)) for r in REGIONS})
            visits.append(
                Visit(age=vd["age"], severity=vd["severity"], image=scans[k].astype(np.float32), masks=masks)
            )
            k += 1
        patients.append(
            PatientRecord(
                id=pd["id"], sex=pd["sex"], baseline_age=pd["baseline_age"], status=pd["status"],
                progression_rate=pd["progression_rate"], anatomy_seed=pd["anatomy_seed"], visits=visits,
            )
        )
    return Cohort(patients, size, doc.get("meta", {}))
