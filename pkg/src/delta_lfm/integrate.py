"""Forward-Euler inference: carry a source latent to arbitrary future ages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cohort import PatientRecord, Visit
from .flow import FlowConfig, flow_time_to_age, make_condition, velocity
from .latent import decode_batch, encode_batch


class IntegrationError(FloatingPointError):
    pass


def time_grid(t_start: float, t_end: float, dt: float, marks: Sequence[float] = ()) -> np.ndarray:
    """Step points t_start + k·dt, ending exactly at t_end, with ``marks`` spliced in.

    A grid point within 1e-9 of a mark is replaced by the mark.
    """
    if not t_end > t_start:
        raise ValueError(f"need t_end > t_start, got {t_start}, {t_end}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    span = t_end - t_start
    n = max(1, math.ceil(span / dt - 1e-9))
    pts = [t_start + k * dt for k in range(n)] + [t_end]
    tol = 1e-9 * max(1.0, abs(t_end))
    for m in marks:
        if not t_start < m <= t_end:
            raise ValueError(f"mark {m} outside ({t_start}, {t_end}]")
        close = [i for i, p in enumerate(pts) if abs(p - m) <= tol]
        if close:
            pts[close[0]] = m
        else:
            pts.append(m)
    return np.array(sorted(set(pts)))


def euler_integrate(
    field_fn: Callable[[np.ndarray, float], np.ndarray],
    z0,
    t_start: float,
    t_end: float,
    dt: float,
    sde_sigma: float = 0.0,
    rng=None,
    snapshots: Sequence[float] = (),
):
    """z_{k+1} = z_k + h_k · v(z_k, t_k) from t_start to t_end.

    The final step shrinks to land on t_end. With ``sde_sigma > 0`` each step
    adds sde_sigma·√h_k·ξ. When ``snapshots`` is given, returns
    (final state, states at each snapshot time) instead of the final state.
    """
    grid = time_grid(t_start, t_end, dt, snapshots)
    want = {float(s): None for s in snapshots}
    z = np.array(z0, dtype=np.float64)
    if sde_sigma > 0 and rng is None:
        rng = np.random.default_rng()
    for k in range(len(grid) - 1):
        t, h = grid[k], grid[k + 1] - grid[k]
        z = z + h * field_fn(z, t)
        if sde_sigma > 0:
            z = z + sde_sigma * math.sqrt(h) * rng.standard_normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise IntegrationError(f"non-finite state at step {k} (t={t:.6g})")
        if grid[k + 1] in want:
            want[float(grid[k + 1])] = z.copy()
    if snapshots:
        return z, [want[float(s)] for s in snapshots]
    return z


def latent_field(params, record: PatientRecord, t_i: float, T: float, t_anchor_end: float, cfg: FlowConfig):
    """Velocity in flow time, conditioned on anchors (t_i, current age, t_anchor_end)."""
    def f(z, t):
        age = min(flow_time_to_age(t, t_i, T, cfg.sampling_mode), t_anchor_end)
        return velocity(params, z, make_condition(record, t_i, age, t_anchor_end, cfg))

    return f


def _flow_span(t_i: float, t_j: float, cfg: FlowConfig) -> float:
    return t_j - t_i if cfg.sampling_mode == "temporal_0T" else 1.0


def integrate_latent(
    flow_params, z, record: PatientRecord, t_i: float, t_j: float, cfg: FlowConfig, rng=None,
    snapshot_ages: Sequence[float] = (),
):
    """Integrate a latent from age t_i to t_j; anchors are (t_i, t_j)."""
    if not t_j > t_i:
        raise ValueError(f"target age {t_j} must be after source age {t_i}")
    T = t_j - t_i
    span = _flow_span(t_i, t_j, cfg)
    to_flow = (lambda a: a - t_i) if cfg.sampling_mode == "temporal_0T" else (lambda a: (a - t_i) / T)
    f = latent_field(flow_params, record, t_i, T, t_j, cfg)
    return euler_integrate(
        f, z, 0.0, span, cfg.dt, cfg.sde_sigma, rng,
        snapshots=[to_flow(a) for a in snapshot_ages],
    )


@dataclass
class TrajectoryPrediction:
    source_age: float
    query_ages: list[float]
    latents: list[np.ndarray] = field(default_factory=list)
    images: list[np.ndarray] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)


def decode_predictions(bundle, source: Visit, z0, zs) -> list[np.ndarray]:
    """Decode predicted latents; with residual decoding, add dec(z) − dec(z0) to the source scan."""
    imgs = decode_batch(bundle.ae_params, np.stack(zs))
    if bundle.flow_cfg.residual_decode:
        base = decode_batch(bundle.ae_params, z0[None])[0]
        x0 = np.asarray(source.image, dtype=np.float64)
        imgs = np.clip(x0 + (imgs - base), 0.0, 1.0)
    return list(imgs)


def _steps(t_i, t_j, cfg, marks=()):
    span = _flow_span(t_i, t_j, cfg)
    return len(time_grid(0.0, span, cfg.dt, marks)) - 1


def predict_followup(bundle, source: Visit, record: PatientRecord, target_age: float, rng=None):
    """Encode the source scan, integrate to ``target_age`` and decode."""
    t_i = float(source.age)
    if not target_age > t_i:
        raise ValueError(f"target age {target_age} must be after source age {t_i}")
    z0 = encode_batch(bundle.ae_params, source.image)[0][0]
    if rng is None and bundle.flow_cfg.sde_sigma > 0:
        rng = np.random.default_rng(0)
    zT = integrate_latent(bundle.flow_params, z0, record, t_i, target_age, bundle.flow_cfg, rng)
    img = decode_predictions(bundle, source, z0, [zT])[0]
    pred = TrajectoryPrediction(
        source_age=t_i, query_ages=[float(target_age)], latents=[zT], images=[img],
        steps=[_steps(t_i, target_age, bundle.flow_cfg)],
    )
    return img, pred


def predict_trajectory(
    bundle, source: Visit, record: PatientRecord, horizon_years: float, interval_years: float, rng=None
) -> TrajectoryPrediction:
    """Snapshots every ``interval_years`` up to ``horizon_years`` from one integration.

    Anchors stay at (source age, final age) unless ``reanchor_segments`` is set,
    in which case each segment is integrated with its own (start, end) anchors.
    """
    if not (horizon_years > 0 and interval_years > 0):
        raise ValueError("horizon and interval must be positive")
    cfg = bundle.flow_cfg
    t_i = float(source.age)
    n = max(1, int(math.floor(horizon_years / interval_years + 1e-9)))
    ages = [t_i + k * interval_years for k in range(1, n + 1)]
    if ages[-1] < t_i + horizon_years - 1e-9:
        ages.append(t_i + horizon_years)
    z0 = encode_batch(bundle.ae_params, source.image)[0][0]
    if rng is None and cfg.sde_sigma > 0:
        rng = np.random.default_rng(0)
    if cfg.reanchor_segments:
        zs, steps, z, prev = [], [], z0, t_i
        for a in ages:
            z = integrate_latent(bundle.flow_params, z, record, prev, a, cfg, rng)
            zs.append(z)
            steps.append(_steps(prev, a, cfg))
            prev = a
    else:
        _, zs = integrate_latent(bundle.flow_params, z0, record, t_i, ages[-1], cfg, rng, snapshot_ages=ages)
        T = ages[-1] - t_i
        marks = [(a - t_i) if cfg.sampling_mode == "temporal_0T" else (a - t_i) / T for a in ages]
        grid = time_grid(0.0, _flow_span(t_i, ages[-1], cfg), cfg.dt, marks)
        idx = [int(np.searchsorted(grid, m)) for m in marks]
        steps = [b - a for a, b in zip([0] + idx[:-1], idx)]
    imgs = decode_predictions(bundle, source, z0, zs)
    return TrajectoryPrediction(source_age=t_i, query_ages=ages, latents=list(zs), images=imgs, steps=steps)
