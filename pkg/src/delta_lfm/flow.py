"""Temporal flow matching on patient latent trajectories.

For a same-patient pair (z_i at age t_i, z_j at age t_j) the reference path
is the straight line between them. In temporal mode the flow time runs over
[0, T] with T = t_j − t_i years and the target velocity is (z_j − z_i)/T;
in physical mode it runs over [0, 1] and the target is z_j − z_i.

The velocity network is an MLP over the flattened latent whose hidden layers
are modulated by AdaLN. Conditioning is the sinusoidal embedding of the
start, current and end ages (measured from the patient's baseline age) plus
sex, baseline age / 100 and clinical status.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .cohort import PatientRecord
from .gradcore import Tensor
from .latent import TrainingDivergedError

ADALN_EPS = 1e-5
SAMPLING_MODES = ("temporal_0T", "physical_01")


@dataclass
class FlowConfig:
    sampling_mode: str = "temporal_0T"
    dt: float = 0.01
    sde_sigma: float = 0.0
    sde_train_noise: bool = False
    embed_dim: int = 16
    status_noise_std: float = 1.0
    conditioning_enabled: bool = True
    hidden: int = 128
    depth: int = 2
    cond_width: int = 64
    residual_decode: bool = True
    reanchor_segments: bool = False

    def __post_init__(self):
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.sde_sigma < 0:
            raise ValueError("sde_sigma must be nonnegative")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be even and >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def n_attributes(self) -> int:
        return 3 if self.conditioning_enabled else 0

    @property
    def cond_dim(self) -> int:
        return 3 * self.embed_dim + self.n_attributes


@dataclass
class FlowTrainConfig:
    lr: float = 3e-5
    batch_size: int = 4
    epochs: int = 40
    weight_decay: float = 0.0
    seed: int = 0


def sinusoidal_embed(t: float, dim: int) -> np.ndarray:
    """[sin(t ω_k), cos(t ω_k)] for ω_k = 10000^(−2k/dim), k < dim/2."""
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding width must be even and >= 2, got {dim}")
    k = np.arange(dim // 2)
    w = 10000.0 ** (-2.0 * k / dim)
    out = np.empty(dim)
    out[0::2] = np.sin(t * w)
    out[1::2] = np.cos(t * w)
    return out


def make_condition(
    record: PatientRecord,
    t_start: float,
    t_current: float,
    t_end: float,
    cfg: FlowConfig,
    training: bool = False,
    rng=None,
) -> np.ndarray:
    if not (t_start <= t_current <= t_end):
        raise ValueError(f"condition times out of order: {t_start}, {t_current}, {t_end}")
    base = record.baseline_age
    parts = [sinusoidal_embed(t - base, cfg.embed_dim) for t in (t_start, t_current, t_end)]
    if cfg.conditioning_enabled:
        status = float(record.status)
        if training and cfg.status_noise_std > 0:
            status += float((rng or np.random.default_rng()).normal(0.0, cfg.status_noise_std))
        parts.append(np.array([float(record.sex), base / 100.0, status]))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# network


def init_velocity_net(latent_dim: int, cfg: FlowConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 7])
    H, C = cfg.hidden, cfg.cond_width
    p = {
        "cond.w": rng.normal(0.0, 1.0 / np.sqrt(cfg.cond_dim), (cfg.cond_dim, C)),
        "cond.b": np.zeros(C),
        "in.w": rng.normal(0.0, 1.0 / np.sqrt(latent_dim), (latent_dim, H)),
        "in.b": np.zeros(H),
        "out.w": rng.normal(0.0, 0.1 / np.sqrt(H), (H, latent_dim)),
        "out.b": np.zeros(latent_dim),
    }
    for layer in range(cfg.depth):
        if layer > 0:
            p[f"h{layer}.w"] = rng.normal(0.0, 1.0 / np.sqrt(H), (H, H))
            p[f"h{layer}.b"] = np.zeros(H)
        for kind in ("scale", "shift"):
            p[f"ada{layer}.{kind}.w"] = np.zeros((C, H))
            p[f"ada{layer}.{kind}.b"] = np.zeros(H)
    return p


def layer_norm(h) -> Tensor:
    h = gc.as_tensor(h)
    mu = h.mean(axis=-1, keepdims=True)
    c = h - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    return c / gc.sqrt(var + ADALN_EPS)


def adaln_modulate(h, cond, P: dict, layer: int) -> Tensor:
    """scale(cond) ⊙ normalize(h) + shift(cond), with scale = 1 + affine(cond)."""
    scale = 1.0 + (cond @ P[f"ada{layer}.scale.w"] + P[f"ada{layer}.scale.b"])
    shift = cond @ P[f"ada{layer}.shift.w"] + P[f"ada{layer}.shift.b"]
    return scale * layer_norm(h) + shift


def _depth(P) -> int:
    return sum(1 for k in P if k.endswith(".scale.w"))


def velocity_forward(P: dict, z_flat, cond_raw) -> Tensor:
    """Velocity for flattened latents (B, D) under raw conditions (B, cond_dim)."""
    c = gc.silu(gc.as_tensor(cond_raw) @ P["cond.w"] + P["cond.b"])
    h = gc.as_tensor(z_flat) @ P["in.w"] + P["in.b"]
    for layer in range(_depth(P)):
        if layer > 0:
            h = h @ P[f"h{layer}.w"] + P[f"h{layer}.b"]
        h = gc.silu(adaln_modulate(h, c, P, layer))
    return h @ P["out.w"] + P["out.b"]


def velocity(params: dict, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
    """Velocity of a single latent matrix (or a stack) under its condition vector(s)."""
    z = np.asarray(z, dtype=np.float64)
    d = params["in.w"].shape[0]
    single = z.ndim == 2
    zb = z[None] if single else z
    if zb.shape[-2] * zb.shape[-1] != d:
        raise ValueError(f"latent shape {z.shape} does not match velocity net input {d}")
    cb = np.atleast_2d(cond)
    out = _velocity_numpy(params, zb.reshape(len(zb), d), cb).reshape(zb.shape)
    return out[0] if single else out


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _velocity_numpy(P: dict, z_flat: np.ndarray, cond_raw: np.ndarray) -> np.ndarray:
    # tape-free mirror of velocity_forward; inference calls this once per Euler step
    c = _silu(cond_raw @ P["cond.w"] + P["cond.b"])
    h = z_flat @ P["in.w"] + P["in.b"]
    for layer in range(_depth(P)):
        if layer > 0:
            h = h @ P[f"h{layer}.w"] + P[f"h{layer}.b"]
        c_ = h - h.mean(axis=-1, keepdims=True)
        hn = c_ / np.sqrt((c_ * c_).mean(axis=-1, keepdims=True) + ADALN_EPS)
        scale = 1.0 + (c @ P[f"ada{layer}.scale.w"] + P[f"ada{layer}.scale.b"])
        shift = c @ P[f"ada{layer}.shift.w"] + P[f"ada{layer}.shift.b"]
        h = _silu(scale * hn + shift)
    out = h @ P["out.w"] + P["out.b"]
    if not np.all(np.isfinite(out)):
        raise gc.NonFiniteError("velocity produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# objective


def fm_training_sample(z_i, z_j, t_i: float, t_j: float, mode: str, rng, t=None):
    """(z_t, t, v_target, T) on the straight path from z_i to z_j.

    ``t`` is the flow time: years since t_i in temporal mode, a fraction of the
    interval in physical mode. Drawn uniformly when not given.
    """
    if not t_j > t_i:
        raise ValueError(f"need t_j > t_i, got {t_i}, {t_j}")
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    T = t_j - t_i
    if mode == "temporal_0T":
        t = rng.uniform(0.0, T) if t is None else float(t)
        return z_i + (t / T) * (z_j - z_i), t, (z_j - z_i) / T, T
    if mode == "physical_01":
        t = rng.uniform(0.0, 1.0) if t is None else float(t)
        return (1.0 - t) * z_i + t * z_j, t, z_j - z_i, T
    raise ValueError(f"unknown sampling mode {mode!r}")


def flow_time_to_age(t: float, t_i: float, T: float, mode: str) -> float:
    return t_i + t if mode == "temporal_0T" else t_i + t * T


def fm_loss(P: dict, z_t, cond, v_target) -> Tensor:
    """Batch mean of the squared velocity error summed over latent entries."""
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.shape[0] == 0:
        raise ValueError("empty flow-matching batch")
    B = z_t.shape[0]
    v = velocity_forward(P, z_t.reshape(B, -1), cond)
    err = v - np.asarray(v_target, dtype=np.float64).reshape(B, -1)
    return (err * err).sum(axis=1).mean()


def all_pairs(latents: dict[int, tuple[np.ndarray, np.ndarray]]) -> list[tuple[int, int, int]]:
    """Every ordered same-patient pair (pid, i, j) with i < j."""
    pairs = []
    for pid in sorted(latents):
        n = len(latents[pid][0])
        pairs.extend((pid, i, j) for i in range(n) for j in range(i + 1, n))
    return pairs


def build_batch(batch, latents, records, cfg: FlowConfig, rng):
    zs, conds, vs = [], [], []
    for pid, i, j in batch:
        ages, Z = latents[pid]
        t_i, t_j = float(ages[i]), float(ages[j])
        z_t, t, v, T = fm_training_sample(Z[i], Z[j], t_i, t_j, cfg.sampling_mode, rng)
        if cfg.sde_train_noise and cfg.sde_sigma > 0:
            z_t = z_t + cfg.sde_sigma * rng.standard_normal(z_t.shape)
        age = min(flow_time_to_age(t, t_i, T, cfg.sampling_mode), t_j)
        conds.append(make_condition(records[pid], t_i, age, t_j, cfg, training=True, rng=rng))
        zs.append(z_t)
        vs.append(v)
    return np.stack(zs), np.stack(conds), np.stack(vs)


def train_flow(
    latents: dict[int, tuple[np.ndarray, np.ndarray]],
    records: dict[int, PatientRecord],
    cfg: FlowConfig,
    tcfg: FlowTrainConfig,
    params: dict | None = None,
    progress=None,
):
    """Fit the velocity net on same-patient pairs.

    ``latents`` maps patient id to (visit ages, evaluation-mode latent means).
    """
    pairs = all_pairs(latents)
    if not pairs:
        raise ValueError("no same-patient visit pairs to train on")
    latent_dim = int(np.prod(next(iter(latents.values()))[1].shape[1:]))
    params = init_velocity_net(latent_dim, cfg, tcfg.seed) if params is None else {k: v.copy() for k, v in params.items()}
    opt = gc.AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng([tcfg.seed, 211])
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(pairs))
        total, n = 0.0, 0
        for k in range(0, len(order), tcfg.batch_size):
            batch = [pairs[q] for q in order[k : k + tcfg.batch_size]]
            z_t, cond, v = build_batch(batch, latents, records, cfg, rng)
            tape = gc.Tape()
            P = gc.leaves(tape, params)
            try:
                loss = fm_loss(P, z_t, cond, v)
                grads = gc.backward(tape, loss)
            except gc.NonFiniteError as e:
                raise TrainingDivergedError(f"flow loss diverged at epoch {epoch}") from e
            opt.step(gc.grads_by_name(grads, P))
            total += float(loss.data)
            n += 1
        row = {"epoch": epoch, "fm": total / n}
        history.append(row)
        if progress:
            progress(row)
    return params, history


def status_noise_draws(n: int, cfg: FlowConfig, seed: int = 0) -> np.ndarray:
    """Injected status noise for ``n`` training-mode conditions (for diagnostics)."""
    rec = PatientRecord(id=0, sex=0, baseline_age=70.0, status=3, progression_rate=1.0, anatomy_seed=0)
    rng = np.random.default_rng(seed)
    return np.array(
        [make_condition(rec, 70.0, 70.0, 71.0, cfg, training=True, rng=rng)[-1] - 3.0 for _ in range(n)]
    )
