"""Variational autoencoder over scans and the ArcRank latent objective.

ArcRank treats each latent as a matrix z = U diag(S) Vᵀ. For every patient
the left factor U (direction) should agree across visits and the nuclear
norm sum(S) (magnitude) should grow with visit time. Pairs are (earlier,
later); the earlier member is frozen with a stop-gradient by default.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .cohort import Cohort
from .gradcore import Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ArcRankConfig:
    margin: float = 1.0
    lambda_arc: float = 0.005
    lambda_rank: float = 0.01
    pull_enabled: bool = True
    stop_gradient_earlier: bool = True
    magnitude: str = "nuclear"  # or "per_component"
    angular: str = "arc"  # arc | cosine | none
    ranking: str = "rank"  # rank | simple | none

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.lambda_arc < 0 or self.lambda_rank < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_arc > 0.01:
            warnings.warn(f"lambda_arc={self.lambda_arc} is above 0.01, where training tends to collapse")
        if self.magnitude not in ("nuclear", "per_component"):
            raise ValueError(f"unknown magnitude mode {self.magnitude!r}")
        if self.angular not in ("arc", "cosine", "none"):
            raise ValueError(f"unknown angular loss {self.angular!r}")
        if self.ranking not in ("rank", "simple", "none"):
            raise ValueError(f"unknown ranking loss {self.ranking!r}")

    @property
    def active(self) -> bool:
        return (self.angular != "none" and self.lambda_arc > 0) or (
            self.ranking != "none" and self.lambda_rank > 0
        )


@dataclass
class AEConfig:
    image_size: int = 32
    latent_shape: tuple[int, int] = (8, 8)
    hidden: tuple[int, ...] = (512,)
    beta_kl: float = 1e-2
    lr: float = 1e-3
    batch_size: int = 2  # patients per step; every visit of each patient is included
    epochs: int = 60
    weight_decay: float = 0.0
    recon_reduction: str = "sum"  # squared error summed per image, or "mean" per pixel
    seed: int = 0
    arcrank: ArcRankConfig = field(default_factory=ArcRankConfig)

    @property
    def latent_dim(self) -> int:
        return self.latent_shape[0] * self.latent_shape[1]

    @property
    def n_pixels(self) -> int:
        return self.image_size * self.image_size


# ---------------------------------------------------------------------------
# parameters and forward passes


def _dense_init(rng, n_in: int, n_out: int, scale: float = 1.0):
    return rng.normal(0.0, scale / np.sqrt(n_in), (n_in, n_out)), np.zeros(n_out)


def init_autoencoder(cfg: AEConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p: dict[str, np.ndarray] = {}
    widths = [cfg.n_pixels, *cfg.hidden]
    for i in range(len(cfg.hidden)):
        p[f"enc{i}.w"], p[f"enc{i}.b"] = _dense_init(rng, widths[i], widths[i + 1])
    p["enc_mean.w"], p["enc_mean.b"] = _dense_init(rng, widths[-1], cfg.latent_dim)
    p["enc_logvar.w"], p["enc_logvar.b"] = _dense_init(rng, widths[-1], cfg.latent_dim, 0.1)
    p["enc_logvar.b"] -= 4.0
    dwidths = [cfg.latent_dim, *reversed(cfg.hidden)]
    for i in range(len(cfg.hidden)):
        p[f"dec{i}.w"], p[f"dec{i}.b"] = _dense_init(rng, dwidths[i], dwidths[i + 1])
    p["dec_out.w"], p["dec_out.b"] = _dense_init(rng, dwidths[-1], cfg.n_pixels)
    return p


def _n_hidden(P) -> int:
    return sum(1 for k in P if k.startswith("enc") and k.endswith(".w") and k[3].isdigit())


def encoder_forward(P: dict, x) -> tuple[Tensor, Tensor]:
    h = x
    for i in range(_n_hidden(P)):
        h = gc.silu(h @ P[f"enc{i}.w"] + P[f"enc{i}.b"])
    return h @ P["enc_mean.w"] + P["enc_mean.b"], h @ P["enc_logvar.w"] + P["enc_logvar.b"]


def decoder_forward(P: dict, z) -> Tensor:
    h = z
    n = _n_hidden(P)
    for i in range(n):
        h = gc.silu(h @ P[f"dec{i}.w"] + P[f"dec{i}.b"])
    return gc.sigmoid(h @ P["dec_out.w"] + P["dec_out.b"])


@dataclass(eq=False)
class LatentSample:
    z: np.ndarray
    mean: np.ndarray
    logvar: np.ndarray

    @cached_property
    def svd(self) -> gc.SvdFactors:
        return gc.svd_thin(self.z)

    @property
    def nuclear(self) -> float:
        return float(self.svd.S.sum())


def _check_images(images: np.ndarray, params) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    n_px = params["enc0.w"].shape[0] if "enc0.w" in params else params["enc_mean.w"].shape[0]
    if x.ndim == 2:
        x = x[None]
    if x.shape[-2] * x.shape[-1] != n_px:
        raise ValueError(f"image shape {x.shape[-2:]} does not match encoder input of {n_px} pixels")
    return x.reshape(x.shape[0], n_px)


def latent_shape_of(params) -> tuple[int, int]:
    d = params["enc_mean.w"].shape[1]
    side = int(round(np.sqrt(d)))
    return (side, d // side)


def encode_batch(params, images, training: bool = False, rng=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(z, mean, logvar) for a stack of images; latents shaped (B, r, c)."""
    x = _check_images(images, params)
    P = gc.constants(params)
    mean, logvar = encoder_forward(P, Tensor(x))
    shape = (x.shape[0], *latent_shape_of(params))
    m, lv = mean.data.reshape(shape), logvar.data.reshape(shape)
    if training:
        rng = np.random.default_rng() if rng is None else rng
        z = m + np.exp(0.5 * lv) * rng.standard_normal(shape)
    else:
        z = m.copy()
    return z, m, lv


def encode(params, image, training: bool = False, rng=None) -> LatentSample:
    z, m, lv = encode_batch(params, image, training, rng)
    return LatentSample(z[0], m[0], lv[0])


def decode_batch(params, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    d = params["dec0.w"].shape[0] if "dec0.w" in params else params["dec_out.w"].shape[0]
    if z.size % d or z.shape[-2] * z.shape[-1] != d:
        raise ValueError(f"latent shape {z.shape} does not match decoder input of {d}")
    flat = z.reshape(-1, d)
    out = decoder_forward(gc.constants(params), Tensor(flat)).data
    side = int(round(np.sqrt(out.shape[1])))
    return out.reshape(-1, side, side)


def decode(params, z) -> np.ndarray:
    return decode_batch(params, np.asarray(z)[None] if np.ndim(z) == 2 else z)[0]


# ---------------------------------------------------------------------------
# losses


def arc_loss(U_i, U_j, stop_gradient: bool = True) -> Tensor:
    """Elementwise L1 distance between two left-singular-vector matrices."""
    U_i, U_j = gc.as_tensor(U_i), gc.as_tensor(U_j)
    if U_i.shape != U_j.shape:
        raise ValueError(f"shape mismatch {U_i.shape} vs {U_j.shape}")
    if stop_gradient:
        U_i = gc.sg(U_i)
    return gc.abs_(U_j - U_i).sum()


def rank_pull_loss(S_i, S_j, m: float, pull: bool = True, stop_gradient: bool = True) -> Tensor:
    """max(0, m - gap) + |gap| (when pull) with gap = sum(S_j) - sum(S_i)."""
    S_i, S_j = gc.as_tensor(S_i), gc.as_tensor(S_j)
    if S_i.shape != S_j.shape:
        raise ValueError(f"shape mismatch {S_i.shape} vs {S_j.shape}")
    if np.any(S_i.data < 0) or np.any(S_j.data < 0):
        raise ValueError("singular values must be nonnegative")
    if stop_gradient:
        S_i = gc.sg(S_i)
    gap = S_j.sum() - S_i.sum()
    out = gc.relu(m - gap)
    return out + gc.abs_(gap) if pull else out


def cosine_surrogate_loss(z_i, z_j, stop_gradient: bool = True) -> Tensor:
    z_i, z_j = gc.as_tensor(z_i), gc.as_tensor(z_j)
    if stop_gradient:
        z_i = gc.sg(z_i)
    a, b = z_i.reshape(-1), z_j.reshape(-1)
    na, nb = np.linalg.norm(a.data), np.linalg.norm(b.data)
    if na == 0 or nb == 0:
        raise ValueError("cosine surrogate undefined for a zero-norm latent")
    return 1.0 - (a * b).sum() / (gc.sqrt((a * a).sum()) * gc.sqrt((b * b).sum()))


def simple_rank_loss(d_i, d_j) -> Tensor:
    """max(0, d_j - d_i), orientation exactly as the surrogate is written."""
    return gc.relu(gc.as_tensor(d_j) - gc.as_tensor(d_i))


def pair_indices(groups: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All (earlier, later) pairs and adjacent pairs inside each time-ordered group."""
    ai, aj, ni, nj = [], [], [], []
    for g in groups:
        g = list(g)
        for a in range(len(g)):
            for b in range(a + 1, len(g)):
                ai.append(g[a])
                aj.append(g[b])
        for a in range(len(g) - 1):
            ni.append(g[a])
            nj.append(g[a + 1])
    as_idx = lambda v: np.asarray(v, dtype=np.intp)
    return as_idx(ai), as_idx(aj), as_idx(ni), as_idx(nj)


def arcrank_terms(z: Tensor, groups: Sequence[Sequence[int]], cfg: ArcRankConfig) -> dict[str, Tensor]:
    """ArcRank components summed over pairs for a batch of latent matrices.

    ``z`` is (B, r, c); each group lists row indices of one patient in time
    order, and groups are expected in patient-id order.
    """
    i, j, ni, nj = pair_indices(groups)
    zero = gc.Tensor(0.0)
    out = {"arc": zero, "rank": zero, "pull": zero}
    if len(i) == 0:
        log.info("arcrank: no same-patient pairs in batch, loss defined as 0")
        out["total"] = zero
        return out
    frozen = gc.sg if cfg.stop_gradient_earlier else (lambda t: t)
    need_svd = (cfg.angular == "arc" and cfg.lambda_arc > 0) or (
        cfg.ranking != "none" and cfg.lambda_rank > 0
    )
    if need_svd:
        U, S = gc.svd(z)
    if cfg.angular == "arc" and cfg.lambda_arc > 0:
        out["arc"] = gc.abs_(gc.take(U, j) - frozen(gc.take(U, i))).sum()
    elif cfg.angular == "cosine" and cfg.lambda_arc > 0:
        flat = z.reshape(z.shape[0], -1)
        a, b = frozen(gc.take(flat, i)), gc.take(flat, j)
        cos = (a * b).sum(axis=1) / (gc.sqrt((a * a).sum(axis=1)) * gc.sqrt((b * b).sum(axis=1)))
        out["arc"] = (1.0 - cos).sum()
    if cfg.ranking != "none" and cfg.lambda_rank > 0:
        mag = S.sum(axis=1) if cfg.magnitude == "nuclear" else S
        if cfg.ranking == "rank":
            gap = gc.take(mag, j) - frozen(gc.take(mag, i))
            out["rank"] = gc.relu(cfg.margin - gap).sum()
            if cfg.pull_enabled:
                adj = gc.take(mag, nj) - frozen(gc.take(mag, ni))
                out["pull"] = gc.abs_(adj).sum()
        else:
            out["rank"] = gc.relu(gc.take(mag, j) - frozen(gc.take(mag, i))).sum()
    out["total"] = cfg.lambda_arc * out["arc"] + cfg.lambda_rank * (out["rank"] + out["pull"])
    return out


def arcrank_loss(latents: Sequence, cfg: ArcRankConfig) -> Tensor:
    """ArcRank of one patient's time-ordered latents (arrays, Tensors or LatentSamples)."""
    if len(latents) < 2:
        log.info("arcrank_loss: fewer than 2 latents, defined as 0")
        return gc.Tensor(0.0)
    zs = [l.z if isinstance(l, LatentSample) else l for l in latents]
    zs = [gc.as_tensor(z).reshape((1,) + tuple(np.shape(gc.as_tensor(z).data))) for z in zs]
    z = gc.concat(zs, axis=0)
    return arcrank_terms(z, [list(range(len(zs)))], cfg)["total"]


def kl_term(mean: Tensor, logvar: Tensor) -> Tensor:
    return (-0.5 * (1.0 + logvar - mean * mean - gc.exp(logvar))).sum(axis=1).mean()


# ---------------------------------------------------------------------------
# training


def _patient_batches(cohort: Cohort, batch_size: int, rng) -> list[list[int]]:
    order = rng.permutation(len(cohort.patients))
    return [sorted(order[k : k + batch_size].tolist()) for k in range(0, len(order), batch_size)]


def ae_loss(P: dict, x: np.ndarray, groups, cfg: AEConfig, eps: np.ndarray) -> dict[str, Tensor]:
    mean, logvar = encoder_forward(P, Tensor(x))
    z = mean + gc.exp(0.5 * logvar) * eps
    recon = decoder_forward(P, z)
    se = gc.square(recon - x)
    rec = se.sum(axis=1).mean() if cfg.recon_reduction == "sum" else se.mean()
    terms = {"recon": rec, "kl": kl_term(mean, logvar)}
    total = terms["recon"] + cfg.beta_kl * terms["kl"]
    if cfg.arcrank.active:
        ar = arcrank_terms(mean.reshape((x.shape[0], *cfg.latent_shape)), groups, cfg.arcrank)
        n = max(sum(1 for g in groups if len(g) > 1), 1)
        for k in ("arc", "rank", "pull"):
            terms[k] = ar[k] * (1.0 / n)
        total = total + ar["total"] * (1.0 / n)
    terms["total"] = total
    return terms


def train_autoencoder(train: Cohort, cfg: AEConfig, params: dict | None = None, progress=None):
    """Fit the VAE (plus ArcRank when enabled). Returns (params, per-epoch history)."""
    if len(train.patients) == 0:
        raise ValueError("empty training split")
    params = init_autoencoder(cfg) if params is None else {k: v.copy() for k, v in params.items()}
    opt = gc.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 101])
    images = [np.stack([v.image for v in p.visits]).reshape(len(p.visits), -1).astype(np.float64) for p in train.patients]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        n_steps = 0
        for batch in _patient_batches(train, cfg.batch_size, rng):
            x = np.concatenate([images[b] for b in batch])
            groups, start = [], 0
            for b in batch:
                groups.append(list(range(start, start + len(images[b]))))
                start += len(images[b])
            eps = rng.standard_normal((x.shape[0], cfg.latent_dim))
            tape = gc.Tape()
            P = gc.leaves(tape, params)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", gc.DegenerateSpectrumWarning)
                    terms = ae_loss(P, x, groups, cfg, eps)
                    grads = gc.backward(tape, terms["total"])
            except gc.NonFiniteError as e:
                raise TrainingDivergedError(f"autoencoder loss diverged at epoch {epoch}") from e
            opt.step(gc.grads_by_name(grads, P))
            for k, t in terms.items():
                sums[k] = sums.get(k, 0.0) + float(t.data)
            n_steps += 1
        row = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
        if not np.isfinite(row["total"]):
            raise TrainingDivergedError(f"autoencoder loss is NaN at epoch {epoch}")
        history.append(row)
        if progress:
            progress(row)
    return params, history


# ---------------------------------------------------------------------------
# latent-space diagnostics


def encode_cohort(params, cohort: Cohort) -> dict[int, np.ndarray]:
    """Evaluation-mode latent means per patient, shaped (visits, r, c)."""
    out = {}
    for p in cohort.patients:
        z, _, _ = encode_batch(params, np.stack([v.image for v in p.visits]))
        out[p.id] = z
    return out


def within_patient_arc_distance(latents: dict[int, np.ndarray]) -> float:
    """Mean over same-patient pairs of the elementwise L1 distance between U factors."""
    dists = []
    for pid in sorted(latents):
        U = gc.svd_thin(latents[pid]).U
        for a in range(len(U)):
            for b in range(a + 1, len(U)):
                dists.append(np.abs(U[b] - U[a]).sum())
    return float(np.mean(dists)) if dists else 0.0


def adjacent_order_fraction(latents: dict[int, np.ndarray]) -> float:
    """Fraction of adjacent visit pairs whose nuclear norm increases with age."""
    good = total = 0
    for pid in sorted(latents):
        nuc = gc.svd_thin(latents[pid]).S.sum(axis=-1)
        good += int(np.sum(np.diff(nuc) > 0))
        total += len(nuc) - 1
    return good / total if total else float("nan")


def config_dict(cfg: AEConfig) -> dict:
    return asdict(cfg)
