"""Experiment stages behind the command line. Each reads and writes one run directory.

Run directory layout::

    cohort/            cohort.json + scans.bin
    split.json         patient ids per split and the fractions used
    ae.ckpt            autoencoder-only bundle
    model.ckpt         autoencoder + velocity net bundle
    history.csv        per-epoch losses for both stages
    metrics.csv        one row per evaluated (patient, source, target)
                       (metrics_copy_baseline.csv / summary_copy_baseline.json for --copy-baseline)
    summary.json       overall and per-horizon aggregates
    latents.csv        per-scan latent export with a 2-D PCA projection
    sensitivity.csv    Δ-RMAE noise-sensitivity table
    predict/           graymap exports
    ablate/<variant>/  one sub-run per ablation variant
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import gradcore as gc
from .artifacts import pca_2d, percentile_normalize, read_csv, write_csv, write_json, write_pgm
from .checkpoint import ModelBundle, load_bundle, save_bundle
from .cohort import ANATOMICAL, Cohort, cohort_from_config, load_cohort, save_cohort, split_ids
from .config import ConfigError, ExperimentConfig, ae_sections, canonical_json, config_hash, from_dict, to_dict
from .flow import train_flow
from .integrate import predict_followup, predict_trajectory
from .latent import adjacent_order_fraction, encode_batch, encode_cohort, train_autoencoder, within_patient_arc_distance
from .metrics import MetricReport, evaluate_prediction, sensitivity_table, stratify_by_horizon, summarize

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("stage", "epoch", "total", "recon", "kl", "arc", "rank", "pull", "fm")
METRIC_COLUMNS = (
    "patient_id", "source_age", "target_age", "horizon", "psnr", "ssim",
    *(f"mae_{r}" for r in ANATOMICAL), "mae_mean", "delta_rmae", "exact_match",
)
SENSITIVITY_COLUMNS = ("sigma", "mean", "std", "bias")
ABLATION_COLUMNS = (
    "variant", "delta_rmae_mean", "delta_rmae_std", "psnr_mean", "ssim_mean", "mae_mean",
    "arc_distance", "order_fraction",
)

ABLATIONS = {
    "full": {},
    "no_arcrank": {"ae.arcrank.angular": "none", "ae.arcrank.ranking": "none"},
    "no_arc": {"ae.arcrank.angular": "none"},
    "no_rank": {"ae.arcrank.ranking": "none"},
    "cosine": {"ae.arcrank.angular": "cosine"},
    "simple_rank": {"ae.arcrank.ranking": "simple"},
    "physical_01": {"flow.sampling_mode": "physical_01"},
    "unconditional": {"flow.conditioning_enabled": False},
}


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RunPaths:
    root: Path
    cohort_root: Path | None = None

    @property
    def cohort(self) -> Path:
        return (self.cohort_root or self.root) / "cohort"

    @property
    def split(self) -> Path:
        return (self.cohort_root or self.root) / "split.json"

    ae_ckpt = property(lambda self: self.root / "ae.ckpt")
    model = property(lambda self: self.root / "model.ckpt")
    history = property(lambda self: self.root / "history.csv")
    metrics = property(lambda self: self.root / "metrics.csv")
    summary = property(lambda self: self.root / "summary.json")
    latents = property(lambda self: self.root / "latents.csv")
    sensitivity = property(lambda self: self.root / "sensitivity.csv")
    predict = property(lambda self: self.root / "predict")
    ablate = property(lambda self: self.root / "ablate")


def override(cfg: ExperimentConfig, changes: dict) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-path ``changes`` applied and revalidated."""
    d = to_dict(cfg)
    for path, value in changes.items():
        node = d
        *parents, leaf = path.split(".")
        for p in parents:
            node = node.get(p) if isinstance(node, dict) else None
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config path {path}")
        node[leaf] = value
    return from_dict(d)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}; run the earlier stage first")
    return path


# ---------------------------------------------------------------------------
# data


def gen_data(cfg: ExperimentConfig, paths: RunPaths) -> Cohort:
    cohort = cohort_from_config(cfg.cohort)
    cohort.meta["config_hash"] = config_hash(cfg)
    save_cohort(cohort, paths.cohort)
    train, val, test = split_ids([p.id for p in cohort.patients], cfg.split_fractions, cfg.split_seed)
    write_json(paths.split, {
        "config_hash": config_hash(cfg),
        "fractions": {"train": cfg.split_fractions[0], "val": cfg.split_fractions[1], "test": cfg.split_fractions[2]},
        "seed": cfg.split_seed,
        "train": train, "val": val, "test": test,
    })
    log.info("cohort: %d patients, %d scans -> %s", len(cohort), cohort.n_scans, paths.cohort)
    return cohort


def load_data(paths: RunPaths) -> tuple[Cohort, dict[str, list[int]]]:
    cohort = load_cohort(_require(paths.cohort, "cohort"))
    split = json.loads(_require(paths.split, "split.json").read_text(encoding="utf-8"))
    return cohort, {k: split[k] for k in ("train", "val", "test")}


# ---------------------------------------------------------------------------
# training


def _history_rows(stage: str, history: list[dict]) -> list[dict]:
    return [{"stage": stage, **row} for row in history]


def _every(n):
    def report(row):
        if row["epoch"] % n == 0 or row["epoch"] == 1:
            log.info("  %s", " ".join(f"{k}={v:.5g}" for k, v in row.items()))

    return report


def train_ae(cfg: ExperimentConfig, paths: RunPaths) -> ModelBundle:
    cohort, split = load_data(paths)
    train = cohort.subset(split["train"])
    log.info("training autoencoder on %d patients (%d scans)", len(train), train.n_scans)
    params, history = train_autoencoder(train, cfg.ae, progress=_every(10))
    bundle = ModelBundle(
        config=cfg, ae_params=params,
        provenance={"seed": cfg.ae.seed, "ae_epochs": cfg.ae.epochs, "stage": "ae"},
    )
    save_bundle(bundle, paths.ae_ckpt)
    rows = _history_rows("ae", history)
    write_csv(paths.history, HISTORY_COLUMNS, rows, bundle.config_hash)
    return bundle


def _train_latents(params, cohort: Cohort):
    enc = encode_cohort(params, cohort)
    return {p.id: (np.array(p.ages, dtype=np.float64), enc[p.id]) for p in cohort.patients}


def train_flow_stage(cfg: ExperimentConfig, paths: RunPaths) -> ModelBundle:
    ae = load_bundle(_require(paths.ae_ckpt, "autoencoder checkpoint"))
    if canonical_json(ae_sections(ae.config)) != canonical_json(ae_sections(cfg)):
        raise ConfigError("autoencoder checkpoint was trained with a different cohort/split/ae config")
    cohort, split = load_data(paths)
    train = cohort.subset(split["train"])
    latents = _train_latents(ae.ae_params, train)
    records = {p.id: p for p in train.patients}
    log.info("training velocity net (%s) on %d patients", cfg.flow.sampling_mode, len(train))
    params, history = train_flow(latents, records, cfg.flow, cfg.flow_train, progress=_every(10))
    bundle = ModelBundle(
        config=cfg, ae_params=ae.ae_params, flow_params=params,
        provenance={
            "seed": cfg.flow_train.seed, "ae_seed": cfg.ae.seed,
            "ae_epochs": cfg.ae.epochs, "flow_epochs": cfg.flow_train.epochs, "stage": "flow",
        },
    )
    save_bundle(bundle, paths.model)
    rows = []
    if paths.history.exists():
        _, old = read_csv(paths.history)
        rows = [r for r in old if r["stage"] == "ae"]
    rows += _history_rows("flow", history)
    write_csv(paths.history, HISTORY_COLUMNS, rows, bundle.config_hash)
    return bundle


# ---------------------------------------------------------------------------
# evaluation


def evaluation_pairs(cohort: Cohort, ids) -> list[tuple[int, int, int]]:
    """(patient id, source visit, target visit) for every observed ordered pair."""
    out = []
    for pid in sorted(ids):
        n = len(cohort.by_id(pid).visits)
        out.extend((pid, i, j) for i in range(n) for j in range(i + 1, n))
    return out


def evaluate_bundle(bundle: ModelBundle, cohort: Cohort, ids, copy_baseline: bool = False) -> list[MetricReport]:
    reports = []
    pairs = evaluation_pairs(cohort, ids)
    if not pairs:
        raise ValueError("no evaluable (source, target) pairs in this split")
    for pid, i, j in pairs:
        rec = cohort.by_id(pid)
        src, tgt = rec.visits[i], rec.visits[j]
        if copy_baseline:
            pred = np.asarray(src.image, dtype=np.float64)
        else:
            pred, _ = predict_followup(bundle, src, rec, tgt.age)
        reports.append(evaluate_prediction(pid, src.age, tgt.age, src.image, tgt.image, pred, tgt.masks))
    return reports


def horizon_trend(reports: list[MetricReport]) -> float:
    """Spearman correlation between horizon year and that bucket's mean Δ-RMAE."""
    strata = stratify_by_horizon(reports)
    if len(strata) < 2:
        return float("nan")
    years = sorted(strata)
    means = [strata[y]["delta_rmae"]["mean"] for y in years]
    if max(means) == min(means):
        return float("nan")
    return float(spearmanr(years, means)[0])


def _finite_or_none(x: float):
    return x if math.isfinite(x) else None


def summary_doc(reports: list[MetricReport], bundle_hash: str, split: str, copy_baseline: bool) -> dict:
    return {
        "config_hash": bundle_hash,
        "split": split,
        "copy_baseline": copy_baseline,
        "n_pairs": len(reports),
        "overall": summarize(reports),
        "by_horizon": {str(y): v for y, v in stratify_by_horizon(reports).items()},
        "horizon_rank_correlation": _finite_or_none(horizon_trend(reports)),
    }


def evaluate(cfg: ExperimentConfig, paths: RunPaths, split: str = "test", copy_baseline: bool = False) -> dict:
    bundle = load_bundle(_require(paths.model, "model checkpoint"))
    cohort, splits = load_data(paths)
    if split not in splits:
        raise ConfigError(f"unknown split {split!r}")
    reports = evaluate_bundle(bundle, cohort, splits[split], copy_baseline)
    metrics_path, summary_path = paths.metrics, paths.summary
    if copy_baseline:  # keep the model's own evaluation intact
        metrics_path = metrics_path.with_name("metrics_copy_baseline.csv")
        summary_path = summary_path.with_name("summary_copy_baseline.json")
    write_csv(metrics_path, METRIC_COLUMNS, [r.as_row() for r in reports], bundle.config_hash)
    doc = summary_doc(reports, bundle.config_hash, split, copy_baseline)
    write_json(summary_path, doc)
    m = doc["overall"]["delta_rmae"]
    log.info("%s: %d pairs, delta-RMAE %.4f +- %.4f", split, len(reports), m["mean"], m["std"])
    return doc


# ---------------------------------------------------------------------------
# exports


def _age_tag(age: float) -> str:
    return f"{age:07.3f}".replace(".", "p")


def predict(
    cfg: ExperimentConfig, paths: RunPaths, patient_id: int, visit: int = 0,
    target_ages: list[float] | None = None,
) -> list[Path]:
    """Write predicted scans, progression maps and (when observed) residual maps.

    Without ``target_ages`` a trajectory over the configured horizon is exported.
    """
    bundle = load_bundle(_require(paths.model, "model checkpoint"))
    cohort, _ = load_data(paths)
    try:
        rec = cohort.by_id(patient_id)
    except KeyError as e:
        raise ConfigError(f"no patient {patient_id}") from e
    if not 0 <= visit < len(rec.visits):
        raise ConfigError(f"patient {patient_id} has no visit {visit}")
    src = rec.visits[visit]
    tag = f"config_hash={bundle.config_hash}"
    out = paths.predict / f"p{patient_id:03d}_v{visit}"
    written = [write_pgm(out / "source.pgm", src.image, tag)]
    if target_ages:
        for a in target_ages:
            if not a > src.age:
                raise ConfigError(f"target age {a} is not after source age {src.age}")
        ages = [float(a) for a in target_ages]
        images = [predict_followup(bundle, src, rec, a)[0] for a in ages]
    else:
        traj = predict_trajectory(bundle, src, rec, cfg.predict.horizon_years, cfg.predict.interval_years)
        ages, images = traj.query_ages, traj.images
    rows = []
    for a, img in zip(ages, images):
        t = _age_tag(a)
        written.append(write_pgm(out / f"pred_{t}.pgm", img, tag))
        progression = np.abs(img - src.image)
        written.append(write_pgm(out / f"progression_{t}.pgm", percentile_normalize(progression), tag))
        truth = [v for v in rec.visits if abs(v.age - a) < 1e-6]
        if truth:
            written.append(
                write_pgm(out / f"residual_{t}.pgm", percentile_normalize(np.abs(img - truth[0].image)), tag)
            )
        vm = src.masks.ventricle
        rows.append({
            "target_age": a, "horizon": a - src.age,
            "ventricle_mean_change": float((img - src.image)[vm].mean()) if vm.any() else float("nan"),
            "observed": bool(truth),
        })
    written.append(
        write_csv(out / "predictions.csv", ("target_age", "horizon", "ventricle_mean_change", "observed"), rows, bundle.config_hash)
    )
    return written


def latent_rows(bundle: ModelBundle, cohort: Cohort, splits: dict[str, list[int]]) -> tuple[list[str], list[dict]]:
    which = {pid: name for name, ids in splits.items() for pid in ids}
    r, c = bundle.config.ae.latent_shape
    u_cols = [f"u_{i}_{j}" for i in range(r) for j in range(min(r, c))]
    meta, Z = [], []
    for p in cohort.patients:
        z, _, _ = encode_batch(bundle.ae_params, np.stack([v.image for v in p.visits]))
        for v, zk in zip(p.visits, z):
            meta.append((p, v))
            Z.append(zk)
    Z = np.stack(Z)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", gc.DegenerateSpectrumWarning)
        f = gc.svd_thin(Z)
    proj = pca_2d(Z.reshape(len(Z), -1))
    rows = []
    for k, (p, v) in enumerate(meta):
        row = {
            "patient_id": p.id, "age": v.age, "status": p.status, "split": which.get(p.id, ""),
            "nuclear_norm": float(f.S[k].sum()),
        }
        row.update(zip(u_cols, f.U[k].reshape(-1).tolist()))
        row["pca_1"], row["pca_2"] = float(proj[k, 0]), float(proj[k, 1])
        rows.append(row)
    cols = ["patient_id", "age", "status", "split", "nuclear_norm", *u_cols, "pca_1", "pca_2"]
    return cols, rows


def export_latents(cfg: ExperimentConfig, paths: RunPaths) -> Path:
    ckpt = paths.model if paths.model.exists() else _require(paths.ae_ckpt, "checkpoint")
    bundle = load_bundle(ckpt)
    cohort, splits = load_data(paths)
    cols, rows = latent_rows(bundle, cohort, splits)
    return write_csv(paths.latents, cols, rows, bundle.config_hash)


def sensitivity(cfg: ExperimentConfig, paths: RunPaths) -> Path:
    s = cfg.sensitivity
    if not s.sigma_grid:
        raise ConfigError("sensitivity sigma grid is empty")
    rows = sensitivity_table(s.sigma_grid, s.n_pixels, s.n_trials, s.scenario, s.seed)
    return write_csv(paths.sensitivity, SENSITIVITY_COLUMNS, rows, config_hash(cfg))


# ---------------------------------------------------------------------------
# ablation


def ablate(cfg: ExperimentConfig, paths: RunPaths, variants=None) -> list[dict]:
    """Train and evaluate each variant in ablate/<name>, sharing the parent cohort.

    Variants whose autoencoder settings coincide reuse one trained autoencoder.
    """
    if not paths.cohort.exists():
        gen_data(cfg, paths)
    variants = list(ABLATIONS) if variants is None else list(variants)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; choose from {sorted(ABLATIONS)}")
    trained_ae: dict[str, Path] = {}
    rows = []
    cohort, splits = load_data(paths)
    for name in variants:
        vcfg = override(cfg, ABLATIONS[name])
        sub = RunPaths(paths.ablate / name, cohort_root=paths.root)
        key = canonical_json(ae_sections(vcfg))
        log.info("ablation %s", name)
        if key in trained_ae:
            sub.root.mkdir(parents=True, exist_ok=True)
            src = trained_ae[key]
            sub.ae_ckpt.write_bytes((src / "ae.ckpt").read_bytes())
            sub.history.write_bytes((src / "history.csv").read_bytes())
        else:
            train_ae(vcfg, sub)
            trained_ae[key] = sub.root
        train_flow_stage(vcfg, sub)
        doc = evaluate(vcfg, sub)
        lat = encode_cohort(load_bundle(sub.ae_ckpt).ae_params, cohort.subset(splits["train"]))
        o = doc["overall"]
        rows.append({
            "variant": name,
            "delta_rmae_mean": o["delta_rmae"]["mean"], "delta_rmae_std": o["delta_rmae"]["std"],
            "psnr_mean": o["psnr"]["mean"], "ssim_mean": o["ssim"]["mean"], "mae_mean": o["mae_mean"]["mean"],
            "arc_distance": within_patient_arc_distance(lat), "order_fraction": adjacent_order_fraction(lat),
        })
    write_csv(paths.root / "ablation.csv", ABLATION_COLUMNS, rows, config_hash(cfg))
    return rows
