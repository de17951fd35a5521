"""Mini-batch gradient training, the end-to-end pipeline, and ablations.

Training runs SGD with momentum (default) or plain SGD over per-epoch
reshuffled batches.  Batch composition for an epoch is a pure function of
(seed, epoch), so a run is reproducible bit for bit from its seeds alone.
The momentum update is ``v <- momentum * v + g`` then ``p <- p - lr * v``;
plain SGD is ``p <- p - lr * g``.  A zero learning rate is explicitly
allowed and leaves parameters untouched, which makes no-op expectations
checkable.

On a non-finite loss, activation, or gradient the run aborts *before*
applying the offending update: parameters keep their last good values, a
diagnostic is written next to the checkpoints, and the report records
where training stopped.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._util import atomic_write_text, canonical_json, seeded_rng
from .datacube import (
    HyperspectralCube,
    SampleSet,
    extract_patches,
    normalize_bands,
    subsample_training,
)
from .losses import LOG_HEADER, LossBreakdown, LossConfig, format_log_line
from .metrics_eval import ConfusionMatrix, MetricsReport, evaluate
from .network import (
    DivergenceError,
    ModelState,
    NetworkSpec,
    init_model,
    loss_and_gradient,
    save_checkpoint,
)
from .pseudo_env import ClusterConfig, PseudoModel, assign_pseudo_labels, fit_centers

_BATCH_STREAM = 401

OPTIMIZERS = ("sgd", "sgd_momentum")

ABLATION_PARAMETERS = ("alpha", "beta", "gamma", "lambda", "patch_size", "sample_rate")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.  ``loss`` nests the component weights."""

    learning_rate: float = 0.01
    epochs: int = 500
    batch_size: int = 64
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    seed: int = 0
    checkpoint_every: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0.0):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not (np.isfinite(self.momentum) and 0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


@dataclass
class TrainReport:
    """What a training run did: per-epoch loss sums and where (if
    anywhere) it stopped early."""

    epochs_run: int
    steps_run: int
    epoch_losses: list[LossBreakdown]
    wall_seconds: float
    seed: int
    diverged_at: tuple[int, int] | None = None
    divergence_message: str = ""
    final_checkpoint: Path | None = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


def make_batches(num_samples: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Partition a fresh permutation of ``range(num_samples)`` into
    consecutive batches (the last may be short).

    The permutation is keyed on (seed, epoch): every epoch reshuffles, and
    the same pair always gives the same batches.
    """
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = seeded_rng(seed, _BATCH_STREAM, epoch).permutation(num_samples)
    return [perm[i:i + batch_size] for i in range(0, num_samples, batch_size)]


def _sum_breakdowns(parts: list[LossBreakdown]) -> LossBreakdown:
    return LossBreakdown(
        classification=sum(p.classification for p in parts),
        environmental=sum(p.environmental for p in parts),
        categorical=sum(p.categorical for p in parts),
        discrimination=sum(p.discrimination for p in parts),
        total=sum(p.total for p in parts),
    )


def train(
    model: ModelState,
    cube: HyperspectralCube,
    samples: SampleSet,
    pseudo_labels: np.ndarray,
    cfg: TrainConfig,
    *,
    out_dir: Path | str | None = None,
) -> TrainReport:
    """Optimize ``model`` in place on a labeled, pseudo-labeled sample set.

    ``pseudo_labels`` must align one-to-one with ``samples``.  When
    ``out_dir`` is given the run writes ``ckpt_0.bin`` before the first
    step, ``ckpt_<epoch>.bin`` every ``checkpoint_every`` epochs and at
    the end, plus a ``train_log.csv`` with one line per step.
    """
    model.validate()
    pseudo = np.asarray(pseudo_labels, dtype=np.int64).reshape(-1)
    if len(pseudo) != len(samples):
        raise ValueError(f"{len(samples)} samples but {len(pseudo)} pseudo-labels")
    if len(samples) == 0:
        raise ValueError("cannot train on an empty sample set")
    if model.spec.patch_size != samples.patch_size:
        raise ValueError(
            f"model patch {model.spec.patch_size} != sample patch {samples.patch_size}"
        )
    if model.spec.bands != cube.bands:
        raise ValueError(f"model expects {model.spec.bands} bands, cube has {cube.bands}")
    if samples.labels.max() > model.spec.num_classes:
        raise ValueError(
            f"sample label {samples.labels.max()} exceeds {model.spec.num_classes} classes"
        )

    out_path = Path(out_dir) if out_dir is not None else None
    log_handle = None
    written_epochs: set[int] = set()
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_path / "ckpt_0.bin", train_seed=cfg.seed)
        written_epochs.add(0)
        log_handle = open(out_path / "train_log.csv", "w", encoding="utf-8")
        log_handle.write(LOG_HEADER + "\n")

    patches = extract_patches(cube, samples.indices, samples.patch_size).astype(np.float64)
    labels = samples.labels
    velocity = (
        {name: np.zeros_like(arr) for name, arr in model.params.items()}
        if cfg.optimizer == "sgd_momentum"
        else None
    )

    report = TrainReport(
        epochs_run=0, steps_run=0, epoch_losses=[], wall_seconds=0.0, seed=cfg.seed
    )
    started = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            step_parts: list[LossBreakdown] = []
            for step, sel in enumerate(make_batches(len(samples), cfg.batch_size, cfg.seed, epoch), start=1):
                try:
                    breakdown, grads = loss_and_gradient(
                        model, patches[sel], pseudo[sel], labels[sel], cfg.loss
                    )
                except DivergenceError as exc:
                    report.diverged_at = (epoch, step)
                    report.divergence_message = str(exc)
                    if out_path is not None:
                        atomic_write_text(
                            out_path / "divergence.txt",
                            f"aborted at epoch {epoch}, step {step}: {exc}\n"
                            "parameters keep their last finite values; the most recent\n"
                            "checkpoint on disk is still valid.\n",
                        )
                    return report
                if log_handle is not None:
                    log_handle.write(format_log_line(epoch, step, breakdown) + "\n")
                if velocity is not None:
                    for name, g in grads.items():
                        v = velocity[name]
                        v *= cfg.momentum
                        v += g
                        model.params[name] -= cfg.learning_rate * v
                else:
                    for name, g in grads.items():
                        model.params[name] -= cfg.learning_rate * g
                report.steps_run += 1
                step_parts.append(breakdown)
            report.epoch_losses.append(_sum_breakdowns(step_parts))
            report.epochs_run = epoch
            if (
                out_path is not None
                and cfg.checkpoint_every > 0
                and epoch % cfg.checkpoint_every == 0
            ):
                save_checkpoint(model, out_path / f"ckpt_{epoch}.bin", train_seed=cfg.seed)
                written_epochs.add(epoch)
        if out_path is not None and cfg.epochs not in written_epochs:
            save_checkpoint(model, out_path / f"ckpt_{cfg.epochs}.bin", train_seed=cfg.seed)
        if out_path is not None:
            report.final_checkpoint = out_path / f"ckpt_{cfg.epochs}.bin"
        return report
    finally:
        report.wall_seconds = time.perf_counter() - started
        if log_handle is not None:
            log_handle.close()


def write_train_report(report: TrainReport, path: Path | str) -> None:
    """Persist the run summary (not byte-stable: includes wall time)."""
    payload = {
        "epochs_run": report.epochs_run,
        "steps_run": report.steps_run,
        "wall_seconds": report.wall_seconds,
        "seed": report.seed,
        "diverged_at": list(report.diverged_at) if report.diverged_at else None,
        "divergence_message": report.divergence_message,
        "final_checkpoint": str(report.final_checkpoint) if report.final_checkpoint else None,
        "epoch_totals": [bd.total for bd in report.epoch_losses],
        "final_epoch": (
            {
                "classification": report.epoch_losses[-1].classification,
                "environmental": report.epoch_losses[-1].environmental,
                "categorical": report.epoch_losses[-1].categorical,
                "discrimination": report.epoch_losses[-1].discrimination,
                "total": report.epoch_losses[-1].total,
            }
            if report.epoch_losses
            else None
        ),
    }
    atomic_write_text(path, canonical_json(payload))


@dataclass
class PipelineResult:
    """Everything one cluster + train + evaluate pass produced."""

    model: ModelState
    pseudo_model: PseudoModel
    pseudo_labels: np.ndarray
    train_report: TrainReport
    confusion: ConfusionMatrix
    metrics: MetricsReport


def run_pipeline(
    cube: HyperspectralCube,
    train_set: SampleSet,
    test_set: SampleSet,
    cluster_cfg: ClusterConfig,
    net_spec: NetworkSpec,
    train_cfg: TrainConfig,
    *,
    sample_rate: float = 1.0,
    sample_seed: int = 0,
    out_dir: Path | str | None = None,
) -> PipelineResult:
    """Normalize, pseudo-label, train a fresh model, and evaluate.

    The cube is band-normalized once and used for clustering, training,
    and evaluation alike.  Clustering runs on the center-pixel spectra of
    the (possibly subsampled) training set; pseudo-labels come from the
    fitted centers.  Divergence during training is recorded in the report
    and evaluation still runs on the last finite parameters.
    """
    norm = normalize_bands(cube)
    used = subsample_training(train_set, sample_rate, sample_seed)
    spectra = norm.values[used.indices[:, 0], used.indices[:, 1]].astype(np.float64)
    pseudo_model = fit_centers(
        spectra,
        cluster_cfg.num_centers,
        max_iter=cluster_cfg.max_iter,
        tol=cluster_cfg.tol,
        restarts=cluster_cfg.restarts,
        seed=cluster_cfg.seed,
    )
    pseudo_labels = assign_pseudo_labels(spectra, pseudo_model)
    model = init_model(net_spec)
    report = train(model, norm, used, pseudo_labels, train_cfg, out_dir=out_dir)
    confusion, metrics = evaluate(model, norm, test_set)
    return PipelineResult(
        model=model,
        pseudo_model=pseudo_model,
        pseudo_labels=pseudo_labels,
        train_report=report,
        confusion=confusion,
        metrics=metrics,
    )


@dataclass(frozen=True)
class AblationRow:
    """One grid point: which single setting deviated, and how it scored."""

    label: str
    parameter: str | None
    value: float | None
    num_centers: int
    oa: float
    aa: float
    kappa: float
    diverged: bool


def ablate(
    cube: HyperspectralCube,
    train_set: SampleSet,
    test_set: SampleSet,
    cluster_cfg: ClusterConfig,
    net_spec: NetworkSpec,
    train_cfg: TrainConfig,
    grid: dict[str, list],
    *,
    include_baseline: bool = True,
    sample_rate: float = 1.0,
    sample_seed: int = 0,
) -> list[AblationRow]:
    """One-factor-at-a-time sweep plus an explicit unmodified baseline.

    ``grid`` maps parameter names (any of ``alpha``, ``beta``, ``gamma``,
    ``lambda``, ``patch_size``, ``sample_rate``) to value lists.  Each
    listed value yields one full cluster + train + evaluate run with only
    that parameter changed from the base configuration; the baseline row
    (all settings unmodified) is appended last.  Seeds are held fixed
    across rows, so rows differ only through the deviated parameter.
    """
    for key in grid:
        if key not in ABLATION_PARAMETERS:
            raise ValueError(
                f"unknown ablation parameter {key!r}; choose from {ABLATION_PARAMETERS}"
            )

    def _one(label, parameter, value, c_cfg, n_spec, t_cfg, tr_set, te_set, rate):
        try:
            result = run_pipeline(
                cube, tr_set, te_set, c_cfg, n_spec, t_cfg,
                sample_rate=rate, sample_seed=sample_seed,
            )
        except DivergenceError:
            return AblationRow(
                label=label, parameter=parameter, value=value,
                num_centers=c_cfg.num_centers,
                oa=float("nan"), aa=float("nan"), kappa=float("nan"), diverged=True,
            )
        return AblationRow(
            label=label,
            parameter=parameter,
            value=value,
            num_centers=c_cfg.num_centers,
            oa=result.metrics.oa,
            aa=result.metrics.aa,
            kappa=result.metrics.kappa,
            diverged=result.train_report.diverged,
        )

    rows: list[AblationRow] = []
    for key, values in grid.items():
        for raw in values:
            c_cfg, n_spec, t_cfg = cluster_cfg, net_spec, train_cfg
            tr_set, te_set, rate = train_set, test_set, sample_rate
            if key == "alpha":
                t_cfg = replace(t_cfg, loss=replace(t_cfg.loss, alpha=float(raw)))
            elif key == "beta":
                t_cfg = replace(t_cfg, loss=replace(t_cfg.loss, beta=float(raw)))
            elif key == "gamma":
                t_cfg = replace(t_cfg, loss=replace(t_cfg.loss, gamma=float(raw)))
            elif key == "lambda":
                c_cfg = replace(c_cfg, num_centers=int(raw))
            elif key == "patch_size":
                n_spec = replace(n_spec, patch_size=int(raw))
                tr_set = replace(tr_set, patch_size=int(raw))
                te_set = replace(te_set, patch_size=int(raw))
            else:
                rate = float(raw)
            shown = int(raw) if key in ("lambda", "patch_size") else float(raw)
            rows.append(
                _one(f"{key}={shown}", key, float(raw), c_cfg, n_spec, t_cfg, tr_set, te_set, rate)
            )
    if include_baseline:
        rows.append(
            _one("baseline", None, None, cluster_cfg, net_spec, train_cfg,
                 train_set, test_set, sample_rate)
        )
    return rows


def format_ablation_csv(rows: list[AblationRow]) -> str:
    lines = ["label,parameter,value,lambda,oa,aa,kappa,diverged"]
    for row in rows:
        lines.append(
            f"{row.label},{row.parameter or ''},"
            f"{'' if row.value is None else row.value!r},"
            f"{row.num_centers},{row.oa!r},{row.aa!r},{row.kappa!r},{int(row.diverged)}"
        )
    return "\n".join(lines) + "\n"
