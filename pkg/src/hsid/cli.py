"""Command-line experiment driver.

Commands mirror the pipeline stages::

    hsid synth    render a synthetic scene bundle with known ground truth
    hsid split    draw train/test pixel sets from a cube bundle
    hsid cluster  fit pseudo-environment centers on the training spectra
    hsid train    optimize a fresh network; writes checkpoints and a log
    hsid eval     score a checkpoint on the test set
    hsid map      paint a classification map as PNG
    hsid ablate   one-factor-at-a-time sweep from a grid file

``hsid --help-config`` prints a canonical configuration with every default
spelled out.  All commands validate their configuration fully before
touching the filesystem.

Exit codes: 0 success; 2 configuration problems (unreadable/invalid
config or grid); 3 data problems (missing or malformed bundles, splits,
samples, checkpoints, unsatisfiable requests); 4 training or evaluation
hit non-finite numbers.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .datacube import (
    DataError,
    HyperspectralCube,
    SampleSet,
    SplitSpec,
    load_bundle,
    load_samples,
    normalize_bands,
    read_split_spec,
    save_samples,
    split_samples,
)
from .losses import LossConfig
from .metrics_eval import (
    UNLABELED_POLICIES,
    evaluate,
    format_metrics_table,
    render_map,
    save_map_png,
    write_metrics,
)
from .network import DivergenceError, NetworkSpec, init_model, load_checkpoint
from .pseudo_env import (
    ClusterConfig,
    assign_pseudo_labels,
    fit_centers,
    load_pseudo,
    save_pseudo,
)
from .synth import ZONE_LAYOUTS, default_scene_spec, generate, write_scene
from .trainer import (
    TrainConfig,
    ablate,
    format_ablation_csv,
    train,
    write_train_report,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

TRAIN_SAMPLES_NAME = "train_samples.json"
TEST_SAMPLES_NAME = "test_samples.json"
PSEUDO_NAME = "pseudo.json"
METRICS_JSON_NAME = "metrics.json"
METRICS_TEXT_NAME = "metrics.txt"
MAP_NAME = "map.png"
ABLATION_NAME = "ablation.csv"
TRAIN_REPORT_NAME = "train_report.json"


class ConfigError(Exception):
    """The configuration (or grid) file cannot be used as given."""


CANONICAL_CONFIG = """\
# Canonical experiment configuration; every value below is the default.
data:
  bundle: scene/                  # cube bundle directory
  split:                          # inline split: seed + per-class counts
    seed: 0
    per_class:                    # class id: [train pixels, test pixels]
      1: [30, 100]
      2: [30, 100]
      3: [30, 100]
  # split_file: split.txt         # alternative: external split spec file
cluster:
  num_centers: 2                  # pseudo-environment count
  max_iter: 100
  tol: 1.0e-08
  restarts: 10                    # k-means++ starts, best objective wins
  seed: 0
network:
  backbone: compact3d             # compact3d | hybrid | plain2d
  feature_dim: 128
  projection_dims: [128, 64, 64]
  discriminator_dims: [128, 64, 2]
  patch_size: 5
loss:
  margin: 0.0                     # cosine margin for unlike pairs
  alpha: 1.0                      # environmental embedding weight
  beta: 1.0                       # categorical embedding weight
  gamma: 1.0                      # discrimination weight
train:
  learning_rate: 0.01
  epochs: 500
  batch_size: 64
  optimizer: sgd_momentum         # sgd | sgd_momentum
  momentum: 0.9
  seed: 0
  checkpoint_every: 0             # 0 = only initial and final checkpoints
output: runs/experiment
"""


@dataclass(frozen=True)
class NetworkSettings:
    """The architecture knobs a config file controls; class and band
    counts are taken from the cube at run time."""

    backbone: str = "compact3d"
    feature_dim: int = 128
    projection_dims: tuple[int, ...] = (128, 64, 64)
    discriminator_dims: tuple[int, ...] = (128, 64, 2)
    patch_size: int = 5

    def to_spec(self, num_classes: int, bands: int, init_seed: int) -> NetworkSpec:
        return NetworkSpec(
            num_classes=num_classes,
            bands=bands,
            patch_size=self.patch_size,
            backbone_kind=self.backbone,
            feature_dim=self.feature_dim,
            projection_dims=self.projection_dims,
            discriminator_dims=self.discriminator_dims,
            init_seed=init_seed,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    bundle: Path
    output: Path
    split: SplitSpec | None
    split_file: Path | None
    cluster: ClusterConfig
    network: NetworkSettings
    train: TrainConfig

    def resolve_split(self) -> SplitSpec:
        if self.split is not None:
            return self.split
        if self.split_file is not None:
            return read_split_spec(self.split_file)
        raise ConfigError("config needs either data.split or data.split_file")


def _require_mapping(raw, where: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(raw).__name__}")
    return raw


def _check_keys(section: dict, allowed: tuple[str, ...], where: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}; allowed: {sorted(allowed)}")


def _parse_split(raw: dict) -> SplitSpec:
    _check_keys(raw, ("seed", "per_class"), "data.split")
    if "per_class" not in raw:
        raise ConfigError("data.split needs per_class")
    per_raw = _require_mapping(raw["per_class"], "data.split.per_class")
    per_class = {}
    for cid, pair in per_raw.items():
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError(
                f"data.split.per_class[{cid}] must be [train, test], got {pair!r}"
            )
        per_class[int(cid)] = (int(pair[0]), int(pair[1]))
    return SplitSpec(per_class=per_class, seed=int(raw.get("seed", 0)))


def load_config(path: Path | str, *, out_override: str | None = None, seed_override: int | None = None) -> ExperimentConfig:
    """Parse and fully validate a config file; no filesystem side effects."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing config file {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"unreadable YAML in {path}: {exc}") from exc
    raw = _require_mapping(raw, str(path))
    _check_keys(raw, ("data", "cluster", "network", "loss", "train", "output"), str(path))

    data = _require_mapping(raw.get("data"), "data")
    _check_keys(data, ("bundle", "split", "split_file"), "data")
    if "bundle" not in data:
        raise ConfigError("config needs data.bundle")
    if "split" in data and "split_file" in data:
        raise ConfigError("give data.split or data.split_file, not both")

    try:
        split = _parse_split(_require_mapping(data["split"], "data.split")) if "split" in data else None
        split_file = Path(data["split_file"]) if "split_file" in data else None

        cl = _require_mapping(raw.get("cluster"), "cluster")
        _check_keys(cl, ("num_centers", "max_iter", "tol", "restarts", "seed"), "cluster")
        cluster = ClusterConfig(
            num_centers=int(cl.get("num_centers", 2)),
            max_iter=int(cl.get("max_iter", 100)),
            tol=float(cl.get("tol", 1e-8)),
            restarts=int(cl.get("restarts", 10)),
            seed=int(cl.get("seed", 0)),
        )

        net = _require_mapping(raw.get("network"), "network")
        _check_keys(
            net,
            ("backbone", "feature_dim", "projection_dims", "discriminator_dims", "patch_size"),
            "network",
        )
        network = NetworkSettings(
            backbone=str(net.get("backbone", "compact3d")),
            feature_dim=int(net.get("feature_dim", 128)),
            projection_dims=tuple(int(v) for v in net.get("projection_dims", (128, 64, 64))),
            discriminator_dims=tuple(int(v) for v in net.get("discriminator_dims", (128, 64, 2))),
            patch_size=int(net.get("patch_size", 5)),
        )
        # Shape-check the architecture now (class/band counts do not
        # affect these constraints), so bad configs fail before any work.
        network.to_spec(num_classes=2, bands=1, init_seed=0)

        lo = _require_mapping(raw.get("loss"), "loss")
        _check_keys(lo, ("margin", "alpha", "beta", "gamma"), "loss")
        loss = LossConfig(
            margin=float(lo.get("margin", 0.0)),
            alpha=float(lo.get("alpha", 1.0)),
            beta=float(lo.get("beta", 1.0)),
            gamma=float(lo.get("gamma", 1.0)),
        )

        tr = _require_mapping(raw.get("train"), "train")
        _check_keys(
            tr,
            ("learning_rate", "epochs", "batch_size", "optimizer", "momentum", "seed", "checkpoint_every"),
            "train",
        )
        train_cfg = TrainConfig(
            learning_rate=float(tr.get("learning_rate", 0.01)),
            epochs=int(tr.get("epochs", 500)),
            batch_size=int(tr.get("batch_size", 64)),
            optimizer=str(tr.get("optimizer", "sgd_momentum")),
            momentum=float(tr.get("momentum", 0.9)),
            seed=int(tr.get("seed", 0)),
            checkpoint_every=int(tr.get("checkpoint_every", 0)),
            loss=loss,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in {path}: {exc}") from exc

    output = Path(out_override) if out_override else Path(raw.get("output", "runs/experiment"))
    cfg = ExperimentConfig(
        bundle=Path(data["bundle"]),
        output=output,
        split=split,
        split_file=split_file,
        cluster=cluster,
        network=network,
        train=train_cfg,
    )
    if seed_override is not None:
        cfg = replace(
            cfg,
            split=None if cfg.split is None else replace(cfg.split, seed=seed_override),
            cluster=replace(cfg.cluster, seed=seed_override),
            train=replace(cfg.train, seed=seed_override),
        )
    return cfg


def _load_cube(cfg: ExperimentConfig) -> HyperspectralCube:
    return load_bundle(cfg.bundle)


def _load_sample_file(cfg: ExperimentConfig, name: str, stage: str) -> SampleSet:
    path = cfg.output / name
    if not path.is_file():
        raise DataError(f"missing {path}; run `hsid {stage}` first")
    return load_samples(path)


def _center_spectra(cube: HyperspectralCube, samples: SampleSet) -> np.ndarray:
    return cube.values[samples.indices[:, 0], samples.indices[:, 1]].astype(np.float64)


def _final_checkpoint_path(cfg: ExperimentConfig) -> Path:
    return cfg.output / f"ckpt_{cfg.train.epochs}.bin"


def _load_model(cfg: ExperimentConfig, override: str | None):
    path = Path(override) if override else _final_checkpoint_path(cfg)
    if not path.is_file():
        raise DataError(f"missing checkpoint {path}; run `hsid train` first")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands

def _cmd_synth(args) -> int:
    spec = default_scene_spec(
        rows=args.rows,
        cols=args.cols,
        bands=args.bands,
        num_classes=args.classes,
        num_zones=args.zones,
        zone_layout=args.zone_layout,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    cube, zones = generate(spec)
    write_scene(cube, zones, args.out)
    print(
        f"wrote {cube.rows}x{cube.cols}x{cube.bands} scene "
        f"({spec.num_classes} classes, {spec.num_zones} zones, "
        f"noise {spec.noise_sigma}) to {args.out}"
    )
    return EXIT_OK


def _cmd_split(args) -> int:
    cfg = load_config(args.config, out_override=args.out, seed_override=args.seed)
    spec = cfg.resolve_split()
    cube = _load_cube(cfg)
    train_set, test_set = split_samples(
        cube, spec, patch_size=cfg.network.patch_size, cube_ref=str(cfg.bundle)
    )
    cfg.output.mkdir(parents=True, exist_ok=True)
    save_samples(train_set, cfg.output / TRAIN_SAMPLES_NAME)
    save_samples(test_set, cfg.output / TEST_SAMPLES_NAME)
    print(
        f"split seed {spec.seed}: {len(train_set)} train / {len(test_set)} test pixels "
        f"over {len(spec.per_class)} classes -> {cfg.output}"
    )
    return EXIT_OK


def _cmd_cluster(args) -> int:
    cfg = load_config(args.config, out_override=args.out, seed_override=args.seed)
    cube = normalize_bands(_load_cube(cfg))
    train_set = _load_sample_file(cfg, TRAIN_SAMPLES_NAME, "split")
    spectra = _center_spectra(cube, train_set)
    model = fit_centers(
        spectra,
        cfg.cluster.num_centers,
        max_iter=cfg.cluster.max_iter,
        tol=cfg.cluster.tol,
        restarts=cfg.cluster.restarts,
        seed=cfg.cluster.seed,
    )
    labels = assign_pseudo_labels(spectra, model)
    cfg.output.mkdir(parents=True, exist_ok=True)
    save_pseudo(model, labels, cfg.cluster.seed, cfg.output / PSEUDO_NAME)
    print(
        f"clustered {len(spectra)} spectra into {model.num_centers} groups "
        f"in {model.iterations_run} iterations, objective {model.objective:.6g} "
        f"-> {cfg.output / PSEUDO_NAME}"
    )
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config, out_override=args.out, seed_override=args.seed)
    cube = normalize_bands(_load_cube(cfg))
    train_set = _load_sample_file(cfg, TRAIN_SAMPLES_NAME, "split")
    pseudo_path = cfg.output / PSEUDO_NAME
    if not pseudo_path.is_file():
        raise DataError(f"missing {pseudo_path}; run `hsid cluster` first")
    try:
        _, pseudo_labels, _ = load_pseudo(pseudo_path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if len(pseudo_labels) != len(train_set):
        raise DataError(
            f"{pseudo_path} holds {len(pseudo_labels)} labels for {len(train_set)} "
            "training pixels; rerun `hsid cluster`"
        )
    spec = cfg.network.to_spec(cube.num_classes, cube.bands, init_seed=cfg.train.seed)
    model = init_model(spec)
    report = train(model, cube, train_set, pseudo_labels, cfg.train, out_dir=cfg.output)
    write_train_report(report, cfg.output / TRAIN_REPORT_NAME)
    if report.diverged:
        epoch, step = report.diverged_at
        print(
            f"training diverged at epoch {epoch}, step {step}: {report.divergence_message}",
            file=sys.stderr,
        )
        return EXIT_DIVERGED
    last = report.epoch_losses[-1]
    print(
        f"trained {report.epochs_run} epochs ({report.steps_run} steps) "
        f"in {report.wall_seconds:.1f}s; final epoch loss {last.total:.6g} "
        f"-> {report.final_checkpoint}"
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = load_config(args.config, out_override=args.out, seed_override=args.seed)
    cube = normalize_bands(_load_cube(cfg))
    test_set = _load_sample_file(cfg, TEST_SAMPLES_NAME, "split")
    model = _load_model(cfg, args.checkpoint)
    cm, report = evaluate(model, cube, test_set)
    cfg.output.mkdir(parents=True, exist_ok=True)
    write_metrics(cm, report, cfg.output / METRICS_JSON_NAME, cfg.output / METRICS_TEXT_NAME)
    print(format_metrics_table(cm, report), end="")
    return EXIT_OK


def _cmd_map(args) -> int:
    cfg = load_config(args.config, out_override=args.out, seed_override=args.seed)
    cube = normalize_bands(_load_cube(cfg))
    model = _load_model(cfg, args.checkpoint)
    rgb = render_map(model, cube, unlabeled_policy=args.policy)
    cfg.output.mkdir(parents=True, exist_ok=True)
    save_map_png(rgb, cfg.output / MAP_NAME)
    print(f"wrote {cube.rows}x{cube.cols} map ({args.policy}) to {cfg.output / MAP_NAME}")
    return EXIT_OK


def _parse_grid(path: Path | str) -> tuple[dict[str, list], bool]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing grid file {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"unreadable YAML in {path}: {exc}") from exc
    raw = _require_mapping(raw, str(path))
    include_baseline = bool(raw.pop("baseline", True))
    grid: dict[str, list] = {}
    for key, values in raw.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid entry {key!r} must map to a non-empty list")
        grid[str(key)] = values
    if not grid and not include_baseline:
        raise ConfigError(f"grid {path} selects nothing to run")
    return grid, include_baseline


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config, out_override=args.out, seed_override=args.seed)
    grid, include_baseline = _parse_grid(args.grid)
    cube = _load_cube(cfg)
    split = cfg.resolve_split()
    train_set, test_set = split_samples(
        cube, split, patch_size=cfg.network.patch_size, cube_ref=str(cfg.bundle)
    )
    spec = cfg.network.to_spec(cube.num_classes, cube.bands, init_seed=cfg.train.seed)
    try:
        rows = ablate(
            cube,
            train_set,
            test_set,
            cfg.cluster,
            spec,
            cfg.train,
            grid,
            include_baseline=include_baseline,
            sample_seed=split.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    table = format_ablation_csv(rows)
    cfg.output.mkdir(parents=True, exist_ok=True)
    (cfg.output / ABLATION_NAME).write_text(table)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsid",
        description="Hyperspectral intrinsic-decomposition classification experiments.",
    )
    parser.add_argument(
        "--help-config",
        action="store_true",
        help="print the canonical configuration with all defaults and exit",
    )
    sub = parser.add_subparsers(dest="command")

    def _common(p: argparse.ArgumentParser):
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--seed", type=int, default=None, help="override split/cluster/train seeds")

    p = sub.add_parser("synth", help="render a synthetic scene bundle")
    p.add_argument("--out", required=True, help="bundle directory to create")
    p.add_argument("--rows", type=int, default=48)
    p.add_argument("--cols", type=int, default=48)
    p.add_argument("--bands", type=int, default=20)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--zones", type=int, default=2)
    p.add_argument("--zone-layout", choices=ZONE_LAYOUTS, default="vertical_bands")
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_synth)

    for name, handler, doc in (
        ("split", _cmd_split, "draw train/test pixel sets"),
        ("cluster", _cmd_cluster, "fit pseudo-environment centers"),
        ("train", _cmd_train, "train a fresh network"),
    ):
        p = sub.add_parser(name, help=doc)
        _common(p)
        p.set_defaults(handler=handler)

    p = sub.add_parser("eval", help="score a checkpoint on the test set")
    _common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: final)")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("map", help="paint a classification map")
    _common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: final)")
    p.add_argument("--policy", choices=UNLABELED_POLICIES, default="color_all")
    p.set_defaults(handler=_cmd_map)

    p = sub.add_parser("ablate", help="one-factor-at-a-time sweep")
    _common(p)
    p.add_argument("--grid", required=True, help="grid file (YAML): parameter -> value list")
    p.set_defaults(handler=_cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.help_config:
        print(CANONICAL_CONFIG, end="")
        return EXIT_OK
    if getattr(args, "handler", None) is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
