"""Acceptance checks for the whole package, one test per criterion.

Each test prints exactly one ``[criterion N] PASS/FAIL`` line with the
measured numbers and the tolerance it was held to, then asserts.  The
end-to-end criteria (4, 5) share one session-scoped set of trained runs
on the 48x48x20 scene so the suite stays inside its time budget.
"""

import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from hsid.cli import CANONICAL_CONFIG, main
from hsid.datacube import SplitSpec, normalize_bands, split_samples
from hsid.losses import (
    LossConfig,
    classification_loss,
    cosine_pair_loss,
    discrimination_loss,
    embedding_loss,
    total_loss,
)
from hsid.metrics_eval import ConfusionMatrix, evaluate, metrics_from_confusion
from hsid.network import NetworkSpec, forward, init_model, loss_and_gradient
from hsid.pseudo_env import ClusterConfig, assign_pseudo_labels, fit_centers
from hsid.synth import default_scene_spec, generate, shading_only, zone_map
from hsid.trainer import TrainConfig, ablate, run_pipeline
from tests.conftest import tiny_batch, tiny_spec


def announce(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {detail}")


def canonical_network(num_classes, bands, init_seed):
    return NetworkSpec(
        num_classes=num_classes, bands=bands, patch_size=5,
        feature_dim=128, projection_dims=(128, 64, 64),
        discriminator_dims=(128, 64, 2), init_seed=init_seed,
    )


@pytest.fixture(scope="session")
def scene48():
    """The end-to-end scene: 48x48x20, K=3, two shading zones."""
    spec = default_scene_spec(rows=48, cols=48, bands=20, num_classes=3,
                              num_zones=2, noise_sigma=0.01, seed=0)
    cube, zones = generate(spec)
    return spec, cube, zones


@pytest.fixture(scope="session")
def trained_three_seeds(scene48):
    """Full-default pipeline (epochs=100) at seeds 0, 1, 2."""
    _, cube, _ = scene48
    results = []
    started = time.perf_counter()
    for seed in (0, 1, 2):
        split = SplitSpec(per_class={1: (30, 200), 2: (30, 200), 3: (30, 200)},
                          seed=seed)
        train_set, test_set = split_samples(cube, split, patch_size=5)
        result = run_pipeline(
            cube, train_set, test_set,
            ClusterConfig(num_centers=2, seed=seed),
            canonical_network(3, cube.bands, init_seed=seed),
            TrainConfig(learning_rate=0.01, epochs=100, batch_size=64,
                        optimizer="sgd_momentum", momentum=0.9, seed=seed),
        )
        results.append(result)
    return results, time.perf_counter() - started


# -- criterion 1: loss oracles -------------------------------------------------

def naive_pair(u, v, same, margin):
    u, v = np.asarray(u, float), np.asarray(v, float)
    cos = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
    return 1.0 - cos if same else max(0.0, cos - margin)


def test_criterion_1_loss_oracles(capsys):
    started = time.perf_counter()
    exact = [
        cosine_pair_loss([1, 0], [1, 0], same=True) == 0.0,
        cosine_pair_loss([1, 0], [1, 0], same=False) == 1.0,
        cosine_pair_loss([1, 0], [0, 1], same=False) == 0.0,
        cosine_pair_loss([1, 0], [-1, 0], same=True) == 2.0,
        embedding_loss(np.array([[1.0, 0.0], [1.0, 0.0]]), [1, 1]) == 0.0,
        embedding_loss(np.array([[1.0, 0.0], [1.0, 0.0]]), [1, 2]) == 2.0,
        discrimination_loss(np.array([[1.0, 0.0]] * 3), np.array([[0.0, 1.0]] * 3)) == 0.0,
        discrimination_loss(np.full((3, 2), 0.5), np.full((3, 2), 0.5)) == 6 * math.log(2),
        classification_loss(np.eye(3), [1, 2, 3]) == 0.0,
        classification_loss(np.full((2, 4), 0.25), [1, 3]) == 2 * math.log(4),
    ]

    rng = np.random.default_rng(12345)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(1, 9))
        p = int(rng.integers(2, 17))
        k = int(rng.integers(2, 6))
        margin = float(rng.uniform(-1, 1))
        vectors = rng.normal(0, 1, (m, p))
        labels = rng.integers(1, k + 1, m)
        pseudo = rng.integers(1, 4, m)
        z = rng.normal(0, 2, (m, k))
        probs = np.exp(z - z.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        env2 = np.abs(rng.normal(0, 1, (m, 2))) + 1e-3
        env2 /= env2.sum(axis=1, keepdims=True)
        cat2 = np.abs(rng.normal(0, 1, (m, 2))) + 1e-3
        cat2 /= cat2.sum(axis=1, keepdims=True)

        le = sum(naive_pair(vectors[i], vectors[j], pseudo[i] == pseudo[j], margin)
                 for i in range(m) for j in range(m) if i != j)
        l0 = sum(-math.log(max(probs[i, labels[i] - 1], 1e-12)) for i in range(m))
        ld = sum(-math.log(max(env2[i, 0], 1e-12)) - math.log(max(cat2[i, 1], 1e-12))
                 for i in range(m))
        worst = max(worst, abs(embedding_loss(vectors, pseudo, margin) - le))
        worst = max(worst, abs(classification_loss(probs, labels) - l0))
        worst = max(worst, abs(discrimination_loss(env2, cat2) - ld))
        u, v = rng.normal(0, 1, p), rng.normal(0, 1, p)
        for same in (True, False):
            worst = max(worst, abs(cosine_pair_loss(u, v, same, margin)
                                   - naive_pair(u, v, same, margin)))

        class Out:
            env_proj = vectors
            cat_proj = vectors[:, ::-1].copy()
            class_probs = probs
            disc_probs_env = env2
            disc_probs_cat = cat2

        cfg = LossConfig(margin=margin, alpha=0.5, beta=1.5, gamma=2.0)
        bd = total_loss(Out(), pseudo, labels, cfg)
        lc = sum(naive_pair(Out.cat_proj[i], Out.cat_proj[j], labels[i] == labels[j], margin)
                 for i in range(m) for j in range(m) if i != j)
        worst = max(worst, abs(bd.total - (l0 + 0.5 * le + 1.5 * lc + 2.0 * ld)))

    elapsed = time.perf_counter() - started
    ok = all(exact) and worst <= 1e-10 and elapsed < 5.0
    announce(capsys, 1, ok,
             f"- closed forms exact ({sum(exact)}/{len(exact)}); 100 random batches "
             f"vs double-loop oracles, max |diff| {worst:.2e} (tol 1e-10); "
             f"{elapsed:.1f}s (< 5s)")
    assert all(exact)
    assert worst <= 1e-10
    assert elapsed < 5.0


# -- criterion 2: finite-difference gradients ----------------------------------

def test_criterion_2_gradients_match_finite_differences(capsys):
    started = time.perf_counter()
    model = init_model(tiny_spec())
    batch = tiny_batch(m=4)
    pseudo = np.array([1, 2, 1, 2])
    labels = np.array([1, 2, 3, 1])

    def grads(alpha, beta, gamma):
        cfg = LossConfig(alpha=alpha, beta=beta, gamma=gamma)
        return loss_and_gradient(model, batch, pseudo, labels, cfg)[1]

    base = grads(0, 0, 0)
    with_a = grads(1, 0, 0)
    with_b = grads(0, 1, 0)
    with_c = grads(0, 0, 1)
    full = grads(1, 1, 1)
    analytic = {
        name: np.stack([
            base[name],
            with_a[name] - base[name],
            with_b[name] - base[name],
            with_c[name] - base[name],
            full[name],
        ])
        for name in base
    }

    cfg_full = LossConfig()
    h = 1e-5

    def components_at():
        bd = total_loss(forward(model, batch), pseudo, labels, cfg_full)
        return np.array([bd.classification, bd.environmental,
                         bd.categorical, bd.discrimination, bd.total])

    failures = 0
    checked = 0
    worst_rel = 0.0
    for name in sorted(model.params):
        arr = model.params[name]
        fd = np.empty((5, arr.size))
        flat = arr.reshape(-1)
        for i in range(arr.size):
            keep = flat[i]
            flat[i] = keep + h
            up = components_at()
            flat[i] = keep - h
            down = components_at()
            flat[i] = keep
            fd[:, i] = (up - down) / (2 * h)
        an = analytic[name].reshape(5, -1)
        for row in range(5):
            for i in range(arr.size):
                a, f = an[row, i], fd[row, i]
                diff = abs(a - f)
                checked += 1
                # 1e-8 floor absorbs FD roundoff on structurally zero entries
                if diff <= 1e-8:
                    continue
                rel = diff / max(abs(a), abs(f))
                worst_rel = max(worst_rel, rel)
                if rel > 1e-4:
                    failures += 1

    elapsed = time.perf_counter() - started
    ok = failures == 0 and elapsed < 60.0
    announce(capsys, 2, ok,
             f"- {checked} component/total gradient entries vs central differences "
             f"(step 1e-5): {failures} above rel tol 1e-4 "
             f"(worst rel {worst_rel:.2e}); {elapsed:.1f}s (< 60s)")
    assert failures == 0
    assert elapsed < 60.0


# -- criterion 3: clustering ----------------------------------------------------

def exhaustive_best_objective(x):
    best = np.inf
    for mask in range(1, 2 ** len(x) - 1):
        sel = np.array([(mask >> i) & 1 for i in range(len(x))], dtype=bool)
        a, b = x[sel], x[~sel]
        sse = ((a - a.mean(axis=0)) ** 2).sum() + ((b - b.mean(axis=0)) ** 2).sum()
        best = min(best, sse)
    return best


def test_criterion_3_clustering(capsys):
    started = time.perf_counter()

    # (a) Lloyd objective never increases
    rng = np.random.default_rng(777)
    worst_increase = -np.inf
    for _ in range(100):
        n = int(rng.integers(8, 41))
        dim = int(rng.integers(2, 7))
        lam = int(rng.integers(1, 5))
        x = rng.normal(0, 1, (n, dim)) * rng.uniform(0.5, 3)
        model = fit_centers(x, lam, restarts=1, seed=int(rng.integers(1 << 30)))
        history = np.asarray(model.objective_history)
        if len(history) > 1:
            worst_increase = max(worst_increase, float(np.diff(history).max()))
    monotone = worst_increase <= 0.0

    # (b) exhaustive 2-partition optimum on 6-point 2-D instances
    hits = 0
    for trial in range(100):
        trng = np.random.default_rng(5000 + trial)
        x = trng.standard_normal((6, 2))
        model = fit_centers(x, 2, seed=trial)
        best = exhaustive_best_objective(x)
        if model.objective <= best + 1e-9 * max(1.0, best):
            hits += 1

    # (c) shading-zone recovery on shading-only scenes
    aris = []
    for seed in range(5):
        spec = default_scene_spec(rows=48, cols=48, bands=20, num_classes=3,
                                  num_zones=2, noise_sigma=0.01, seed=seed)
        cube = normalize_bands(shading_only(spec))
        zones = zone_map(spec)
        spectra = cube.values.reshape(-1, cube.bands).astype(np.float64)
        model = fit_centers(spectra, 2, seed=seed)
        found = assign_pseudo_labels(spectra, model)
        aris.append(adjusted_rand_score(zones.reshape(-1), found))
    median_ari = statistics.median(aris)

    elapsed = time.perf_counter() - started
    ok = monotone and hits >= 90 and median_ari >= 0.99 and elapsed < 60.0
    announce(capsys, 3, ok,
             f"- (a) worst objective increase {worst_increase:.1e} (<= 0) over 100 "
             f"instances; (b) exhaustive optimum matched {hits}/100 (>= 90); "
             f"(c) median shading ARI {median_ari:.4f} (>= 0.99); "
             f"{elapsed:.1f}s (< 60s)")
    assert monotone
    assert hits >= 90
    assert median_ari >= 0.99
    assert elapsed < 60.0


# -- criterion 4: end-to-end training -------------------------------------------

def test_criterion_4_end_to_end_accuracy(capsys, trained_three_seeds):
    results, elapsed = trained_three_seeds
    oas = [r.metrics.oa for r in results]
    median_oa = statistics.median(oas)
    ok = median_oa >= 0.95 and elapsed < 600.0 and not any(
        r.train_report.diverged for r in results)
    announce(capsys, 4, ok,
             f"- 48x48x20, K=3, 30 train/class, defaults with epochs=100: "
             f"OA per seed {[round(v, 4) for v in oas]}, median {median_oa:.4f} "
             f"(>= 0.95); {elapsed:.0f}s (< 600s)")
    assert not any(r.train_report.diverged for r in results)
    assert median_oa >= 0.95
    assert elapsed < 600.0


# -- criterion 5: ablation harness -----------------------------------------------

def test_criterion_5_ablation_structure_and_ordering(capsys, scene48,
                                                     trained_three_seeds):
    _, cube, _ = scene48
    split = SplitSpec(per_class={1: (30, 200), 2: (30, 200), 3: (30, 200)}, seed=0)
    train_set, test_set = split_samples(cube, split, patch_size=5)
    grid = {"alpha": [0.0], "beta": [0.0], "gamma": [0.0],
            "lambda": [1, 2, 3, 5, 9]}
    rows = ablate(
        cube, train_set, test_set,
        ClusterConfig(num_centers=2, seed=0),
        canonical_network(3, cube.bands, init_seed=0),
        TrainConfig(learning_rate=0.01, epochs=100, batch_size=64, seed=0),
        grid,
    )
    labels = [r.label for r in rows]
    expected = ["alpha=0.0", "beta=0.0", "gamma=0.0",
                "lambda=1", "lambda=2", "lambda=3", "lambda=5", "lambda=9",
                "baseline"]
    structure_ok = (
        labels == expected
        and all(np.isfinite([r.oa, r.aa, r.kappa]).all() for r in rows)
        and not any(r.diverged for r in rows)
        and [r.num_centers for r in rows if r.parameter == "lambda"] == [1, 2, 3, 5, 9]
    )

    results, _ = trained_three_seeds
    full_median = statistics.median(r.metrics.oa for r in results)
    best_ablated = max(r.oa for r in rows if r.label != "baseline")
    soft_ok = full_median >= best_ablated - 0.02

    ok = structure_ok and soft_ok
    announce(capsys, 5, ok,
             f"- grid emitted {len(rows)} rows {labels} (hard gate); full median OA "
             f"{full_median:.4f} >= best ablated {best_ablated:.4f} - 0.02 (soft gate)")
    assert structure_ok
    assert soft_ok


# -- criterion 6: metrics exactness and batch invariance --------------------------

def test_criterion_6_metrics(capsys, scene48, trained_three_seeds):
    def report_of(counts):
        return metrics_from_confusion(
            ConfusionMatrix(counts=np.array(counts),
                            class_names=tuple(str(i) for i in range(len(counts)))))

    identity = report_of(np.diag([7, 5, 4]))
    one_sided = report_of([[10, 0], [10, 0]])
    mixed = report_of([[3, 1], [1, 3]])
    uniform = report_of([[5, 5], [5, 5]])
    exact = (
        (identity.oa, identity.aa, identity.kappa) == (1.0, 1.0, 1.0)
        and (one_sided.oa, one_sided.kappa) == (0.5, 0.0)
        and (mixed.oa, mixed.aa, mixed.kappa) == (0.75, 0.75, 0.5)
        and uniform.kappa == 0.0
    )

    _, cube, _ = scene48
    results, _ = trained_three_seeds
    model = results[0].model
    split = SplitSpec(per_class={1: (30, 200), 2: (30, 200), 3: (30, 200)}, seed=0)
    _, test_set = split_samples(cube, split, patch_size=5)
    norm = normalize_bands(cube)
    cm1, rep1 = evaluate(model, norm, test_set, batch_size=1)
    cm64, rep64 = evaluate(model, norm, test_set, batch_size=64)
    invariant = bool(np.array_equal(cm1.counts, cm64.counts)) and rep1 == rep64

    ok = exact and invariant
    announce(capsys, 6, ok,
             f"- fixed confusions exact (OA/AA/kappa = 1 on identity, "
             f"0.5/0 one-sided, 0.75/0.75/0.5 mixed, kappa 0 uniform); "
             f"evaluate m=1 vs m=64 reports identical: {invariant}")
    assert exact
    assert invariant


# -- criterion 7: byte-level reproducibility --------------------------------------

def run_cli_pipeline(root: Path) -> dict[str, bytes]:
    root.mkdir(parents=True, exist_ok=True)
    scene = root / "scene"
    out = root / "run"
    config = root / "config.yaml"
    config.write_text(f"""\
data:
  bundle: {scene}
  split:
    seed: 0
    per_class:
      1: [8, 12]
      2: [8, 12]
      3: [8, 12]
cluster:
  num_centers: 2
  seed: 0
network:
  feature_dim: 8
  projection_dims: [8, 6, 5]
  discriminator_dims: [8, 6, 2]
  patch_size: 3
train:
  learning_rate: 0.01
  epochs: 5
  batch_size: 16
  seed: 0
output: {out}
""")
    assert main(["synth", "--out", str(scene), "--rows", "16", "--cols", "16",
                 "--bands", "6", "--classes", "3", "--seed", "1"]) == 0
    for stage in ("split", "cluster", "train", "eval"):
        assert main([stage, "--config", str(config)]) == 0
    return {
        name: (out / name).read_bytes()
        for name in ("pseudo.json", "ckpt_0.bin", "ckpt_5.bin",
                     "metrics.json", "metrics.txt")
    }


def test_criterion_7_reproducibility(capsys, tmp_path):
    first = run_cli_pipeline(tmp_path / "one")
    second = run_cli_pipeline(tmp_path / "two")
    same = {name: first[name] == second[name] for name in first}
    ok = all(same.values())
    announce(capsys, 7, ok,
             f"- two synth->split->cluster->train->eval runs, identical seeds: "
             f"byte-identical {sorted(same)} = {all(same.values())}")
    assert same == {name: True for name in same}


# -- criterion 8: canonical defaults ----------------------------------------------

def test_criterion_8_printed_defaults(capsys):
    assert main(["--help-config"]) == 0
    printed = capsys.readouterr().out
    assert printed == CANONICAL_CONFIG
    required = (
        "learning_rate: 0.01",
        "epochs: 500",
        "batch_size: 64",
        "feature_dim: 128",
        "projection_dims: [128, 64, 64]",
        "patch_size: 5",
        "margin: 0.0",
        "alpha: 1.0",
        "beta: 1.0",
        "gamma: 1.0",
    )
    missing = [needle for needle in required if needle not in printed]
    ok = not missing
    announce(capsys, 8, ok,
             f"- canonical config pins lr=0.01, epochs=500, m=64, d=128, "
             f"projection 128-64-64, patch 5, margin 0, alpha=beta=gamma=1; "
             f"missing: {missing or 'none'}")
    assert not missing
