"""K-means pseudo-environments: fitting, assignment, persistence."""

import numpy as np
import pytest

from hsid.datacube import extract_patches, normalize_bands
from hsid.pseudo_env import (
    ClusterConfig,
    PseudoModel,
    assign_pseudo_labels,
    clustering_spectrum,
    fit_centers,
    load_pseudo,
    save_pseudo,
)


def test_separated_duplicates_recover_exact_centers():
    spectra = np.array([[0.0, 0.0]] * 5 + [[10.0, 10.0]] * 5)
    model = fit_centers(spectra, 2, seed=0)
    got = {tuple(c) for c in model.centers}
    assert got == {(0.0, 0.0), (10.0, 10.0)}
    assert model.objective == 0.0


def test_single_center_is_the_mean():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1, (20, 4))
    model = fit_centers(x, 1, seed=0)
    assert np.allclose(model.centers[0], x.mean(axis=0))


def test_objective_history_never_increases():
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        x = rng.normal(0, 2, (30, 3))
        model = fit_centers(x, 4, seed=trial, restarts=2)
        h = np.asarray(model.objective_history)
        assert np.all(np.diff(h) <= 0.0)
        assert model.objective == h[-1]


def test_objective_is_recomputable_from_centers():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 1, (40, 5))
    model = fit_centers(x, 3, seed=7)
    d2 = ((x[:, None, :] - model.centers[None, :, :]) ** 2).sum(axis=2)
    assert np.isclose(model.objective, d2.min(axis=1).sum(), rtol=0, atol=1e-9)


def test_converged_centers_are_cluster_means():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 1, (25, 2))
    # tol=0 runs Lloyd to a fixed point, where centers equal member means
    model = fit_centers(x, 3, seed=3, tol=0.0)
    labels = assign_pseudo_labels(x, model) - 1
    for j in range(3):
        members = x[labels == j]
        assert len(members) > 0
        assert np.allclose(model.centers[j], members.mean(axis=0), atol=1e-9)


def test_more_restarts_never_worsen_the_objective():
    rng = np.random.default_rng(4)
    x = rng.normal(0, 1, (18, 2))
    one = fit_centers(x, 3, seed=5, restarts=1)
    many = fit_centers(x, 3, seed=5, restarts=10)
    assert many.objective <= one.objective + 1e-12


def test_fit_is_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(0, 1, (30, 4))
    a = fit_centers(x, 3, seed=11)
    b = fit_centers(x, 3, seed=11)
    assert np.array_equal(a.centers, b.centers)
    assert a.objective == b.objective


def test_separated_data_clusters_the_same_under_row_permutation():
    # the seeded init is order-dependent, so equivariance only holds where
    # every start reaches the one good optimum
    rng = np.random.default_rng(5)
    x = np.concatenate([rng.normal(c, 0.1, (10, 4)) for c in (0.0, 10.0, 20.0)])
    perm = rng.permutation(len(x))
    labels = assign_pseudo_labels(x, fit_centers(x, 3, seed=11))
    labels_p = assign_pseudo_labels(x[perm], fit_centers(x[perm], 3, seed=11))
    # centers may come out reordered; compare label co-partitions
    same = labels[perm][:, None] == labels[perm][None, :]
    same_p = labels_p[:, None] == labels_p[None, :]
    assert np.array_equal(same, same_p)


def test_assignment_matches_a_naive_distance_scan():
    rng = np.random.default_rng(6)
    x = rng.normal(0, 1, (50, 3))
    model = fit_centers(x, 4, seed=2)
    labels = assign_pseudo_labels(x, model)
    for i, row in enumerate(x):
        dists = [((row - c) ** 2).sum() for c in model.centers]
        assert labels[i] == int(np.argmin(dists)) + 1


def test_assignment_trivial_cases_and_tie_rule():
    model = PseudoModel(
        centers=np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]]),
        objective=0.0, iterations_run=1, objective_history=(0.0,),
    )
    labels = assign_pseudo_labels(np.array([[2.0, 0.0], [1.0, 0.0], [3.0, 0.0]]), model)
    assert labels.tolist() == [2, 1, 2]  # exact point, then two midpoint ties


def test_fit_rejects_bad_inputs():
    x = np.ones((3, 2))
    with pytest.raises(ValueError, match="cannot support"):
        fit_centers(x, 4)
    with pytest.raises(ValueError, match="finite"):
        fit_centers(np.array([[np.inf, 0.0]]), 1)
    with pytest.raises(ValueError, match="num_centers"):
        fit_centers(x, 0)
    with pytest.raises(ValueError, match="restarts"):
        fit_centers(x, 1, restarts=0)
    model = fit_centers(x[:, :1], 1)
    with pytest.raises(ValueError, match="bands"):
        assign_pseudo_labels(x, model)


def test_cluster_config_validation():
    with pytest.raises(ValueError):
        ClusterConfig(num_centers=0)
    with pytest.raises(ValueError):
        ClusterConfig(restarts=0)
    with pytest.raises(ValueError):
        ClusterConfig(tol=-1.0)


def test_clustering_spectrum_is_the_center_pixel(small_scene):
    _, cube, _ = small_scene
    norm = normalize_bands(cube)
    patch = extract_patches(norm, np.array([[4, 5]]), 5)[0]
    assert np.array_equal(clustering_spectrum(patch), norm.values[4, 5])
    single = extract_patches(norm, np.array([[2, 2]]), 1)[0]
    assert np.array_equal(clustering_spectrum(single), norm.values[2, 2])


def test_patch_and_pixel_pseudo_labels_agree(small_scene, small_split):
    _, cube, _ = small_scene
    train, _ = small_split
    norm = normalize_bands(cube)
    direct = norm.values[train.indices[:, 0], train.indices[:, 1]].astype(np.float64)
    patches = extract_patches(norm, train.indices, 5)
    via_patches = np.stack([clustering_spectrum(p) for p in patches]).astype(np.float64)
    model = fit_centers(direct, 2, seed=0)
    assert np.array_equal(
        assign_pseudo_labels(direct, model), assign_pseudo_labels(via_patches, model)
    )


def test_pseudo_file_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    x = rng.normal(0, 1, (12, 3))
    model = fit_centers(x, 2, seed=4)
    labels = assign_pseudo_labels(x, model)
    path = tmp_path / "pseudo.json"
    save_pseudo(model, labels, 4, path)
    back_model, back_labels, seed = load_pseudo(path)
    assert np.array_equal(back_model.centers, model.centers)
    assert back_model.objective == model.objective
    assert np.array_equal(back_labels, labels)
    assert seed == 4
    # identical fits rewrite identical bytes
    other = tmp_path / "again.json"
    save_pseudo(model, labels, 4, other)
    assert path.read_bytes() == other.read_bytes()


def test_load_pseudo_rejects_inconsistent_payload(tmp_path):
    path = tmp_path / "pseudo.json"
    path.write_text('{"lambda": 2, "seed": 0, "centers": [[0.0]], '
                    '"objective": 0.0, "labels": [1]}')
    with pytest.raises(ValueError, match="stated count"):
        load_pseudo(path)
