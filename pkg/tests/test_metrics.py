import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from conftest import random_rotation
from recycle_hand.metrics import (
    AlignmentError, MetricsReport, evaluate_predictions, f_score, pa_mpjpe, pa_mpvpe,
    precision_recall, procrustes_align,
)


def _residual(T, pred, gt):
    return float(np.sum((T.apply(pred) - gt) ** 2))


def _similar(X, rng):
    s = rng.uniform(0.5, 2.0)
    R = random_rotation(rng)
    t = rng.normal(size=3)
    return s * X @ R.T + t


def _oracle_pa_mm(pred, gt):
    """Align by generic least squares over (log s, rotation vector, t), then average."""
    c = np.std(gt)  # unit-scale coordinates keep the solver's tolerances meaningful
    P, G = pred / c, gt / c

    def apply(x):
        return np.exp(x[0]) * Rotation.from_rotvec(x[1:4]).apply(P) + x[4:]

    best = None
    for start in Rotation.random(8, random_state=0).as_rotvec():
        x0 = np.concatenate([[0.0], start, G.mean(axis=0) - P.mean(axis=0)])
        res = least_squares(lambda x: (apply(x) - G).ravel(), x0, xtol=1e-15, ftol=1e-15,
                            gtol=1e-15)
        if best is None or res.cost < best.cost:
            best = res
    return 1000.0 * c * np.mean(np.linalg.norm(apply(best.x) - G, axis=1))


# -- procrustes_align -------------------------------------------------------------------------


def test_identity_alignment(rng):
    X = rng.normal(size=(21, 3))
    T = procrustes_align(X, X)
    assert T.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.translation, 0.0, atol=1e-12)


def test_recovers_constructed_similarity(rng):
    for _ in range(20):
        gt = rng.normal(size=(30, 3))
        s = rng.uniform(0.3, 3.0)
        R = random_rotation(rng)
        t = rng.normal(size=3)
        pred = (1.0 / s) * (gt - t) @ R  # so that s R pred + t = gt
        T = procrustes_align(pred, gt)
        assert abs(T.scale - s) < 1e-6
        np.testing.assert_allclose(T.rotation, R, atol=1e-6)
        np.testing.assert_allclose(T.translation, t, atol=1e-6)


def test_rotation_is_proper_even_for_mirrored_input(rng):
    gt = rng.normal(size=(10, 3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    T = procrustes_align(mirrored, gt)
    R = T.rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
    assert T.scale > 0


def test_beats_random_candidate_search(rng):
    pred = rng.normal(size=(4, 3))
    gt = _similar(pred, rng) + rng.normal(scale=0.05, size=(4, 3))
    best = _residual(procrustes_align(pred, gt), pred, gt)
    n = 100_000
    Rs = Rotation.random(n, random_state=3).as_matrix()
    s = rng.uniform(0.1, 5.0, size=n)
    t = rng.normal(scale=3.0, size=(n, 3))
    moved = s[:, None, None] * np.einsum("nij,kj->nki", Rs, pred) + t[:, None, :]
    cand = np.sum((moved - gt[None]) ** 2, axis=(1, 2))
    assert best <= cand.min()


def test_degenerate_ground_truth_rejected(rng):
    line = np.outer(rng.normal(size=7), [1.0, 2.0, 3.0])
    with pytest.raises(AlignmentError):
        procrustes_align(rng.normal(size=(7, 3)), line)
    with pytest.raises(AlignmentError):
        procrustes_align(rng.normal(size=(7, 3)), np.zeros((7, 3)))
    with pytest.raises(AlignmentError):
        procrustes_align(np.zeros((2, 3)), rng.normal(size=(2, 3)))


def test_alignment_never_worse_than_unaligned(rng):
    for _ in range(50):
        gt = rng.normal(size=(21, 3))
        pred = gt + rng.normal(scale=0.3, size=(21, 3))
        T = procrustes_align(pred, gt)
        assert _residual(T, pred, gt) <= np.sum((pred - gt) ** 2) + 1e-12


# -- PA errors --------------------------------------------------------------------------------


def test_pa_mpjpe_zero_cases(rng):
    gt = rng.normal(scale=0.05, size=(21, 3))
    assert pa_mpjpe(gt, gt) < 1e-9
    assert pa_mpjpe(_similar(gt, rng), gt) < 1e-6


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pa_mpjpe_similarity_invariant(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(scale=0.05, size=(21, 3))
    pred = gt + rng.normal(scale=0.005, size=(21, 3))
    base = pa_mpjpe(pred, gt)
    assert abs(pa_mpjpe(_similar(pred, rng), gt) - base) < 1e-6
    assert base >= 0


def test_pa_mpjpe_single_joint_offset_matches_oracle(rng):
    gt = rng.normal(scale=0.04, size=(21, 3))
    pred = gt.copy()
    pred[5] += 0.021 * np.array([0.0, 0.6, 0.8])
    value = pa_mpjpe(pred, gt)
    assert value == pytest.approx(_oracle_pa_mm(pred, gt), abs=1e-6)
    assert 0 < value < 21.0


def test_pa_mpvpe_uniform_offset(template):
    gt = template.rest_vertices
    pred = gt + np.array([0.005, 0.0, 0.0])
    # a pure translation is removed by the alignment; the unaligned error is exactly 5 mm
    assert pa_mpvpe(pred, gt) < 1e-9
    assert pa_mpvpe(pred, gt, aligned=False) == pytest.approx(5.0, abs=1e-9)


def test_pa_mpvpe_matches_oracle_and_shared_path(template, rng):
    gt = template.rest_vertices
    pred = gt + rng.normal(scale=0.003, size=gt.shape)
    value = pa_mpvpe(pred, gt)
    assert value == pa_mpjpe(pred, gt)  # same code path for any point count
    sub = rng.choice(gt.shape[0], 60, replace=False)
    assert pa_mpvpe(pred[sub], gt[sub]) == pytest.approx(_oracle_pa_mm(pred[sub], gt[sub]), abs=1e-6)


# -- F-score ----------------------------------------------------------------------------------


def _brute_force_f(pred, gt, tau):
    d = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=2)
    p = np.mean(d.min(axis=1) <= tau)
    r = np.mean(d.min(axis=0) <= tau)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def test_f_score_trivial_cases(rng):
    X = rng.normal(size=(50, 3))
    assert f_score(X, X, 0.005) == 1.0
    assert f_score(X, X + 100.0, 0.015) == 0.0
    assert f_score(X, X + 0.1, 1e308) == 1.0
    with pytest.raises(ValueError):
        f_score(X, X, 0.0)


def test_f_score_half_covered():
    gt = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float) * 10
    pred = gt.copy()
    pred[2:] += 5.0  # two far-away predictions: P = R = 0.5
    p, r = precision_recall(pred, gt, 0.005)
    assert (p, r) == (0.5, 0.5)
    assert f_score(pred, gt, 0.005) == 0.5
    assert _brute_force_f(pred, gt, 0.005) == 0.5


def test_f_score_matches_brute_force_on_200_sets(rng):
    for _ in range(200):
        n, m = rng.integers(5, 80, size=2)
        gt = rng.normal(scale=0.02, size=(m, 3))
        pred = gt[rng.integers(0, m, size=n)] + rng.normal(scale=0.006, size=(n, 3))
        tau = rng.choice([0.005, 0.015, rng.uniform(0.001, 0.03)])
        assert f_score(pred, gt, tau) == pytest.approx(_brute_force_f(pred, gt, tau), abs=1e-15)


def test_f_score_monotone_in_tau(rng):
    gt = rng.normal(scale=0.02, size=(60, 3))
    pred = gt + rng.normal(scale=0.01, size=(60, 3))
    values = [f_score(pred, gt, tau) for tau in np.linspace(1e-4, 0.1, 60)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0


# -- aggregation ------------------------------------------------------------------------------


def test_evaluate_predictions_perfect_and_report_format(template):
    V = np.stack([template.rest_vertices] * 3)
    K = np.einsum("kv,bvd->bkd", template.joint_regressor, V)
    rep = evaluate_predictions(K, K, V, V)
    assert rep.pa_mpjpe_mm < 1e-9 and rep.pa_mpvpe_mm < 1e-9
    assert rep.f_at_5mm == 1.0 and rep.f_at_15mm == 1.0 and rep.sample_count == 3
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "pa_mpjpe_mm,pa_mpvpe_mm,f_at_5mm,f_at_15mm,sample_count"
    assert "PA-MPJPE" in rep.table()


def test_evaluate_predictions_empty_and_bad_option(template):
    with pytest.raises(ValueError):
        evaluate_predictions(np.zeros((0, 21, 3)), np.zeros((0, 21, 3)), np.zeros((0, 778, 3)),
                             np.zeros((0, 778, 3)))
    V = template.rest_vertices[None]
    K = (template.joint_regressor @ template.rest_vertices)[None]
    with pytest.raises(ValueError):
        evaluate_predictions(K, K, V, V, f_on="faces")
    assert isinstance(evaluate_predictions(K, K, V, V, f_on="keypoints"), MetricsReport)
