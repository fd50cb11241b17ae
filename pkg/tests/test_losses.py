import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from recycle_hand.camera import project
from recycle_hand.hand_model import WRIST, HandMesh, generate_sample, regress_keypoints
from recycle_hand.losses import (
    LossWeights, NumericalError, PhaseOutput, align_vertices_to_wrist, corr_terms, dist_terms,
    loss_corr, loss_dist, loss_total, normalize_keypoints, recycle_objective, similarity,
)

W_L1 = LossWeights(norm="L1")
W_L2 = LossWeights(norm="L2")


def _phase(template, seed, noise=0.005, rng=None):
    mesh, kp, mc = generate_sample(template, seed)
    out = PhaseOutput(mesh.vertices.copy(), kp.points.copy(), mc.as_array())
    if rng is not None:
        out.vertices += rng.normal(scale=noise, size=out.vertices.shape)
        out.keypoints += rng.normal(scale=noise, size=out.keypoints.shape)
        out.intrinsics = out.intrinsics + rng.normal(scale=[2, 2, 0.5, 0.5])
    return out


def _copy(p):
    return PhaseOutput(p.vertices.copy(), p.keypoints.copy(), np.array(p.intrinsics, float))


# -- similarity ---------------------------------------------------------------------------


def test_similarity_zero_and_constant(rng):
    a = rng.normal(size=(5, 3))
    assert similarity(a, a, "L1") == 0.0
    assert similarity(a, a, "L2") == 0.0
    assert similarity(a + 0.25, a, "L1") == pytest.approx(0.25, abs=1e-15)


def test_similarity_l2_matches_loop(rng):
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    acc = 0.0
    for i in range(3):
        for j in range(2):
            acc += (a[i, j] - b[i, j]) ** 2
    assert similarity(a, b, "L2") == pytest.approx(acc / 6, rel=1e-14)


def test_similarity_shape_mismatch():
    with pytest.raises(ValueError):
        similarity(np.zeros((3, 2)), np.zeros((2, 3)))


# -- normalization and alignment ------------------------------------------------------------


def test_normalize_keypoints(rng):
    k = rng.normal(size=(21, 3))
    z = k - k.mean(axis=0)
    np.testing.assert_array_equal(normalize_keypoints(z), z - z.mean(axis=0))
    np.testing.assert_allclose(normalize_keypoints(z), z, atol=1e-15)
    assert np.linalg.norm(normalize_keypoints(k).mean(axis=0)) < 1e-12
    t = rng.normal(size=3)
    np.testing.assert_allclose(normalize_keypoints(k + t), normalize_keypoints(k), atol=1e-12)


def test_align_vertices_to_wrist(template, rng):
    v = rng.normal(scale=0.05, size=(template.v_fine, 3))
    np.testing.assert_array_equal(align_vertices_to_wrist(v, np.zeros(3)), v)
    t = rng.normal(size=3)
    w = rng.normal(size=3)
    np.testing.assert_allclose(align_vertices_to_wrist(v + t, w + t), align_vertices_to_wrist(v, w),
                               atol=1e-12)
    wrist = regress_keypoints(HandMesh(v), template).points[WRIST]
    aligned = align_vertices_to_wrist(v, wrist)
    again = regress_keypoints(HandMesh(aligned), template).points[WRIST]
    assert np.abs(again).max() < 1e-12


# -- distance terms -------------------------------------------------------------------------


def test_dist_zero_for_ground_truth(template):
    gt = _phase(template, 0)
    assert loss_dist(_copy(gt), gt, W_L1) == (0.0, 0.0, 0.0)


def test_dist_unit_offset_mean_reduction(template):
    gt = _phase(template, 1)
    pred = _copy(gt)
    pred.keypoints = pred.keypoints + np.array([1.0, 0.0, 0.0])
    dk, dv, dp = loss_dist(pred, gt, LossWeights(proj_weight=0.0))
    assert dk == pytest.approx(1 / 3, abs=1e-15)
    assert dv == 0.0 and dp == 0.0


def test_dist_matches_loop_oracle(template, rng):
    gt = _phase(template, 2)
    pred = _phase(template, 2, rng=rng)
    for w in (W_L1, W_L2):
        dk, dv, dp = loss_dist(pred, gt, w)
        p = abs if w.norm == "L1" else (lambda x: x * x)

        def mean_loop(a, b):
            acc, n = 0.0, 0
            for i in range(a.shape[0]):
                for j in range(a.shape[1]):
                    acc += p(a[i, j] - b[i, j])
                    n += 1
            return acc / n

        def proj_loop(k, m):
            return np.array([[m[0] * x / z + m[2], m[1] * y / z + m[3]] for x, y, z in k])

        assert dk == pytest.approx(mean_loop(pred.keypoints, gt.keypoints), rel=1e-12)
        assert dv == pytest.approx(mean_loop(pred.vertices, gt.vertices), rel=1e-12)
        assert dp == pytest.approx(mean_loop(proj_loop(pred.keypoints, pred.intrinsics),
                                             proj_loop(gt.keypoints, gt.intrinsics)), rel=1e-12)


# -- self-correlation terms -----------------------------------------------------------------


def test_corr_zero_for_identical_phases(template, rng):
    p1 = _phase(template, 3, rng=rng)
    assert loss_corr(p1, _copy(p1), W_L1) == (0.0, 0.0, 0.0)


def test_corr_translated_copy(template, rng):
    p1 = _phase(template, 4, rng=rng)
    p2 = _copy(p1)
    t = np.array([0.02, -0.01, 0.05])
    p2.vertices += t
    p2.keypoints += t
    ck, cv, cp = loss_corr(p1, p2, W_L1)
    assert ck < 1e-12 and cv < 1e-12
    # perspective changes the projected shape, so the pixel-space term stays positive
    assert cp > 1e-3


def test_corr_k_single_keypoint_offset_closed_form(template):
    p1 = _phase(template, 5)
    p2 = _copy(p1)
    j = 7
    p2.keypoints[j] += np.array([1.0, 0.0, 0.0])
    ck, _, _ = loss_corr(p1, p2, LossWeights(proj_weight=0.0))
    # centered offset: 1 - 1/21 on row j, 1/21 on the other 20 rows, x only
    expected = ((1 - 1 / 21) + 20 * (1 / 21)) / 63
    assert ck == pytest.approx(expected, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(t1=arrays(np.float64, 3, elements=st.floats(-1, 1)),
       t2=arrays(np.float64, 3, elements=st.floats(-1, 1)))
def test_corr_translation_invariance(template, t1, t2):
    rng = np.random.default_rng(77)
    p1 = _phase(template, 6, rng=rng)
    p2 = _phase(template, 6, rng=rng)
    base = loss_corr(p1, p2, LossWeights(proj_weight=0.0))
    q1, q2 = _copy(p1), _copy(p2)
    q1.vertices += t1
    q1.keypoints += t1
    q2.vertices += t2
    q2.keypoints += t2
    moved = loss_corr(q1, q2, LossWeights(proj_weight=0.0))
    assert abs(moved[0] - base[0]) < 1e-12
    assert abs(moved[1] - base[1]) < 1e-12


def test_corr_positive_when_shapes_differ(template, rng):
    p1 = _phase(template, 7, rng=rng)
    p2 = _phase(template, 7, rng=rng)
    assert all(v > 0 for v in loss_corr(p1, p2, W_L2))


# -- total ----------------------------------------------------------------------------------


def test_total_baseline_equals_ori():
    w = LossWeights(alpha=1.0, beta=0.0, gamma=0.0)
    bd = loss_total((0.1, 0.2, 0.3), (0.5, 0.5, 0.5), (0.7, 0.8, 0.9), w)
    assert bd.total == bd.ori == pytest.approx(0.6, abs=1e-15)


def test_total_all_zero():
    assert loss_total((0, 0, 0), (0, 0, 0), (0, 0, 0), LossWeights()).total == 0.0


def test_total_arithmetic_example():
    bd = loss_total((1, 1, 1), (1, 1, 1), (1, 1, 1), LossWeights(alpha=1, beta=1, gamma=0.5))
    assert (bd.ori, bd.recycle, bd.total) == (3.0, 3.0, 7.5)


def test_total_is_linear_in_weights(rng):
    ori, rec, corr = rng.uniform(size=3), rng.uniform(size=3), rng.uniform(size=3)
    a = rng.uniform(size=3)
    b = rng.uniform(size=3)

    def total(w):
        return loss_total(ori, rec, corr, LossWeights(*w, allow_unequal=True)).total

    lhs = total(a + b)
    assert lhs == pytest.approx(total(a) + total(b), rel=1e-12)
    assert total(2.5 * a) == pytest.approx(2.5 * total(a), rel=1e-12)
    bd = loss_total(ori, rec, corr, LossWeights(*a, allow_unequal=True))
    assert bd.total == pytest.approx(a[0] * bd.ori + a[1] * bd.recycle
                                     + a[2] * (bd.corr_k + bd.corr_v + bd.corr_proj), rel=1e-9)


def test_total_names_nonfinite_component():
    with pytest.raises(NumericalError) as exc:
        loss_total((0.1, np.nan, 0.0), (0, 0, 0), (0, 0, 0), LossWeights())
    assert exc.value.component == "ori.dist_v"
    with pytest.raises(NumericalError) as exc:
        loss_total((0, 0, 0), (0, 0, 0), (0, 0, np.inf), LossWeights())
    assert exc.value.component == "corr_proj"


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=1.0, beta=0.5)
    LossWeights(alpha=1.0, beta=0.5, allow_unequal=True)
    LossWeights(alpha=1.0, beta=0.0)  # single-phase baseline
    with pytest.raises(ValueError):
        LossWeights(gamma=-1.0)
    with pytest.raises(ValueError):
        LossWeights(norm="L3")


def test_recycle_objective_breakdown(template, rng):
    gt = _phase(template, 8)
    p1 = _phase(template, 8, rng=rng)
    p2 = _phase(template, 8, rng=rng)
    w = LossWeights(gamma=0.3)
    bd, _, _ = recycle_objective(p1, gt, w, p2, corr_enabled=True)
    assert bd.ori == pytest.approx(sum(dist_terms(p1, gt, w)), rel=1e-12)
    assert bd.recycle == pytest.approx(sum(dist_terms(p2, gt, w)), rel=1e-12)
    assert (bd.corr_k, bd.corr_v, bd.corr_proj) == corr_terms(p1, p2, w)
    base, _, g2 = recycle_objective(p1, gt, LossWeights(beta=0.0, gamma=0.0))
    assert base.total == base.ori and g2 is None


def test_corr_grad_phase2_leaves_phase1_untouched(template, rng):
    gt = _phase(template, 9)
    p1 = _phase(template, 9, rng=rng)
    p2 = _phase(template, 9, rng=rng)
    w = LossWeights()
    _, g_no, _ = recycle_objective(p1, gt, w, p2, corr_enabled=False)
    _, g_p2, _ = recycle_objective(p1, gt, w, p2, corr_enabled=True, corr_grad="phase2")
    np.testing.assert_array_equal(g_no.vertices, g_p2.vertices)
    np.testing.assert_array_equal(g_no.keypoints, g_p2.keypoints)


# -- gradients vs central differences ---------------------------------------------------------


def _residual_signs(p1, p2, gt, w):
    """Signs of every residual an L1 term takes |.| of; a change means a kink was crossed."""
    out = [np.sign(p1.keypoints - gt.keypoints), np.sign(p1.vertices - gt.vertices),
           np.sign(normalize_keypoints(p1.keypoints) - normalize_keypoints(p2.keypoints)),
           np.sign((p1.vertices - p1.keypoints[WRIST]) - (p2.vertices - p2.keypoints[WRIST]))]
    q1 = project(p1.keypoints, p1.intrinsics)
    out.append(np.sign(q1 - project(gt.keypoints, gt.intrinsics)))
    out.append(np.sign(normalize_keypoints(q1)
                       - normalize_keypoints(project(p2.keypoints, p2.intrinsics))))
    return np.concatenate([o.ravel() for o in out])


def _flat(p):
    return np.concatenate([p.vertices.ravel(), p.keypoints.ravel(), np.asarray(p.intrinsics)])


def _unflat(x, like):
    nv = like.vertices.size
    nk = like.keypoints.size
    return PhaseOutput(x[:nv].reshape(like.vertices.shape), x[nv:nv + nk].reshape(like.keypoints.shape),
                       x[nv + nk:])


def _weighted_fd(hi, lo, w, eps):
    # difference each component at its own scale, then weight: pixel terms near 1 would
    # otherwise bury the ~1e-8 vertex gradients in the roundoff of the summed total
    ori = sum(getattr(hi, n) - getattr(lo, n) for n in ("dist_k", "dist_v", "dist_proj"))
    corr = sum(getattr(hi, n) - getattr(lo, n) for n in ("corr_k", "corr_v", "corr_proj"))
    return (w.alpha * ori + w.beta * (hi.recycle - lo.recycle) + w.gamma * corr) / (2 * eps)


@pytest.mark.parametrize("norm", ["L2", "L1"])
def test_objective_gradient_matches_central_differences(template, norm):
    eps = 1e-5
    worst = 0.0
    checked = 0
    for cfg in range(50):
        rng = np.random.default_rng(1000 + cfg)
        gt = _phase(template, cfg)
        p1 = _phase(template, cfg, rng=rng)
        p2 = _phase(template, cfg, rng=rng)
        w = LossWeights(gamma=float(rng.uniform(0.2, 2.0)), norm=norm,
                        proj_weight=float(rng.choice([1.0, 1e-3])))
        _, g1, _ = recycle_objective(p1, gt, w, p2, corr_enabled=True)
        g = _flat(g1)
        x0 = _flat(p1)
        nv, nk = p1.vertices.size, p1.keypoints.size
        coords = np.concatenate([rng.choice(nv, 12, replace=False),
                                 nv + rng.choice(nk, 8, replace=False),
                                 nv + nk + np.arange(4)])
        for i in coords:
            xp, xm = x0.copy(), x0.copy()
            xp[i] += eps
            xm[i] -= eps
            pp, pm = _unflat(xp, p1), _unflat(xm, p1)
            if norm == "L1" and not np.array_equal(_residual_signs(pp, p2, gt, w),
                                                   _residual_signs(pm, p2, gt, w)):
                continue  # probe straddles a kink of |.|
            fd = _weighted_fd(recycle_objective(pp, gt, w, p2, True)[0],
                              recycle_objective(pm, gt, w, p2, True)[0], w, eps)
            denom = max(abs(fd), abs(g[i]))
            if denom == 0:
                continue
            worst = max(worst, abs(fd - g[i]) / denom)
            checked += 1
    assert checked > 50 * 20 * 0.8
    assert worst < 1e-4
