"""Training objectives and their analytic gradients.

Distance terms compare a prediction with ground truth; self-correlation terms
compare the original-image prediction with the prediction on its re-rendered
image after removing translation (keypoint mean-centering, wrist alignment of
vertices, pixel-space centering of projected keypoints). All norms use a
per-element mean reduction.
"""
from dataclasses import dataclass, fields

import numpy as np

from .camera import project, project_vjp
from .hand_model import WRIST

NORMS = ("L1", "L2")


class NumericalError(ArithmeticError):
    def __init__(self, component, value):
        self.component = component
        super().__init__(f"loss component {component!r} is not finite ({value})")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    norm: str = "L1"
    # scale on the pixel-space terms (dist_proj, corr_proj); keeps pixels and meters comparable
    proj_weight: float = 1.0
    allow_unequal: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "proj_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.allow_unequal and self.alpha != self.beta and self.beta != 0:
            raise ValueError("alpha and beta share one value unless allow_unequal is set "
                             "(beta = 0 is the single-phase baseline)")


@dataclass
class PhaseOutput:
    vertices: np.ndarray  # (778, 3)
    keypoints: np.ndarray  # (21, 3)
    intrinsics: np.ndarray  # (fx, fy, cx, cy)


@dataclass
class PhaseGrad:
    vertices: np.ndarray
    keypoints: np.ndarray
    intrinsics: np.ndarray

    @classmethod
    def zeros_like(cls, out):
        return cls(np.zeros_like(out.vertices), np.zeros_like(out.keypoints),
                   np.zeros_like(np.asarray(out.intrinsics, dtype=np.float64)))

    def add_(self, other, scale=1.0):
        self.vertices += scale * other.vertices
        self.keypoints += scale * other.keypoints
        self.intrinsics += scale * other.intrinsics
        return self


@dataclass(frozen=True)
class LossBreakdown:
    dist_k: float = 0.0
    dist_v: float = 0.0
    dist_proj: float = 0.0
    corr_k: float = 0.0
    corr_v: float = 0.0
    corr_proj: float = 0.0
    ori: float = 0.0
    recycle: float = 0.0
    total: float = 0.0

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def similarity(a, b, norm="L1"):
    a, b = _check_shapes(a, b)
    d = a - b
    if norm == "L1":
        return float(np.mean(np.abs(d)))
    if norm == "L2":
        return float(np.mean(d * d))
    raise ValueError(f"unknown norm {norm!r}")


def similarity_grad(a, b, norm="L1"):
    """Gradient of ``similarity`` w.r.t. ``a`` (w.r.t. ``b`` it is the negative)."""
    a, b = _check_shapes(a, b)
    d = a - b
    if norm == "L1":
        return np.sign(d) / d.size
    if norm == "L2":
        return 2.0 * d / d.size
    raise ValueError(f"unknown norm {norm!r}")


def normalize_keypoints(k):
    k = np.asarray(k, dtype=np.float64)
    return k - k.mean(axis=0)


def _center_grad(g):
    # adjoint of mean-centering is mean-centering
    return g - g.mean(axis=0)


def align_vertices_to_wrist(v, wrist):
    return np.asarray(v, dtype=np.float64) - np.asarray(wrist, dtype=np.float64)


# ----------------------------------------------------------------------


def dist_terms(pred, gt, weights, with_grad=False):
    """(dist_k, dist_v, dist_proj) and optionally their weighted-sum gradient.

    ``gt`` is a PhaseOutput-like triple of ground truth. If ``with_grad``,
    returns ``(terms, PhaseGrad)`` for d(dist_k + dist_v + dist_proj)/d(pred).
    """
    norm = weights.norm
    dist_k = similarity(pred.keypoints, gt.keypoints, norm)
    dist_v = similarity(pred.vertices, gt.vertices, norm)
    pw = weights.proj_weight
    if pw > 0:
        p_pred = project(pred.keypoints, pred.intrinsics)
        p_gt = project(gt.keypoints, gt.intrinsics)
        dist_proj = pw * similarity(p_pred, p_gt, norm)
    else:
        dist_proj = 0.0
    terms = (dist_k, dist_v, dist_proj)
    if not with_grad:
        return terms
    g = PhaseGrad(similarity_grad(pred.vertices, gt.vertices, norm),
                  similarity_grad(pred.keypoints, gt.keypoints, norm),
                  np.zeros(4))
    if pw > 0:
        gp, gm = project_vjp(pred.keypoints, pred.intrinsics,
                             pw * similarity_grad(p_pred, p_gt, norm))
        g.keypoints += gp
        g.intrinsics += gm
    return terms, g


def loss_dist(pred, gt, weights):
    return dist_terms(pred, gt, weights)


def corr_terms(p1, p2, weights, with_grad=False):
    """(corr_k, corr_v, corr_proj) between the two phases, optionally with gradients
    of their sum w.r.t. both phases: ``(terms, grad_phase1, grad_phase2)``."""
    norm = weights.norm
    k1, k2 = normalize_keypoints(p1.keypoints), normalize_keypoints(p2.keypoints)
    corr_k = similarity(k1, k2, norm)
    v1 = align_vertices_to_wrist(p1.vertices, p1.keypoints[WRIST])
    v2 = align_vertices_to_wrist(p2.vertices, p2.keypoints[WRIST])
    corr_v = similarity(v1, v2, norm)
    pw = weights.proj_weight
    if pw > 0:
        q1 = project(p1.keypoints, p1.intrinsics)
        q2 = project(p2.keypoints, p2.intrinsics)
        c1, c2 = normalize_keypoints(q1), normalize_keypoints(q2)
        corr_proj = pw * similarity(c1, c2, norm)
    else:
        corr_proj = 0.0
    terms = (corr_k, corr_v, corr_proj)
    if not with_grad:
        return terms

    g1, g2 = PhaseGrad.zeros_like(p1), PhaseGrad.zeros_like(p2)
    gk = _center_grad(similarity_grad(k1, k2, norm))
    g1.keypoints += gk
    g2.keypoints -= gk
    gv = similarity_grad(v1, v2, norm)
    g1.vertices += gv
    g1.keypoints[WRIST] -= gv.sum(axis=0)
    g2.vertices -= gv
    g2.keypoints[WRIST] += gv.sum(axis=0)
    if pw > 0:
        gq = _center_grad(pw * similarity_grad(c1, c2, norm))
        gp1, gm1 = project_vjp(p1.keypoints, p1.intrinsics, gq)
        gp2, gm2 = project_vjp(p2.keypoints, p2.intrinsics, -gq)
        g1.keypoints += gp1
        g1.intrinsics += gm1
        g2.keypoints += gp2
        g2.intrinsics += gm2
    return terms, g1, g2


def loss_corr(phase1, phase2, weights):
    return corr_terms(phase1, phase2, weights)


def loss_total(ori_terms, recycle_terms, corr, weights):
    """Combine component terms: total = alpha*ori + beta*recycle + gamma*sum(corr)."""
    names = ("dist_k", "dist_v", "dist_proj")
    for prefix, terms in (("ori", ori_terms), ("recycle", recycle_terms), ("corr", corr)):
        for name, v in zip(names if prefix != "corr" else ("corr_k", "corr_v", "corr_proj"), terms):
            if not np.isfinite(v):
                raise NumericalError(f"{prefix}.{name}" if prefix != "corr" else name, v)
            if v < 0:
                raise ValueError(f"loss component {prefix}.{name} is negative ({v})")
    ori = float(ori_terms[0] + ori_terms[1] + ori_terms[2])
    recycle = float(recycle_terms[0] + recycle_terms[1] + recycle_terms[2])
    corr_sum = float(corr[0] + corr[1] + corr[2])
    total = weights.alpha * ori + weights.beta * recycle + weights.gamma * corr_sum
    return LossBreakdown(
        dist_k=float(ori_terms[0]), dist_v=float(ori_terms[1]), dist_proj=float(ori_terms[2]),
        corr_k=float(corr[0]), corr_v=float(corr[1]), corr_proj=float(corr[2]),
        ori=ori, recycle=recycle, total=float(total),
    )


def residual_signs(p1, gt, weights, p2=None, corr_enabled=False):
    """Signs of every residual the objective takes a norm of. Under L1 the
    objective is smooth wherever this vector is locally constant."""
    parts = [p1.keypoints - gt.keypoints, p1.vertices - gt.vertices]
    pw = weights.proj_weight > 0
    if pw:
        parts.append(project(p1.keypoints, p1.intrinsics) - project(gt.keypoints, gt.intrinsics))
    if p2 is not None:
        parts += [p2.keypoints - gt.keypoints, p2.vertices - gt.vertices]
        if pw:
            parts.append(project(p2.keypoints, p2.intrinsics) - project(gt.keypoints, gt.intrinsics))
        if corr_enabled:
            parts.append(normalize_keypoints(p1.keypoints) - normalize_keypoints(p2.keypoints))
            parts.append(align_vertices_to_wrist(p1.vertices, p1.keypoints[WRIST])
                         - align_vertices_to_wrist(p2.vertices, p2.keypoints[WRIST]))
            if pw:
                parts.append(normalize_keypoints(project(p1.keypoints, p1.intrinsics))
                             - normalize_keypoints(project(p2.keypoints, p2.intrinsics)))
    return np.concatenate([np.sign(x).ravel() for x in parts])


def recycle_objective(p1, gt, weights, p2=None, corr_enabled=False, corr_grad="both"):
    """Full per-sample objective with gradients for both phases.

    ``p2=None`` is the single-phase baseline (recycle disabled). With
    ``corr_grad="phase2"`` the self-correlation gradient reaches only the
    recycled prediction. Returns ``(breakdown, grad_phase1, grad_phase2 or None)``.
    """
    zero = (0.0, 0.0, 0.0)
    ori, g1 = dist_terms(p1, gt, weights, with_grad=True)
    g1 = PhaseGrad(weights.alpha * g1.vertices, weights.alpha * g1.keypoints,
                   weights.alpha * g1.intrinsics)
    g2 = None
    rec, corr = zero, zero
    if p2 is not None:
        rec, gr = dist_terms(p2, gt, weights, with_grad=True)
        g2 = PhaseGrad(weights.beta * gr.vertices, weights.beta * gr.keypoints,
                       weights.beta * gr.intrinsics)
        if corr_enabled:
            corr, gc1, gc2 = corr_terms(p1, p2, weights, with_grad=True)
            if corr_grad == "both":
                g1.add_(gc1, weights.gamma)
            elif corr_grad != "phase2":
                raise ValueError(f"corr_grad must be 'both' or 'phase2', got {corr_grad!r}")
            g2.add_(gc2, weights.gamma)
    breakdown = loss_total(ori, rec, corr, weights)
    return breakdown, g1, g2
