"""Procrustes-aligned evaluation metrics (PA-MPJPE, PA-MPVPE, F-score)."""
import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def procrustes_align(pred, gt):
    """Similarity (s, R, t) minimizing sum ||s R pred_i + t - gt_i||^2, det(R) = +1."""
    X = np.asarray(pred, dtype=np.float64)
    Y = np.asarray(gt, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise AlignmentError(f"expected matching (n, 3) arrays, got {X.shape} and {Y.shape}")
    if X.shape[0] < 3:
        raise AlignmentError("need at least 3 correspondences")
    mu_x, mu_y = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mu_x, Y - mu_y
    sy = np.linalg.svd(Yc, compute_uv=False)
    if sy[0] == 0 or sy[1] <= 1e-12 * sy[0]:
        raise AlignmentError("ground truth is degenerate (centered rank < 2)")
    var_x = np.sum(Xc * Xc)
    if var_x == 0:
        raise AlignmentError("prediction points all coincide")
    H = Xc.T @ Yc
    U, S, Vt = np.linalg.svd(H)
    D = np.ones(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        D[-1] = -1.0
    R = (Vt.T * D) @ U.T
    s = float(np.sum(S * D) / var_x)
    t = mu_y - s * R @ mu_x
    return SimilarityTransform(s, R, t)


def mean_point_error(pred, gt):
    return float(np.mean(np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=1)))


def pa_error_mm(pred, gt):
    """Mean Euclidean distance after Procrustes alignment, in millimeters."""
    T = procrustes_align(pred, gt)
    return 1000.0 * mean_point_error(T.apply(pred), gt)


def pa_mpjpe(pred, gt):
    return pa_error_mm(getattr(pred, "points", pred), getattr(gt, "points", gt))


def pa_mpvpe(pred, gt, aligned=True):
    """Per-vertex error in mm; ``aligned=False`` gives plain (unaligned) MPVPE."""
    p = getattr(pred, "vertices", pred)
    g = getattr(gt, "vertices", gt)
    if aligned:
        return pa_error_mm(p, g)
    return 1000.0 * mean_point_error(p, g)


def precision_recall(pred, gt, tau):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    d_pred, _ = cKDTree(gt).query(pred, k=1)
    d_gt, _ = cKDTree(pred).query(gt, k=1)
    return float(np.mean(d_pred <= tau)), float(np.mean(d_gt <= tau))


def f_score(pred, gt, tau):
    if not tau > 0:
        raise ValueError(f"threshold must be positive, got {tau}")
    p, r = precision_recall(pred, gt, tau)
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def aligned_f_score(pred, gt, tau):
    T = procrustes_align(pred, gt)
    return f_score(T.apply(pred), gt, tau)


@dataclass(frozen=True)
class MetricsReport:
    pa_mpjpe_mm: float
    pa_mpvpe_mm: float
    f_at_5mm: float
    f_at_15mm: float
    sample_count: int

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(asdict(self)), lineterminator="\n")
        w.writeheader()
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(self).items()})
        return buf.getvalue()

    def table(self, title="Model"):
        head = f"{'Method':<16}|| PA-MPJPE | PA-MPVPE || F@5mm | F@15mm"
        row = (f"{title:<16}|| {self.pa_mpjpe_mm:8.3f} | {self.pa_mpvpe_mm:8.3f} || "
               f"{self.f_at_5mm:5.3f} | {self.f_at_15mm:6.3f}")
        return f"{head}\n{'-' * len(head)}\n{row}\n"


def evaluate_predictions(pred_keypoints, gt_keypoints, pred_vertices, gt_vertices, f_on="vertices"):
    """Aggregate per-sample metrics by their mean, in sample order."""
    n = len(gt_keypoints)
    if n == 0:
        raise ValueError("cannot evaluate an empty set")
    jp, vp, f5, f15 = [], [], [], []
    for i in range(n):
        try:
            jp.append(pa_error_mm(pred_keypoints[i], gt_keypoints[i]))
            vp.append(pa_error_mm(pred_vertices[i], gt_vertices[i]))
            if f_on == "vertices":
                pa, ga = pred_vertices[i], gt_vertices[i]
            elif f_on == "keypoints":
                pa, ga = pred_keypoints[i], gt_keypoints[i]
            else:
                raise ValueError(f"f_on must be 'vertices' or 'keypoints', got {f_on!r}")
            T = procrustes_align(pa, ga)
            aligned = T.apply(pa)
            f5.append(f_score(aligned, ga, 0.005))
            f15.append(f_score(aligned, ga, 0.015))
        except (AlignmentError, ValueError) as exc:
            raise type(exc)(f"sample {i}: {exc}") from exc
    return MetricsReport(float(np.mean(jp)), float(np.mean(vp)), float(np.mean(f5)),
                         float(np.mean(f15)), n)
