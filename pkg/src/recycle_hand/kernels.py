"""Hot loops: z-buffered triangle fill.

Two implementations with identical arithmetic: a numba kernel walking pixels
per triangle, and a numpy fallback that vectorizes each triangle's bounding
box. Both produce bit-identical buffers; ``fill_triangles`` dispatches on the
backend flag in :mod:`recycle_hand._accel`.
"""
import numpy as np

from ._accel import njit, use_numba


def _prepare(uv, inv_z, faces, face_colors, valid):
    return (np.ascontiguousarray(uv, dtype=np.float64),
            np.ascontiguousarray(inv_z, dtype=np.float64),
            np.ascontiguousarray(faces, dtype=np.int64),
            np.ascontiguousarray(face_colors, dtype=np.uint8),
            np.ascontiguousarray(valid, dtype=np.bool_))


@njit
def _fill_numba(uv, inv_z, faces, face_colors, valid, width, height, rgba, zbuf):
    for f in range(faces.shape[0]):
        if not valid[f]:
            continue
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        x0 = uv[i0, 0]
        y0 = uv[i0, 1]
        x1 = uv[i1, 0]
        y1 = uv[i1, 1]
        x2 = uv[i2, 0]
        y2 = uv[i2, 1]
        q0 = inv_z[i0]
        q1 = inv_z[i1]
        q2 = inv_z[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        if area < 0.0:
            x1, x2 = x2, x1
            y1, y2 = y2, y1
            q1, q2 = q2, q1
            area = -area
        # top-left rule: an edge owns its boundary pixels iff dy < 0 or (dy == 0 and dx > 0)
        own0 = (y2 - y1) < 0.0 or ((y2 - y1) == 0.0 and (x2 - x1) > 0.0)
        own1 = (y0 - y2) < 0.0 or ((y0 - y2) == 0.0 and (x0 - x2) > 0.0)
        own2 = (y1 - y0) < 0.0 or ((y1 - y0) == 0.0 and (x1 - x0) > 0.0)
        jmin = max(int(np.ceil(min(x0, min(x1, x2)) - 0.5)), 0)
        jmax = min(int(np.floor(max(x0, max(x1, x2)) - 0.5)), width - 1)
        imin = max(int(np.ceil(min(y0, min(y1, y2)) - 0.5)), 0)
        imax = min(int(np.floor(max(y0, max(y1, y2)) - 0.5)), height - 1)
        for i in range(imin, imax + 1):
            py = i + 0.5
            for j in range(jmin, jmax + 1):
                px = j + 0.5
                w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not own0) or (w1 == 0.0 and not own1) or (w2 == 0.0 and not own2):
                    continue
                q = (w0 / area) * q0 + (w1 / area) * q1 + (w2 / area) * q2
                if q > zbuf[i, j]:
                    zbuf[i, j] = q
                    rgba[i, j, 0] = face_colors[f, 0]
                    rgba[i, j, 1] = face_colors[f, 1]
                    rgba[i, j, 2] = face_colors[f, 2]
                    rgba[i, j, 3] = 255


def _owns(dx, dy):
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


def _fill_numpy(uv, inv_z, faces, face_colors, valid, width, height, rgba, zbuf):
    for f in np.flatnonzero(valid):
        i0, i1, i2 = faces[f]
        x0, y0 = uv[i0]
        x1, y1 = uv[i1]
        x2, y2 = uv[i2]
        q0, q1, q2 = inv_z[i0], inv_z[i1], inv_z[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        if area < 0.0:
            x1, x2 = x2, x1
            y1, y2 = y2, y1
            q1, q2 = q2, q1
            area = -area
        own0 = _owns(x2 - x1, y2 - y1)
        own1 = _owns(x0 - x2, y0 - y2)
        own2 = _owns(x1 - x0, y1 - y0)
        jmin = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
        jmax = min(int(np.floor(max(x0, x1, x2) - 0.5)), width - 1)
        imin = max(int(np.ceil(min(y0, y1, y2) - 0.5)), 0)
        imax = min(int(np.floor(max(y0, y1, y2) - 0.5)), height - 1)
        if jmin > jmax or imin > imax:
            continue
        py = (np.arange(imin, imax + 1) + 0.5)[:, None]
        px = (np.arange(jmin, jmax + 1) + 0.5)[None, :]
        w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
        w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not own0:
            inside &= w0 != 0.0
        if not own1:
            inside &= w1 != 0.0
        if not own2:
            inside &= w2 != 0.0
        q = (w0 / area) * q0 + (w1 / area) * q1 + (w2 / area) * q2
        region = zbuf[imin:imax + 1, jmin:jmax + 1]
        win = inside & (q > region)
        region[win] = q[win]
        rgba[imin:imax + 1, jmin:jmax + 1][win] = (*face_colors[f], 255)


def fill_triangles(uv, inv_z, faces, face_colors, valid, width, height, backend=None):
    """Rasterize flat-colored triangles into an RGBA image and inverse-depth buffer.

    ``inv_z`` is 1/z per vertex; it is interpolated linearly in screen space,
    which gives perspective-correct depth. Greater inverse depth (nearer) wins;
    on exact ties the earlier face is kept. Empty pixels keep inverse depth 0.
    Pixel (i, j) is sampled at its center (j + 0.5, i + 0.5).
    """
    args = _prepare(uv, inv_z, faces, face_colors, valid)
    rgba = np.zeros((height, width, 4), dtype=np.uint8)
    zbuf = np.zeros((height, width), dtype=np.float64)
    if backend is None:
        backend = "numba" if use_numba() else "numpy"
    if backend == "numba":
        _fill_numba(*args, int(width), int(height), rgba, zbuf)
    elif backend == "numpy":
        _fill_numpy(*args, int(width), int(height), rgba, zbuf)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return rgba, zbuf
