"""Fixed-topology stylized hand: template, coarse-to-fine upsampling, joint regression
and a procedural ground-truth sample generator.

The hand is six closed tubes (palm + five fingers). Each tube is parameterized
by an axial coordinate ``t`` in [0, 1] and an angle around the axis. The coarse
mesh samples that grid sparsely; fine vertices are bilinear combinations of
their four surrounding coarse vertices, which makes the upsampling matrix
row-stochastic by construction.
"""
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, project

TEMPLATE_FORMAT_VERSION = 1
NUM_KEYPOINTS = 21
WRIST = 0
FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

# (rings, angular segments) per part
FINE_PALM = (13, 22)
FINE_FINGER = (12, 8)
COARSE_PALM = (7, 9)
COARSE_FINGER = (6, 4)
# fine ring indices of the PIP and DIP joints; MCP is ring 0
PIP_RING, DIP_RING = 5, 8

TEMPLATE_FILE = "hand_template_v1.npz"


class InvalidInputError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class UpsampleMatrix:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise InvalidInputError("upsample matrix must be 2-D")
        if np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise InvalidInputError("upsample rows must be non-negative and sum to 1")
        object.__setattr__(self, "matrix", _freeze(m))

    @property
    def shape(self):
        return self.matrix.shape


@dataclass(frozen=True)
class HandMesh:
    vertices: np.ndarray
    resolution: str = "fine"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidInputError(f"vertices must be (n, 3), got {v.shape}")
        if self.resolution not in ("coarse", "fine"):
            raise InvalidInputError(f"unknown resolution {self.resolution!r}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("mesh has non-finite coordinates")
        object.__setattr__(self, "vertices", v)

    @property
    def n(self):
        return self.vertices.shape[0]


@dataclass(frozen=True)
class Keypoints3D:
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.shape != (NUM_KEYPOINTS, 3):
            raise InvalidInputError(f"keypoints must be ({NUM_KEYPOINTS}, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("keypoints have non-finite coordinates")
        object.__setattr__(self, "points", p)

    @property
    def wrist(self):
        return self.points[WRIST]


@dataclass(frozen=True)
class HandTemplate:
    rest_vertices: np.ndarray
    faces: np.ndarray
    coarse_count: int
    upsample: UpsampleMatrix
    joint_regressor: np.ndarray
    coarse_rest_vertices: np.ndarray
    # articulation metadata
    vertex_part: np.ndarray
    vertex_t: np.ndarray
    wrist_vertices: np.ndarray
    finger_joint_t: np.ndarray  # (5, 3) axial t of MCP/PIP/DIP
    finger_origin: np.ndarray  # (5, 3)
    finger_axis: np.ndarray  # (5, 3) unit, base -> tip
    finger_length: np.ndarray  # (5,)
    finger_flex_axis: np.ndarray  # (5, 3) unit
    finger_abduct_axis: np.ndarray  # (5, 3) unit
    version: int = TEMPLATE_FORMAT_VERSION
    _hash: str = field(default="", compare=False, repr=False)

    def __post_init__(self):
        for name in ("rest_vertices", "joint_regressor", "coarse_rest_vertices", "vertex_t",
                     "finger_joint_t", "finger_origin", "finger_axis", "finger_length",
                     "finger_flex_axis", "finger_abduct_axis"):
            object.__setattr__(self, name, _freeze(np.asarray(getattr(self, name), dtype=np.float64)))
        for name in ("faces", "vertex_part", "wrist_vertices"):
            object.__setattr__(self, name, _freeze(np.asarray(getattr(self, name), dtype=np.int64)))
        self.validate()
        object.__setattr__(self, "_hash", self._compute_hash())

    @property
    def v_fine(self):
        return self.rest_vertices.shape[0]

    @property
    def num_keypoints(self):
        return self.joint_regressor.shape[0]

    @property
    def hash(self):
        return self._hash

    def validate(self):
        nf = self.v_fine
        f = self.faces
        if f.ndim != 2 or f.shape[1] != 3:
            raise InvalidInputError("faces must be (f, 3)")
        if f.min() < 0 or f.max() >= nf:
            raise InvalidInputError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise InvalidInputError("degenerate face with repeated indices")
        J = self.joint_regressor
        if J.shape != (NUM_KEYPOINTS, nf):
            raise InvalidInputError(f"joint regressor must be ({NUM_KEYPOINTS}, {nf})")
        if np.any(J < 0) or not np.allclose(J.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise InvalidInputError("joint regressor rows must be non-negative and sum to 1")
        if self.upsample.shape != (nf, self.coarse_count):
            raise InvalidInputError(
                f"upsample matrix shape {self.upsample.shape} != ({nf}, {self.coarse_count})"
            )
        if self.coarse_rest_vertices.shape != (self.coarse_count, 3):
            raise InvalidInputError("coarse rest vertices do not match coarse_count")
        if edge_face_counts(f).max() > 2:
            raise InvalidInputError("non-manifold edge shared by more than two faces")

    def _compute_hash(self):
        h = hashlib.sha256()
        h.update(str(self.version).encode())
        for arr in (self.rest_vertices, self.faces, self.upsample.matrix, self.joint_regressor):
            h.update(np.ascontiguousarray(arr).astype("<f8" if arr.dtype.kind == "f" else "<i8").tobytes())
        return h.hexdigest()


def edge_face_counts(faces):
    """Number of faces incident to each undirected edge."""
    f = np.asarray(faces)
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges.sort(axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


# ---------------------------------------------------------------------------
# template construction


@dataclass
class _Tube:
    origin: np.ndarray
    axis: np.ndarray
    length: float
    e1: np.ndarray
    e2: np.ndarray
    radius_a: tuple  # (at t=0, at t=1) along e1
    radius_b: tuple  # along e2
    tip_extension: float

    def surface(self, t, phi):
        a = self.radius_a[0] + (self.radius_a[1] - self.radius_a[0]) * t
        b = self.radius_b[0] + (self.radius_b[1] - self.radius_b[0]) * t
        return (self.origin + self.axis * self.length * t
                + a * np.cos(phi) * self.e1 + b * np.sin(phi) * self.e2)

    def base_center(self):
        return self.origin.copy()

    def tip_center(self):
        return self.origin + self.axis * (self.length + self.tip_extension)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _hand_tubes(center):
    """Palm first, then thumb..pinky. Fingers point to -y, palm faces -z (the camera)."""
    c = np.asarray(center, dtype=np.float64)
    ex, ez = np.array([1.0, 0, 0]), np.array([0, 0, 1.0])
    down = np.array([0, -1.0, 0])
    tubes = [_Tube(c + [0, 0.045, 0], down, 0.080, ex, ez, (0.030, 0.040), (0.011, 0.012), 0.0)]
    thumb_axis = _unit([0.75, -0.66, -0.05])
    thumb_e1 = _unit(np.cross(thumb_axis, ez))
    thumb_e2 = _unit(np.cross(thumb_e1, thumb_axis))
    tubes.append(_Tube(c + [0.024, 0.024, -0.004], thumb_axis, 0.068, thumb_e1, thumb_e2,
                       (0.0105, 0.0085), (0.0095, 0.0080), 0.006))
    for x, length, r in ((0.027, 0.076, 0.0088), (0.009, 0.083, 0.0090),
                         (-0.009, 0.078, 0.0086), (-0.027, 0.063, 0.0078)):
        tubes.append(_Tube(c + [x, -0.030, 0], down, length, ex, ez,
                           (r, 0.85 * r), (r, 0.85 * r), 0.7 * r))
    return tubes


def _tube_vertices(tube, rings, segs):
    """Return (vertices, t, phi) in the order: base center, rings (ring-major), tip center."""
    t = np.repeat(np.linspace(0.0, 1.0, rings), segs)
    phi = np.tile(2 * np.pi * np.arange(segs) / segs, rings)
    ring_pts = tube.surface(t[:, None], phi[:, None])
    verts = np.vstack([tube.base_center(), ring_pts, tube.tip_center()])
    t_all = np.concatenate([[0.0], t, [1.0 + tube.tip_extension / tube.length]])
    return verts, t_all


def _tube_faces(rings, segs, offset):
    base, tip = 0, 1 + rings * segs

    def ring(i, j):
        return 1 + i * segs + (j % segs)

    faces = []
    for j in range(segs):
        faces.append((base, ring(0, j + 1), ring(0, j)))
    for i in range(rings - 1):
        for j in range(segs):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j + 1), ring(i + 1, j)
            faces.append((a, b, c))
            faces.append((a, c, d))
    for j in range(segs):
        faces.append((tip, ring(rings - 1, j), ring(rings - 1, j + 1)))
    return np.asarray(faces, dtype=np.int64) + offset


def _tube_upsample(fine, coarse):
    """Bilinear (axial x angular) weights of fine tube vertices over coarse ones."""
    fr, fs = fine
    cr, cs = coarse
    nf, nc = fr * fs + 2, cr * cs + 2
    W = np.zeros((nf, nc))
    W[0, 0] = 1.0
    W[nf - 1, nc - 1] = 1.0
    for i in range(fr):
        u = i * (cr - 1) / (fr - 1)
        i0 = min(int(np.floor(u)), cr - 2)
        a = u - i0
        for j in range(fs):
            w = j * cs / fs
            j0 = int(np.floor(w))
            b = w - j0
            j0 %= cs
            j1 = (j0 + 1) % cs
            row = 1 + i * fs + j
            for ii, wa in ((i0, 1 - a), (i0 + 1, a)):
                for jj, wb in ((j0, 1 - b), (j1, b)):
                    W[row, 1 + ii * cs + jj] += wa * wb
    return W


def build_template(center=(0.0, 0.0, 0.6)):
    """Construct the stylized 778-vertex hand deterministically."""
    tubes = _hand_tubes(center)
    fine_specs = [FINE_PALM] + [FINE_FINGER] * 5
    coarse_specs = [COARSE_PALM] + [COARSE_FINGER] * 5

    coarse_blocks, rest_blocks, faces, parts, ts = [], [], [], [], []
    up_blocks = []
    f_off = 0
    for pid, (tube, fs, cs) in enumerate(zip(tubes, fine_specs, coarse_specs)):
        cverts, _ = _tube_vertices(tube, *cs)
        _, ft = _tube_vertices(tube, *fs)
        W = _tube_upsample(fs, cs)
        # fine rest geometry is exactly the upsampled coarse geometry
        rest_blocks.append(W @ cverts)
        coarse_blocks.append(cverts)
        up_blocks.append(W)
        faces.append(_tube_faces(*fs, f_off))
        parts.append(np.full(len(ft), pid))
        ts.append(ft)
        f_off += len(ft)

    n_fine = sum(b.shape[0] for b in up_blocks)
    n_coarse = sum(b.shape[1] for b in up_blocks)
    U = np.zeros((n_fine, n_coarse))
    r = c = 0
    for W in up_blocks:
        U[r:r + W.shape[0], c:c + W.shape[1]] = W
        r += W.shape[0]
        c += W.shape[1]
    rest = np.vstack(rest_blocks)
    vertex_part = np.concatenate(parts)
    vertex_t = np.concatenate(ts)

    palm_rings, palm_segs = FINE_PALM
    wrist_vertices = 1 + np.arange(palm_segs)  # first palm ring
    J = np.zeros((NUM_KEYPOINTS, n_fine))
    J[WRIST, wrist_vertices] = 1.0 / palm_segs
    fr, fsg = FINE_FINGER
    start = palm_rings * palm_segs + 2
    per_finger = fr * fsg + 2
    for f in range(5):
        base = start + f * per_finger
        for k, ring in enumerate((0, PIP_RING, DIP_RING)):
            idx = base + 1 + ring * fsg + np.arange(fsg)
            J[1 + 4 * f + k, idx] = 1.0 / fsg
        J[1 + 4 * f + 3, base + per_finger - 1] = 1.0

    fingers = tubes[1:]
    joint_t = np.array([[0.0, PIP_RING / (fr - 1), DIP_RING / (fr - 1)]] * 5)
    flex_axes, abduct_axes = [], []
    for i, tb in enumerate(fingers):
        # thumb flexes across the palm; the others curl toward the camera side
        flex = _unit(np.cross(tb.axis, [0, 0, -1.0])) if i else _unit(np.cross(tb.axis, tb.e1))
        flex_axes.append(flex)
        abduct_axes.append(_unit(np.cross(tb.axis, flex)))

    return HandTemplate(
        rest_vertices=rest,
        faces=np.vstack(faces),
        coarse_count=n_coarse,
        upsample=UpsampleMatrix(U),
        joint_regressor=J,
        coarse_rest_vertices=np.vstack(coarse_blocks),
        vertex_part=vertex_part,
        vertex_t=vertex_t,
        wrist_vertices=wrist_vertices,
        finger_joint_t=joint_t,
        finger_origin=np.array([tb.origin for tb in fingers]),
        finger_axis=np.array([tb.axis for tb in fingers]),
        finger_length=np.array([tb.length for tb in fingers]),
        finger_flex_axis=np.array(flex_axes),
        finger_abduct_axis=np.array(abduct_axes),
    )


# ---------------------------------------------------------------------------
# template file I/O

_ARRAY_FIELDS = ("rest_vertices", "faces", "joint_regressor", "coarse_rest_vertices",
                 "vertex_part", "vertex_t", "wrist_vertices", "finger_joint_t",
                 "finger_origin", "finger_axis", "finger_length", "finger_flex_axis",
                 "finger_abduct_axis")


def save_template(template, path):
    header = np.array([template.version, template.coarse_count, template.v_fine,
                       template.num_keypoints], dtype="<i8")
    arrays = {name: getattr(template, name) for name in _ARRAY_FIELDS}
    np.savez_compressed(path, header=header, upsample=template.upsample.matrix, **arrays)


def load_template(path=None):
    """Load a template file; with no path, the packaged default template."""
    if path is None:
        with resources.as_file(resources.files("recycle_hand") / "data" / TEMPLATE_FILE) as p:
            return load_template(p)
    with np.load(Path(path)) as data:
        version, v_coarse, v_fine, k = (int(x) for x in data["header"])
        if version != TEMPLATE_FORMAT_VERSION:
            raise InvalidInputError(f"unsupported template format version {version}")
        kwargs = {name: data[name] for name in _ARRAY_FIELDS}
        template = HandTemplate(coarse_count=v_coarse, upsample=UpsampleMatrix(data["upsample"]),
                                version=version, **kwargs)
    if template.v_fine != v_fine or template.num_keypoints != k:
        raise InvalidInputError("template header does not match array shapes")
    return template


# ---------------------------------------------------------------------------
# linear maps


def upsample_mesh(coarse, template):
    if coarse.resolution != "coarse":
        raise InvalidInputError("upsample_mesh expects a coarse mesh")
    if coarse.n != template.coarse_count:
        raise InvalidInputError(f"coarse mesh has {coarse.n} vertices, template expects "
                                f"{template.coarse_count}")
    return HandMesh(template.upsample.matrix @ coarse.vertices, "fine")


def regress_keypoints(mesh, template):
    if mesh.resolution != "fine" or mesh.n != template.v_fine:
        raise InvalidInputError(f"regress_keypoints expects a fine mesh of {template.v_fine} vertices")
    return Keypoints3D(template.joint_regressor @ mesh.vertices)


# ---------------------------------------------------------------------------
# procedural samples


@dataclass(frozen=True)
class DeformConfig:
    """Bounds for the procedural pose, rigid placement and camera sampling."""

    flex_max: tuple = (0.9, 1.1, 0.8)  # MCP, PIP, DIP, radians
    abduction_max: float = 0.15
    rotation_max: tuple = (0.35, 0.35, 0.6)  # about x, y, z
    scale_range: tuple = (0.92, 1.08)
    shift_max: tuple = (0.03, 0.03, 0.08)  # translation bounds in meters
    focal_range: tuple = (95.0, 115.0)
    principal_jitter: float = 2.0
    image_size: tuple = (64, 64)  # width, height
    margin: float = 1.0
    max_retries: int = 50

    def __post_init__(self):
        vals = np.concatenate([np.ravel(v) for v in (
            self.flex_max, self.abduction_max, self.rotation_max, self.scale_range,
            self.shift_max, self.focal_range, self.principal_jitter, self.margin)])
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("deformation bounds must be finite")

    @classmethod
    def identity(cls, **kw):
        base = dict(flex_max=(0.0, 0.0, 0.0), abduction_max=0.0, rotation_max=(0.0, 0.0, 0.0),
                    scale_range=(1.0, 1.0), shift_max=(0.0, 0.0, 0.0))
        base.update(kw)
        return cls(**base)


def _rodrigues(axis, angle):
    k = np.asarray(axis, dtype=np.float64)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def euler_rotation(rx, ry, rz):
    return _rodrigues([0, 0, 1.0], rz) @ _rodrigues([0, 1.0, 0], ry) @ _rodrigues([1.0, 0, 0], rx)


def articulate(template, flex, abduction):
    """Apply per-finger rigid joint rotations to the rest mesh.

    ``flex`` is (5, 3) angles for MCP/PIP/DIP, ``abduction`` (5,) MCP side angles.
    Rotations are applied distal-first so each pivot is still at rest when used.
    Zero angles leave vertices bit-identical.
    """
    v = template.rest_vertices.copy()
    flex = np.asarray(flex, dtype=np.float64).reshape(5, 3)
    abduction = np.asarray(abduction, dtype=np.float64).reshape(5)
    for f in range(5):
        sel_finger = template.vertex_part == f + 1
        origin = template.finger_origin[f]
        axis = template.finger_axis[f]
        length = template.finger_length[f]
        for j in (2, 1, 0):
            tj = template.finger_joint_t[f, j]
            R = _rodrigues(template.finger_flex_axis[f], flex[f, j])
            if j == 0:
                R = R @ _rodrigues(template.finger_abduct_axis[f], abduction[f])
            sel = sel_finger & (template.vertex_t > tj + 1e-9)
            pivot = origin + axis * length * tj
            d = v[sel] - pivot
            v[sel] = v[sel] + d @ (R - np.eye(3)).T
    return v


def rigid_place(vertices, rotation, scale, shift, center):
    """Similarity about ``center``: x -> x + (sR - I)(x - c) + shift."""
    A = scale * np.asarray(rotation) - np.eye(3)
    return vertices + (vertices - center) @ A.T + np.asarray(shift)


def generate_sample(template, seed, config=None):
    """Deterministic procedural (mesh, keypoints, intrinsics) for ``seed``.

    Poses are resampled from the same stream until every projected vertex lies
    inside the image with ``config.margin`` pixels to spare.
    """
    config = config or DeformConfig()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF))
    width, height = config.image_size
    center = template.rest_vertices.mean(axis=0)
    flex_max = np.asarray(config.flex_max, dtype=np.float64)
    rot_max = np.asarray(config.rotation_max, dtype=np.float64)
    shift_max = np.asarray(config.shift_max, dtype=np.float64)
    for _ in range(config.max_retries):
        flex = rng.uniform(0.0, 1.0, size=(5, 3)) * flex_max
        abd = rng.uniform(-1.0, 1.0, size=5) * config.abduction_max
        angles = rng.uniform(-1.0, 1.0, size=3) * rot_max
        scale = rng.uniform(*config.scale_range)
        shift = rng.uniform(-1.0, 1.0, size=3) * shift_max
        f = rng.uniform(*config.focal_range)
        aspect = rng.uniform(0.98, 1.02)
        jitter = rng.uniform(-1.0, 1.0, size=2) * config.principal_jitter

        verts = articulate(template, flex, abd)
        verts = rigid_place(verts, euler_rotation(*angles), scale, shift, center)
        mc = CameraIntrinsics(f, f * aspect, width / 2 + jitter[0], height / 2 + jitter[1],
                              width, height)
        if np.any(verts[:, 2] <= 1e-3):
            continue
        uv = project(verts, mc)
        m = config.margin
        if (uv[:, 0].min() >= m and uv[:, 0].max() <= width - m
                and uv[:, 1].min() >= m and uv[:, 1].max() <= height - m):
            mesh = HandMesh(verts, "fine")
            return mesh, regress_keypoints(mesh, template), mc
    raise GenerationError(f"seed {seed}: hand left the frustum after {config.max_retries} retries")
