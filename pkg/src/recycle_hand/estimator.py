"""Small differentiable image -> hand-mesh regressor with exact gradients.

Fixed featurizer (bilinear downsample to grayscale plus per-channel color
statistics), two tanh layers, and linear heads for the coarse vertices and the
camera intrinsics. Fine vertices and keypoints come from the template's fixed
linear maps, so gradients on them flow back through those maps.
"""
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import PhaseOutput

CHECKPOINT_MAGIC = b"RHCKPT\x00\x00"
CHECKPOINT_VERSION = 1
_SOFTPLUS_SHIFT = np.log(np.e - 1.0)  # softplus(0 + shift) == 1


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    input_size: tuple = (64, 64)  # width, height
    feature_size: int = 32
    hidden: int = 128
    # meters per unit of the vertex head's weight path; the bias carries meters directly
    vertex_scale: float = 0.01
    base_intrinsics: tuple = (105.0, 105.0, 32.0, 32.0)
    principal_scale: float = 4.0  # pixels per unit of the principal-point head
    init_seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["base_intrinsics"] = list(self.base_intrinsics)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        d["base_intrinsics"] = tuple(d["base_intrinsics"])
        return cls(**d)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _apply_rows(M, X):
    """(m, n) @ (B, n, 3) -> (B, m, 3) as one BLAS call."""
    return np.tensordot(X, M, axes=([1], [1])).transpose(0, 2, 1)


def bilinear_matrix(n_out, n_in):
    """Row-stochastic (n_out, n_in) half-pixel-centered bilinear resampling matrix."""
    M = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        a = src - i0
        M[i, i0] += 1.0 - a
        M[i, i1] += a
    return M


class Featurizer:
    def __init__(self, input_size, feature_size):
        self.width, self.height = input_size
        self.feature_size = feature_size
        self.Ry = bilinear_matrix(feature_size, self.height)
        self.Rx = bilinear_matrix(feature_size, self.width)

    @property
    def dim(self):
        return self.feature_size * self.feature_size + 6

    def __call__(self, images):
        imgs = np.asarray(images)
        if imgs.ndim == 3:
            imgs = imgs[None]
        if imgs.shape[1:] != (self.height, self.width, 3):
            raise InvalidInputError(f"expected images of shape ({self.height}, {self.width}, 3), "
                                    f"got {imgs.shape[1:]}")
        x = imgs.astype(np.float64) / 255.0
        gray = x @ np.array([0.299, 0.587, 0.114])
        small = np.matmul(np.matmul(self.Ry, gray), self.Rx.T)
        flat = x.reshape(x.shape[0], -1, 3)
        return np.concatenate([small.reshape(x.shape[0], -1), flat.mean(axis=1), flat.std(axis=1)],
                              axis=1)


@dataclass(frozen=True)
class ParamLayout:
    blocks: tuple  # ((name, shape), ...)

    @property
    def size(self):
        return sum(int(np.prod(s)) for _, s in self.blocks)

    def slices(self):
        out, o = {}, 0
        for name, shape in self.blocks:
            n = int(np.prod(shape))
            out[name] = (slice(o, o + n), shape)
            o += n
        return out

    def unpack(self, theta):
        theta = np.asarray(theta)
        if theta.shape != (self.size,):
            raise InvalidInputError(f"theta has shape {theta.shape}, layout needs ({self.size},)")
        return {name: theta[sl].reshape(shape) for name, (sl, shape) in self.slices().items()}

    def to_json(self):
        return [[name, list(shape)] for name, shape in self.blocks]

    @classmethod
    def from_json(cls, data):
        return cls(tuple((name, tuple(shape)) for name, shape in data))


@dataclass
class EstimatorOutput:
    coarse_vertices: np.ndarray  # (B, v_coarse, 3)
    fine_vertices: np.ndarray  # (B, v_fine, 3)
    keypoints: np.ndarray  # (B, 21, 3)
    intrinsics: np.ndarray  # (B, 4)
    cache: dict = field(default=None, repr=False)

    def __len__(self):
        return self.coarse_vertices.shape[0]

    def phase(self, i):
        return PhaseOutput(self.fine_vertices[i], self.keypoints[i], self.intrinsics[i])


class Estimator:
    """Holds the architecture; parameters live in a flat ``theta`` passed per call."""

    def __init__(self, template, config=None):
        self.template = template
        self.config = config or EstimatorConfig()
        self.featurizer = Featurizer(self.config.input_size, self.config.feature_size)
        D, H = self.featurizer.dim, self.config.hidden
        nv = 3 * template.coarse_count
        self.layout = ParamLayout((
            ("W1", (H, D)), ("b1", (H,)),
            ("W2", (H, H)), ("b2", (H,)),
            ("Wv", (nv, H)), ("bv", (nv,)),
            ("Wi", (4, H)), ("bi", (4,)),
        ))
        self._U = template.upsample.matrix
        self._J = template.joint_regressor
        self._JU = self._J @ self._U

    # -- parameters ----------------------------------------------------------------

    def init_params(self, seed=None):
        seed = self.config.init_seed if seed is None else seed
        rng = np.random.default_rng(seed)
        theta = np.empty(self.layout.size)
        shapes = dict(self.layout.blocks)
        for name, (sl, shape) in self.layout.slices().items():
            # biases share the fan-in of their weight matrix
            fan_in = shapes["W" + name[1:]][1]
            bound = 1.0 / np.sqrt(fan_in)
            theta[sl] = rng.uniform(-bound, bound, size=int(np.prod(shape)))
        p = self.layout.unpack(theta)
        p["bv"][:] = self.template.coarse_rest_vertices.ravel()
        p["bi"][:] = 0.0
        return theta

    def intrinsics_map(self, raw):
        """Map raw head outputs (..., 4) to (fx, fy, cx, cy); focal lengths stay positive."""
        fx0, fy0, cx0, cy0 = self.config.base_intrinsics
        s = self.config.principal_scale
        raw = np.asarray(raw, dtype=np.float64)
        out = np.empty_like(raw)
        out[..., 0] = fx0 * _softplus(raw[..., 0] + _SOFTPLUS_SHIFT)
        out[..., 1] = fy0 * _softplus(raw[..., 1] + _SOFTPLUS_SHIFT)
        out[..., 2] = cx0 + s * raw[..., 2]
        out[..., 3] = cy0 + s * raw[..., 3]
        return out

    # -- forward / backward ----------------------------------------------------------

    def features(self, images):
        return self.featurizer(images)

    def forward(self, images, theta, features=None):
        if not np.all(np.isfinite(theta)):
            raise InvalidInputError("parameters are not finite")
        p = self.layout.unpack(theta)
        x = self.features(images) if features is None else features
        h1 = np.tanh(x @ p["W1"].T + p["b1"])
        h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
        c = p["bv"] + self.config.vertex_scale * (h2 @ p["Wv"].T)
        raw = h2 @ p["Wi"].T + p["bi"]
        B = x.shape[0]
        coarse = c.reshape(B, -1, 3)
        fine = _apply_rows(self._U, coarse)
        kp = _apply_rows(self._J, fine)
        return EstimatorOutput(coarse, fine, kp, self.intrinsics_map(raw),
                               cache={"x": x, "h1": h1, "h2": h2, "raw": raw})

    def backward(self, out, theta, d_fine=None, d_keypoints=None, d_intrinsics=None, d_coarse=None):
        """Exact gradient over ``theta`` given upstream gradients on the outputs."""
        p = self.layout.unpack(theta)
        x, h1, h2, raw = (out.cache[k] for k in ("x", "h1", "h2", "raw"))
        B = x.shape[0]
        nc = self.template.coarse_count

        def _arr(g, shape):
            if g is None:
                return np.zeros(shape)
            g = np.asarray(g, dtype=np.float64)
            if g.shape != shape:
                raise InvalidInputError(f"upstream gradient shape {g.shape} != {shape}")
            return g

        gf = _arr(d_fine, out.fine_vertices.shape)
        gk = _arr(d_keypoints, out.keypoints.shape)
        gi = _arr(d_intrinsics, out.intrinsics.shape)
        gc = _arr(d_coarse, out.coarse_vertices.shape)
        gc = gc + _apply_rows(self._U.T, gf) + _apply_rows(self._JU.T, gk)
        dc = gc.reshape(B, 3 * nc)

        fx0, fy0, _, _ = self.config.base_intrinsics
        s = self.config.principal_scale
        draw = np.empty_like(raw)
        draw[:, 0] = gi[:, 0] * fx0 * _sigmoid(raw[:, 0] + _SOFTPLUS_SHIFT)
        draw[:, 1] = gi[:, 1] * fy0 * _sigmoid(raw[:, 1] + _SOFTPLUS_SHIFT)
        draw[:, 2] = gi[:, 2] * s
        draw[:, 3] = gi[:, 3] * s

        grad = np.zeros(self.layout.size)
        g = self.layout.unpack(grad)
        vs = self.config.vertex_scale
        g["bv"][:] = dc.sum(axis=0)
        g["Wv"][:] = vs * (dc.T @ h2)
        g["bi"][:] = draw.sum(axis=0)
        g["Wi"][:] = draw.T @ h2
        dh2 = vs * (dc @ p["Wv"]) + draw @ p["Wi"]
        da2 = dh2 * (1.0 - h2 * h2)
        g["W2"][:] = da2.T @ h1
        g["b2"][:] = da2.sum(axis=0)
        dh1 = da2 @ p["W2"]
        da1 = dh1 * (1.0 - h1 * h1)
        g["W1"][:] = da1.T @ x
        g["b1"][:] = da1.sum(axis=0)
        return grad


# ----------------------------------------------------------------------------
# gradient verification


def relative_error(a, n):
    a, n = float(a), float(n)
    denom = max(abs(a), abs(n))
    return 0.0 if denom == 0.0 else abs(a - n) / denom


def stratified_coords(layout, n_per_block, rng):
    """A few coordinates from every parameter block, so small heads are always probed."""
    out = []
    for name, (sl, _) in layout.slices().items():
        size = sl.stop - sl.start
        out.extend(sl.start + rng.choice(size, size=min(n_per_block, size), replace=False))
    return np.array(out, dtype=np.int64)


def finite_diff_check(value_and_grad, theta, eps=1e-6, coords=None, n_coords=200, rng=None,
                      kink_signature=None, max_resample=20, resolve_digits=4, details=False):
    """Worst relative error between analytic and central-difference gradients.

    ``value_and_grad(theta) -> (value, grad)``. Coordinates are sampled unless
    given. A probe is resampled when it cannot be judged:

    * ``kink_signature(theta)`` (e.g. residual signs of an L1 loss) differs
      between the +eps and -eps points, so the probe straddles a kink;
    * both the analytic and the difference quotient are below the resolvable
      scale ``10**resolve_digits * machine_eps * |value| / eps``, where rounding
      noise of the objective swamps the quotient.

    With ``details=True`` returns ``(worst, n_checked, n_resampled)``.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    theta = np.asarray(theta, dtype=np.float64)
    f0, g = value_and_grad(theta)
    rng = np.random.default_rng(0) if rng is None else rng
    if coords is None:
        coords = rng.choice(theta.size, size=min(n_coords, theta.size), replace=False)
    floor = 10.0 ** resolve_digits * np.finfo(np.float64).eps * max(abs(float(f0)), 1e-300) / eps
    worst, checked, resampled = 0.0, 0, 0
    for i in coords:
        i = int(i)
        for _ in range(max_resample + 1):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += eps
            tm[i] -= eps
            if kink_signature is None or np.array_equal(kink_signature(tp), kink_signature(tm)):
                fd = (value_and_grad(tp)[0] - value_and_grad(tm)[0]) / (2 * eps)
                if max(abs(g[i]), abs(fd)) >= floor:
                    break
            resampled += 1
            i = int(rng.integers(theta.size))
        else:
            continue
        worst = max(worst, relative_error(g[i], fd))
        checked += 1
    return (worst, checked, resampled) if details else worst


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, theta, layout, template_hash, config_hash, extra=None):
    """Deterministic container: magic, version, JSON header length, header, float64 theta."""
    header = {
        "layout": layout.to_json(),
        "template_hash": template_hash,
        "config_hash": config_hash,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    theta = np.ascontiguousarray(theta, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(theta.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise InvalidInputError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    theta = np.frombuffer(data[16 + hlen:], dtype="<f8").astype(np.float64)
    layout = ParamLayout.from_json(header["layout"])
    if theta.size != layout.size:
        raise InvalidInputError("checkpoint theta does not match its layout")
    return theta, layout, header


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
