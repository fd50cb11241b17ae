"""Synthetic hand images: rasterize a fine mesh, tint it with the background's
average color, and composite it over a randomly selected background."""
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .camera import Z_MIN, BehindCameraError, CameraIntrinsics
from .kernels import fill_triangles

AMBIENT = 0.4
DIFFUSE = 0.6
# unit vector from the surface toward the light (camera looks down +z, y points down)
LIGHT_DIR = np.array([-0.3, -0.5, -1.0]) / np.linalg.norm([-0.3, -0.5, -1.0])


class InvalidImageError(ValueError):
    pass


def check_image(img, channels=3):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != channels:
        raise InvalidImageError(f"expected h x w x {channels} uint8 image, got {img.dtype} {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidImageError("image is empty")
    return img


def read_png(path):
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, img):
    img = np.asarray(img, dtype=np.uint8)
    mode = "RGBA" if img.shape[2] == 4 else "RGB"
    PILImage.fromarray(img, mode).save(path, format="PNG")


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def average_color(bg):
    """Per-channel mean, rounded half up, computed exactly in integers."""
    bg = check_image(bg)
    n = bg.shape[0] * bg.shape[1]
    sums = bg.reshape(-1, 3).astype(np.int64).sum(axis=0)
    return tuple(int(v) for v in (2 * sums + n) // (2 * n))


def shade_faces(vertices, faces, base_color, ambient=AMBIENT, diffuse=DIFFUSE, light_dir=LIGHT_DIR):
    """Flat Lambertian color per face; normals are flipped to face the camera."""
    v = np.asarray(vertices, dtype=np.float64)
    p0, p1, p2 = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n, axis=1)
    n = n / np.where(norm > 0, norm, 1.0)[:, None]
    centroid = (p0 + p1 + p2) / 3.0
    n[np.einsum("ij,ij->i", n, centroid) > 0] *= -1.0
    light = np.asarray(light_dir, dtype=np.float64)
    intensity = ambient + diffuse * np.clip(n @ light, 0.0, None)
    color = round_half_up(intensity[:, None] * np.asarray(base_color, dtype=np.float64)[None, :])
    return np.clip(color, 0, 255).astype(np.uint8)


def rasterize(mesh, template, mc, base_color, *, ambient=AMBIENT, diffuse=DIFFUSE,
              light_dir=LIGHT_DIR, backend=None):
    """Z-buffered flat-shaded render of a fine mesh at the camera's resolution.

    Returns ``(rgba, depth)``: alpha is 255 on covered pixels and 0 elsewhere;
    depth holds camera z on covered pixels and +inf elsewhere. Faces with a
    vertex at or behind ``Z_MIN`` are dropped; zero-area faces are skipped.
    """
    v = np.asarray(mesh.vertices if hasattr(mesh, "vertices") else mesh, dtype=np.float64)
    if v.shape != template.rest_vertices.shape:
        raise ValueError(f"expected fine mesh {template.rest_vertices.shape}, got {v.shape}")
    z = v[:, 2]
    front = z > Z_MIN
    if not front.any():
        raise BehindCameraError(int(np.argmin(z)), float(z.min()))
    faces = template.faces
    valid = front[faces].all(axis=1)
    fx, fy, cx, cy = mc.as_array() if isinstance(mc, CameraIntrinsics) else np.asarray(mc, float)
    safe_z = np.where(front, z, 1.0)
    uv = np.stack([fx * v[:, 0] / safe_z + cx, fy * v[:, 1] / safe_z + cy], axis=1)
    colors = shade_faces(v, faces, base_color, ambient, diffuse, light_dir)
    rgba, inv_depth = fill_triangles(uv, 1.0 / safe_z, faces, colors, valid,
                                     mc.width, mc.height, backend=backend)
    with np.errstate(divide="ignore"):
        depth = np.where(inv_depth > 0, 1.0 / inv_depth, np.inf)
    return rgba, depth


def composite(fg, bg):
    """Hard-matte composite: covered pixels (alpha > 0) take the foreground color."""
    fg = check_image(fg, channels=4)
    bg = check_image(bg)
    if fg.shape[:2] != bg.shape[:2]:
        raise InvalidImageError(f"foreground {fg.shape[:2]} and background {bg.shape[:2]} differ")
    return np.where(fg[..., 3:4] > 0, fg[..., :3], bg)


class BackgroundCorpus:
    """Human-free background images listed in a manifest.

    The manifest is plain text: one path per line relative to the manifest's
    directory; blank lines and ``#`` comments are ignored.
    """

    def __init__(self, images, paths=None):
        if len(images) == 0:
            raise ValueError("background corpus is empty")
        self.images = tuple(check_image(im) for im in images)
        for im in self.images:
            im.setflags(write=False)
        self.paths = tuple(paths) if paths is not None else tuple(f"<mem:{i}>" for i in range(len(images)))

    def __len__(self):
        return len(self.images)

    @staticmethod
    def read_manifest(path):
        path = Path(path)
        entries = []
        for line in path.read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                entries.append(line)
        return [path.parent / e for e in entries]

    @classmethod
    def from_manifest(cls, path, size=None):
        """Load every listed image; ``size=(width, height)`` resizes bilinearly if needed."""
        files = cls.read_manifest(path)
        images = []
        for f in files:
            if not f.is_file():
                raise FileNotFoundError(f"manifest entry {f} not found")
            img = read_png(f)
            if size is not None and (img.shape[1], img.shape[0]) != tuple(size):
                img = np.asarray(PILImage.fromarray(img).resize(tuple(size), PILImage.BILINEAR))
            images.append(img)
        return cls(images, [str(f) for f in files])

    def select(self, seed):
        """Background index for a render seed (first draw of ``default_rng(seed)``)."""
        return int(np.random.default_rng(seed).integers(len(self.images)))

    def resized(self, width, height):
        out = []
        for im in self.images:
            if im.shape[:2] != (height, width):
                im = np.asarray(PILImage.fromarray(im).resize((width, height), PILImage.BILINEAR))
            out.append(im)
        return BackgroundCorpus(out, self.paths)


def render_synthetic(mesh, template, mc, corpus, seed, backend=None):
    """Background selection -> average color -> rasterize -> composite."""
    bg = corpus.images[corpus.select(seed)]
    if bg.shape[:2] != (mc.height, mc.width):
        raise InvalidImageError(f"background {bg.shape[:2]} does not match camera "
                                f"{(mc.height, mc.width)}")
    rgba, _ = rasterize(mesh, template, mc, average_color(bg), backend=backend)
    return composite(rgba, bg)
