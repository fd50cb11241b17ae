"""Procedural desk-scale dataset: backgrounds, ground-truth renders and the on-disk container.

Directory layout written by :func:`generate_dataset`::

    root/
      manifest.json              splits -> record paths, counts, seed, template hash
      images/<split>_<i>.png     8-bit RGB input image
      records/<split>_<i>.bin    ground-truth record (layout below)
      backgrounds/*.png          procedural background corpus
      backgrounds/{train,eval,recycle}.txt   background manifests

Record layout, little-endian, no padding::

    char[4]  magic "RHS1"
    uint32   version (1)
    uint32   n_vertices, n_keypoints, width, height
    float64  fx, fy, cx, cy
    float64  vertices[n_vertices][3]
    float64  keypoints[n_keypoints][3]
    uint32   path_len
    bytes    image path relative to root, UTF-8
"""
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics
from .hand_model import DeformConfig, generate_sample
from .renderer import BackgroundCorpus, composite, rasterize, read_png, write_png

RECORD_MAGIC = b"RHS1"
RECORD_VERSION = 1
DATASET_VERSION = 1
SPLIT_IDS = {"train": 0, "eval": 1, "synthetic": 2}
# background roles: train/eval images are composited on disjoint scenes; recycle renders use a third set
DEFAULT_BACKGROUND_COUNTS = {"train": 24, "eval": 24, "recycle": 48}


@dataclass
class SampleRecord:
    image_path: str
    vertices: np.ndarray
    keypoints: np.ndarray
    intrinsics: CameraIntrinsics


def write_record(path, rec):
    v = np.ascontiguousarray(rec.vertices, dtype="<f8")
    k = np.ascontiguousarray(rec.keypoints, dtype="<f8")
    mc = rec.intrinsics
    name = rec.image_path.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RECORD_MAGIC)
        fh.write(struct.pack("<5I", RECORD_VERSION, v.shape[0], k.shape[0], mc.width, mc.height))
        fh.write(struct.pack("<4d", mc.fx, mc.fy, mc.cx, mc.cy))
        fh.write(v.tobytes())
        fh.write(k.tobytes())
        fh.write(struct.pack("<I", len(name)))
        fh.write(name)


def read_record(path):
    data = Path(path).read_bytes()
    if data[:4] != RECORD_MAGIC:
        raise ValueError(f"{path}: bad record magic")
    try:
        return _parse_record(data, path)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated record") from exc


def _parse_record(data, path):
    version, nv, nk, w, h = struct.unpack_from("<5I", data, 4)
    if version != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported record version {version}")
    if len(data) < 56 + 24 * (nv + nk) + 4:
        raise ValueError(f"{path}: truncated record")
    fx, fy, cx, cy = struct.unpack_from("<4d", data, 24)
    o = 56
    v = np.frombuffer(data, dtype="<f8", count=nv * 3, offset=o).reshape(nv, 3).astype(np.float64)
    o += nv * 24
    k = np.frombuffer(data, dtype="<f8", count=nk * 3, offset=o).reshape(nk, 3).astype(np.float64)
    o += nk * 24
    (plen,) = struct.unpack_from("<I", data, o)
    name = data[o + 4:o + 4 + plen].decode("utf-8")
    return SampleRecord(name, v, k, CameraIntrinsics(fx, fy, cx, cy, w, h))


# ---------------------------------------------------------------------------
# backgrounds


def make_background(seed, width=64, height=64):
    """One procedural human-free scene: gradients, stripes, blobs and texture noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    c0, c1 = rng.uniform(0, 255, size=3), rng.uniform(0, 255, size=3)
    ang = rng.uniform(0, np.pi)
    ramp = (np.cos(ang) * xx / width + np.sin(ang) * yy / height)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0 + (c1 - c0) * ramp[..., None]
    kind = rng.integers(3)
    if kind == 0:
        freq = rng.uniform(2, 8)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(ang + 1) + yy * np.sin(ang + 1))
                                     / width + phase)
        img = img * (0.6 + 0.4 * stripes[..., None])
    elif kind == 1:
        for _ in range(rng.integers(3, 8)):
            cx, cy = rng.uniform(0, width), rng.uniform(0, height)
            r = rng.uniform(4, 20)
            col = rng.uniform(0, 255, size=3)
            mask = ((xx - cx) ** 2 + (yy - cy) ** 2) < r * r
            img[mask] = col
    else:
        cell = int(rng.integers(4, 16))
        check = ((xx // cell + yy // cell) % 2)[..., None]
        img = img * (0.7 + 0.3 * check)
    img = img + rng.normal(0, rng.uniform(2, 12), size=img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def write_background_corpus(root, counts=None, seed=0, size=(64, 64)):
    """Write procedural backgrounds and one manifest per role. Returns manifest paths."""
    counts = counts or DEFAULT_BACKGROUND_COUNTS
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifests, idx = {}, 0
    for role, n in counts.items():
        lines = [f"# procedural backgrounds for role '{role}' (seed {seed})"]
        for _ in range(n):
            name = f"bg_{idx:04d}.png"
            write_png(root / name, make_background([seed, idx], *size))
            lines.append(name)
            idx += 1
        manifests[role] = root / f"{role}.txt"
        manifests[role].write_text("\n".join(lines) + "\n")
    return manifests


def memory_corpus(n, seed=0, size=(64, 64), offset=0):
    return BackgroundCorpus([make_background([seed, offset + i], *size) for i in range(n)])


# ---------------------------------------------------------------------------
# in-memory datasets


@dataclass
class HandDataset:
    images: np.ndarray  # (N, h, w, 3) uint8
    vertices: np.ndarray  # (N, 778, 3)
    keypoints: np.ndarray  # (N, 21, 3)
    intrinsics: list  # CameraIntrinsics per sample
    ids: list

    def __len__(self):
        return len(self.ids)

    @property
    def intrinsics_array(self):
        return np.array([mc.as_array() for mc in self.intrinsics])

    def subset(self, idx):
        idx = list(idx)
        return HandDataset(self.images[idx], self.vertices[idx], self.keypoints[idx],
                           [self.intrinsics[i] for i in idx], [self.ids[i] for i in idx])

    def with_images(self, images):
        return HandDataset(np.asarray(images, dtype=np.uint8), self.vertices, self.keypoints,
                           self.intrinsics, self.ids)

    def content_hash(self):
        import hashlib
        h = hashlib.sha256()
        for arr in (self.images, self.vertices, self.keypoints, self.intrinsics_array):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def sample_seed(seed, split, index):
    ss = np.random.SeedSequence([int(seed), SPLIT_IDS[split], int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def render_real(mesh, template, mc, corpus, seed):
    """Ground-truth "real" image: skin-toned hand, jittered light, sensor noise.

    Differs from recycled renders (which take the background's average color)
    so the two image domains are not identical.
    """
    rng = np.random.default_rng(seed)
    bg = corpus.images[int(rng.integers(len(corpus)))]
    skin = np.array([205.0, 150.0, 120.0]) + rng.uniform(-35, 35, size=3)
    light = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), -1.0])
    rgba, _ = rasterize(mesh, template, mc, np.clip(skin, 0, 255),
                        ambient=0.35, diffuse=0.65, light_dir=light / np.linalg.norm(light))
    img = composite(rgba, bg).astype(np.float64)
    img += rng.normal(0, 3.0, size=img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def build_split(template, n, seed, split, corpus, deform=None):
    deform = deform or DeformConfig()
    imgs, verts, kps, mcs, ids = [], [], [], [], []
    for i in range(n):
        s = sample_seed(seed, split, i)
        mesh, kp, mc = generate_sample(template, s, deform)
        imgs.append(render_real(mesh, template, mc, corpus, s))
        verts.append(mesh.vertices)
        kps.append(kp.points)
        mcs.append(mc)
        ids.append(f"{split}_{i:05d}")
    return HandDataset(np.stack(imgs), np.stack(verts), np.stack(kps), mcs, ids)


def desk_splits(template, n_train=512, n_eval=128, seed=0, deform=None, background_counts=None):
    """In-memory twin of :func:`generate_dataset`: same samples, images and corpora.

    Returns ``(train_set, eval_set, recycle_corpus)``.
    """
    deform = deform or DeformConfig()
    counts = background_counts or DEFAULT_BACKGROUND_COUNTS
    size = tuple(deform.image_size)
    corpora, offset = {}, 0
    for role, n in counts.items():
        corpora[role] = memory_corpus(n, seed, size, offset)
        offset += n
    train_set = build_split(template, n_train, seed, "train", corpora["train"], deform)
    eval_set = build_split(template, n_eval, seed, "eval", corpora["eval"], deform)
    return train_set, eval_set, corpora["recycle"]


# ---------------------------------------------------------------------------
# on-disk container


def generate_dataset(root, template, n_train=512, n_eval=128, seed=0, deform=None,
                     background_counts=None):
    root = Path(root)
    deform = deform or DeformConfig()
    size = tuple(deform.image_size)
    manifests = write_background_corpus(root / "backgrounds", background_counts, seed, size)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "records").mkdir(parents=True, exist_ok=True)
    splits = {}
    for split, n in (("train", n_train), ("eval", n_eval)):
        corpus = BackgroundCorpus.from_manifest(manifests[split], size)
        ds = build_split(template, n, seed, split, corpus, deform)
        entries = []
        for i in range(n):
            img_rel = f"images/{ds.ids[i]}.png"
            rec_rel = f"records/{ds.ids[i]}.bin"
            write_png(root / img_rel, ds.images[i])
            write_record(root / rec_rel, SampleRecord(img_rel, ds.vertices[i], ds.keypoints[i],
                                                      ds.intrinsics[i]))
            entries.append(rec_rel)
        splits[split] = entries
    manifest = {
        "format_version": DATASET_VERSION,
        "seed": int(seed),
        "template_hash": template.hash,
        "image_size": list(size),
        "splits": splits,
        "backgrounds": {k: str(v.relative_to(root)) for k, v in manifests.items()},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root / "manifest.json"


def load_manifest(root):
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_VERSION:
        raise ValueError(f"{root}: unsupported dataset version {manifest.get('format_version')}")
    return manifest


def load_split(root, split):
    root = Path(root)
    manifest = load_manifest(root)
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in dataset {root}")
    imgs, verts, kps, mcs, ids = [], [], [], [], []
    for rel in manifest["splits"][split]:
        rec = read_record(root / rel)
        imgs.append(read_png(root / rec.image_path))
        verts.append(rec.vertices)
        kps.append(rec.keypoints)
        mcs.append(rec.intrinsics)
        ids.append(Path(rel).stem)
    if not ids:
        raise ValueError(f"split {split!r} of {root} is empty")
    return HandDataset(np.stack(imgs), np.stack(verts), np.stack(kps), mcs, ids)


def load_background_corpus(root, role="recycle"):
    root = Path(root)
    manifest = load_manifest(root)
    return BackgroundCorpus.from_manifest(root / manifest["backgrounds"][role],
                                          tuple(manifest["image_size"]))
