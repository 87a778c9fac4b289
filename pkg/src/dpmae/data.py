"""Procedural synthetic images, dataset manifests, and the Poisson subsampler.

Synthetic images are composed from seeded primitives (oriented sinusoidal
gratings, multi-octave smooth value noise, filled geometric shapes, a random
channel-mixing transform), so they carry texture statistics without any
natural-image content. Every image is fully determined by
(master_seed, index) and renders the same bytes on every run.

Datasets live in a directory of zero-padded binary PPM/PGM files plus a
``manifest`` text file (n, resolution, channels, role, digest) and an
optional ``labels`` file with one integer class id per line.
"""

from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeds

MANIFEST_NAME = "manifest"
LABELS_NAME = "labels"


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    n: int
    resolution: int
    channels: int
    role: str
    digest: str
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.n < 1:
            raise DatasetError(f"dataset must have at least one sample, got n={self.n}")
        if self.labels is not None and len(self.labels) != self.n:
            raise DatasetError(
                f"labels cover {len(self.labels)} samples but dataset has {self.n}"
            )

    def image_path(self, index: int) -> Path:
        ext = "ppm" if self.channels == 3 else "pgm"
        return self.root / f"img_{index:08d}.{ext}"


# ---------------------------------------------------------------------------
# procedural generator


def _grating(rng, res, theta=None, freq=None):
    ys, xs = np.meshgrid(np.linspace(0, 1, res), np.linspace(0, 1, res), indexing="ij")
    theta = rng.uniform(0, np.pi) if theta is None else theta
    freq = rng.uniform(1.0, 8.0) if freq is None else freq
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xs + np.sin(theta) * ys) + phase)
    amps = rng.uniform(0.3, 1.0, size=3)
    return 0.5 + 0.5 * wave[None] * amps[:, None, None]


def _value_noise(rng, res):
    img = np.zeros((3, res, res))
    amp, total = 1.0, 0.0
    cells = int(rng.integers(2, 6))
    for _ in range(int(rng.integers(2, 5))):
        grid = rng.random((3, cells + 1, cells + 1))
        # bilinear upsample of the coarse grid
        pos = np.linspace(0, cells, res)
        i0 = np.minimum(pos.astype(int), cells - 1)
        frac = pos - i0
        g = grid[:, i0][:, :, i0]
        gx = grid[:, i0][:, :, i0 + 1]
        gy = grid[:, i0 + 1][:, :, i0]
        gxy = grid[:, i0 + 1][:, :, i0 + 1]
        fy = frac[:, None]
        fx = frac[None, :]
        layer = (g * (1 - fy) * (1 - fx) + gx * (1 - fy) * fx
                 + gy * fy * (1 - fx) + gxy * fy * fx)
        img += amp * layer
        total += amp
        amp *= 0.5
        cells *= 2
    return img / total


def _shapes(rng, res, kind=None):
    ys, xs = np.meshgrid(np.linspace(0, 1, res), np.linspace(0, 1, res), indexing="ij")
    img = np.full((3, res, res), rng.uniform(0.1, 0.9, size=3)[:, None, None])
    soft = 2.0 / res
    for _ in range(int(rng.integers(2, 6))):
        color = rng.uniform(0, 1, size=3)
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.08, 0.35)
        k = kind if kind is not None else int(rng.integers(0, 3))
        if k == 0:  # disk
            dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) - r
        elif k == 1:  # square
            dist = np.maximum(np.abs(xs - cx), np.abs(ys - cy)) - r
        else:  # diagonal band
            w = rng.uniform(0.05, 0.2)
            dist = np.abs((xs - cx) + (ys - cy)) / np.sqrt(2) - w
        alpha = np.clip(0.5 - dist / soft, 0.0, 1.0)
        img = img * (1 - alpha[None]) + color[:, None, None] * alpha[None]
    return img


def _color_mix(rng, img):
    mix = np.eye(3) + rng.uniform(-0.4, 0.4, size=(3, 3))
    out = np.einsum("ij,jhw->ihw", mix, img)
    lo = out.min(axis=(1, 2), keepdims=True)
    hi = out.max(axis=(1, 2), keepdims=True)
    return (out - lo) / np.maximum(hi - lo, 1e-9)


def render_image(master_seed: int, index: int, resolution: int,
                 class_id: int | None = None, num_classes: int = 10) -> np.ndarray:
    """One synthetic image in [0,1], (3, res, res), determined by its seed.

    When `class_id` is given, the dominant grating orientation/frequency and
    the shape family are fixed by the class, which makes classes linearly
    separable enough for desk-scale probes.
    """
    rng = seeds.derive(master_seed, "synth", index)
    layers = []
    if class_id is None:
        layers.append(_grating(rng, resolution))
        layers.append(_value_noise(rng, resolution))
        if rng.random() < 0.5:
            layers.append(_shapes(rng, resolution))
        weights = rng.uniform(0.3, 1.0, size=len(layers))
        img = sum(w * l for w, l in zip(weights, layers)) / weights.sum()
        if rng.random() < 0.7:
            img = _color_mix(rng, img)
        return np.clip(img, 0.0, 1.0)

    # class-conditioned: fixed grating orientation/frequency and shape family,
    # plus a class hue tint that keeps the task linearly decodable
    theta = np.pi * class_id / num_classes + rng.uniform(-0.06, 0.06)
    freq = 2.0 + (class_id % 5) * 1.5
    layers.append(_grating(rng, resolution, theta=theta, freq=freq))
    layers.append(_value_noise(rng, resolution))
    layers.append(_shapes(rng, resolution, kind=class_id % 3))
    weights = np.array([1.0, 0.5, 0.5]) * rng.uniform(0.8, 1.2, size=3)
    img = sum(w * l for w, l in zip(weights, layers)) / weights.sum()
    tint = np.array(colorsys.hsv_to_rgb(class_id / num_classes, 0.9, 0.9))
    img = 0.75 * img + 0.25 * tint[:, None, None]
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PPM/PGM files


def write_image(path: Path, img: np.ndarray) -> None:
    """8-bit binary PPM (3 channels) or PGM (1 channel), values from [0,1]."""
    depth = img.shape[0]
    data = np.round(img * 255.0).astype(np.uint8)
    if depth == 3:
        header = f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode()
        body = data.transpose(1, 2, 0).tobytes()
    elif depth == 1:
        header = f"P5\n{img.shape[2]} {img.shape[1]}\n255\n".encode()
        body = data[0].tobytes()
    else:
        raise DatasetError(f"unsupported channel count {depth}")
    with open(path, "wb") as f:
        f.write(header + body)


def read_image(path: Path) -> np.ndarray:
    """Read a binary PPM/PGM written by write_image; (C,H,W) floats in [0,1]."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from None
    magic = raw[:2]
    if magic not in (b"P6", b"P5"):
        raise DatasetError(f"{path}: not a binary PPM/PGM file")
    # scan header tokens by hand: exactly one whitespace byte follows the max
    # value, and the first pixel byte may itself look like whitespace
    ws = b" \t\r\n"
    pos = 2
    tokens = []
    try:
        for _ in range(3):
            while raw[pos] in ws:
                pos += 1
            start = pos
            while raw[pos] not in ws:
                pos += 1
            tokens.append(raw[start:pos])
        pos += 1  # the single separator byte before the pixel data
    except IndexError:
        raise DatasetError(f"{path}: truncated header") from None
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DatasetError(f"{path}: malformed header") from None
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported max value {maxval}")
    channels = 3 if magic == b"P6" else 1
    body = raw[pos:]
    expected = w * h * channels
    if len(body) != expected:
        raise DatasetError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset operations


def _digest(root: Path, paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.read_bytes())
    return h.hexdigest()


def _write_manifest(root: Path, n, resolution, channels, role, digest) -> None:
    text = (f"n = {n}\nresolution = {resolution}\nchannels = {channels}\n"
            f"role = {role}\ndigest = {digest}\n")
    (root / MANIFEST_NAME).write_text(text)


def generate_synthetic(count: int, resolution: int, master_seed: int, out_dir,
                       role: str = "synthetic-pretrain",
                       classes: int | None = None) -> DatasetManifest:
    """Render `count` seeded images into `out_dir` and write its manifest.

    With ``classes`` set, sample i gets class label i % classes (written to
    the labels file) and class-conditioned rendering.
    """
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")
    if resolution < 4:
        raise DatasetError(f"resolution must be >= 4, got {resolution}")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise DatasetError(f"cannot write to {root}: {e}") from None

    labels = None
    if classes is not None:
        labels = np.arange(count) % classes

    paths = []
    for i in range(count):
        class_id = int(labels[i]) if labels is not None else None
        img = render_image(master_seed, i, resolution, class_id=class_id,
                           num_classes=classes or 10)
        path = root / f"img_{i:08d}.ppm"
        write_image(path, img)
        paths.append(path)
    if labels is not None:
        (root / LABELS_NAME).write_text("\n".join(str(int(c)) for c in labels) + "\n")

    digest = _digest(root, paths)
    _write_manifest(root, count, resolution, 3, role, digest)
    return DatasetManifest(root=root, n=count, resolution=resolution, channels=3,
                           role=role, digest=digest, labels=labels)


def load_dataset(root) -> DatasetManifest:
    """Read a dataset directory's manifest and optional labels."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"no manifest in {root}")
    fields = {}
    for line in manifest_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetError(f"{manifest_path}: malformed line {line!r}")
        fields[key.strip()] = value.strip()
    try:
        n = int(fields["n"])
        resolution = int(fields["resolution"])
        channels = int(fields["channels"])
        role = fields["role"]
        digest = fields["digest"]
    except KeyError as e:
        raise DatasetError(f"{manifest_path}: missing field {e}") from None

    ext = "ppm" if channels == 3 else "pgm"
    found = len(list(root.glob(f"img_*.{ext}")))
    if found != n:
        raise DatasetError(f"{root}: manifest says n={n} but {found} image files exist")

    labels = None
    labels_path = root / LABELS_NAME
    if labels_path.is_file():
        labels = np.array([int(x) for x in labels_path.read_text().split()])
    return DatasetManifest(root=root, n=n, resolution=resolution, channels=channels,
                           role=role, digest=digest, labels=labels)


def fetch(manifest: DatasetManifest, indices) -> np.ndarray:
    """Batch of images as a (B, C, H, W) array in [0,1]; read-only access."""
    out = np.empty((len(indices), manifest.channels, manifest.resolution,
                    manifest.resolution))
    for row, idx in enumerate(indices):
        idx = int(idx)
        if not 0 <= idx < manifest.n:
            raise DatasetError(f"index {idx} out of range for n={manifest.n}")
        img = read_image(manifest.image_path(idx))
        if img.shape != out.shape[1:]:
            raise DatasetError(
                f"{manifest.image_path(idx)}: shape {img.shape} does not match "
                f"manifest {out.shape[1:]}"
            )
        out[row] = img
    return out


def compute_digest(manifest: DatasetManifest) -> str:
    """Recompute the content digest from the image bytes on disk."""
    paths = [manifest.image_path(i) for i in range(manifest.n)]
    return _digest(manifest.root, paths)


def poisson_sample(n: int, q: float, seed) -> np.ndarray:
    """Indices of a Poisson-subsampled batch: each of 0..n-1 independently
    included with probability q. `seed` is an integer or a Generator."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling ratio must lie in [0, 1], got {q}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.nonzero(rng.random(n) < q)[0]
