"""Dataset loading and synthesis.

Real loaders: the IDX image/label format (gzip-transparent) and the
16-feature 5-class jet-substructure CSV. Synthetic generators stand in at
desk scale: `synth_dataset` makes Gaussian class blobs with a separability
knob, `synth_digits` renders a deterministic 28x28 digit surrogate whose
class information lives in centered stroke glyphs while the border carries
only noise, matching the structure the connectivity experiments measure.

All inputs are delivered as integer codes under an explicit QuantSpec, so
the first network layer sees exactly what the hardware input bus would.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .quant import QuantSpec, quantize

__all__ = [
    "Dataset",
    "read_idx",
    "load_mnist",
    "load_jsc",
    "synth_dataset",
    "synth_digits",
    "make_dataset",
]

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Quantized inputs plus labels: x is (n, features) int64 codes."""

    x: np.ndarray
    y: np.ndarray
    input_spec: QuantSpec
    name: str = ""

    def __post_init__(self):
        if self.x.ndim != 2:
            raise ValueError(f"x must be 2-D, got shape {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError(f"labels shape {self.y.shape} vs {self.x.shape[0]} samples")

    @property
    def feature_count(self) -> int:
        return self.x.shape[1]

    def take(self, count: int) -> "Dataset":
        return Dataset(self.x[:count], self.y[:count], self.input_spec, self.name)


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (images or labels), gzip or raw.

    Images come back as (n, rows, cols) uint8, labels as (n,) uint8.
    """
    with _open_maybe_gzip(path) as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ValueError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic == _IDX_LABELS_MAGIC:
        (n,) = struct.unpack(">I", blob[4:8])
        if len(blob) != 8 + n:
            raise ValueError(f"{path}: {len(blob) - 8} label bytes for {n} declared")
        return np.frombuffer(blob, dtype=np.uint8, offset=8).copy()
    if magic == _IDX_IMAGES_MAGIC:
        if len(blob) < 16:
            raise ValueError(f"{path}: too short for an image header")
        n, rows, cols = struct.unpack(">III", blob[4:16])
        want = 16 + n * rows * cols
        if len(blob) != want:
            raise ValueError(f"{path}: {len(blob)} bytes, want {want} for {n}x{rows}x{cols}")
        return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, rows, cols).copy()
    raise ValueError(f"{path}: unrecognized IDX magic 0x{magic:08x}")


def pixel_input_spec(bits: int) -> QuantSpec:
    """Unsigned spec mapping pixel intensity 0..255 onto the code range."""
    qmax = (1 << bits) - 1
    return QuantSpec(bits=bits, signed=False, scale=(255.0 / qmax) / 255.0, zero_point=0)


def _quantize_pixels(images: np.ndarray, bits: int) -> np.ndarray:
    """uint8 images -> codes by scaling into [0, 2^bits - 1] with rounding."""
    qmax = (1 << bits) - 1
    spec = pixel_input_spec(bits)
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    codes = quantize(flat, spec)
    assert codes.max() <= qmax
    return codes


def load_mnist(images_path, labels_path, bits: int) -> Dataset:
    """One split of the handwritten-digit set as input codes at `bits`."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path} is not an image file")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path} is not a label file")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    return Dataset(
        x=_quantize_pixels(images, bits),
        y=labels.astype(np.int64),
        input_spec=pixel_input_spec(bits),
        name="mnist",
    )


def load_jsc(csv_path, bits: int, seed: int = 0, test_fraction: float = 0.2):
    """Jet-substructure CSV -> standardized, quantized train/test datasets.

    Expects 16 feature columns followed by a class label in [0, 5) (a
    header line is skipped if present). Features are standardized per
    column on the training split, clipped at 4 sigma, and coded on a
    symmetric spec. Returns (train, test) split by a seeded shuffle.
    """
    rows = []
    with open(csv_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                continue  # header
    if not rows:
        raise ValueError(f"{csv_path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] != 17:
        raise ValueError(f"{csv_path}: {arr.shape[1]} columns, want 16 features + label")
    feats, labels = arr[:, :16], arr[:, 16].astype(np.int64)
    if labels.min() < 0 or labels.max() > 4:
        raise ValueError(f"{csv_path}: labels outside [0, 4]")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x15C])))
    order = rng.permutation(arr.shape[0])
    feats, labels = feats[order], labels[order]
    n_test = int(round(arr.shape[0] * test_fraction))
    n_train = arr.shape[0] - n_test
    mu = feats[:n_train].mean(axis=0)
    sd = feats[:n_train].std(axis=0)
    sd[sd == 0] = 1.0
    clip = 4.0
    z = np.clip((feats - mu) / sd, -clip, clip)
    zp = 1 << (bits - 1)
    spec = QuantSpec(bits=bits, signed=False, scale=clip / (zp - 1) if bits > 1 else clip,
                     zero_point=zp)
    codes = quantize(z, spec)
    train = Dataset(codes[:n_train], labels[:n_train], spec, name="jsc")
    test = Dataset(codes[n_train:], labels[n_train:], spec, name="jsc")
    return train, test


def synth_dataset(count: int, features: int, classes: int, separability: float,
                  bits: int, seed: int) -> Dataset:
    """Gaussian class blobs: means separability apart, unit within-class noise.

    separability 0 collapses every class onto one distribution (chance-level
    task); large values make the classes linearly separable.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xB10B])))
    means = rng.normal(0.0, 1.0, size=(classes, features))
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    means = means / norms * float(separability)
    y = rng.integers(0, classes, size=count)
    x = means[y] + rng.normal(0.0, 1.0, size=(count, features))
    clip = 4.0
    z = np.clip(x, -clip, clip)
    zp = 1 << (bits - 1)
    spec = QuantSpec(bits=bits, signed=False, scale=clip / (zp - 1) if bits > 1 else clip,
                     zero_point=zp)
    return Dataset(quantize(z, spec), y.astype(np.int64), spec, name="synth")


# --- procedural digit surrogate ---------------------------------------------
# Ten polyline glyphs in a unit box, y pointing down. Rendered centered on
# the canvas so class information concentrates in the middle; the border
# frame sees nothing but noise.

_GLYPHS = {
    0: [[(0.50, 0.08), (0.82, 0.25), (0.85, 0.72), (0.50, 0.92),
         (0.18, 0.72), (0.15, 0.25), (0.50, 0.08)]],
    1: [[(0.35, 0.25), (0.55, 0.08), (0.55, 0.92)],
        [(0.35, 0.92), (0.75, 0.92)]],
    2: [[(0.18, 0.28), (0.40, 0.08), (0.72, 0.12), (0.80, 0.38),
         (0.25, 0.70), (0.15, 0.92), (0.85, 0.92)]],
    3: [[(0.20, 0.10), (0.75, 0.12), (0.78, 0.35), (0.45, 0.50),
         (0.80, 0.62), (0.75, 0.88), (0.20, 0.90)]],
    4: [[(0.70, 0.92), (0.70, 0.08), (0.15, 0.62), (0.88, 0.62)]],
    5: [[(0.80, 0.08), (0.25, 0.08), (0.20, 0.45), (0.65, 0.42),
         (0.82, 0.65), (0.70, 0.90), (0.20, 0.92)]],
    6: [[(0.70, 0.08), (0.35, 0.35), (0.20, 0.65), (0.35, 0.90),
         (0.70, 0.88), (0.80, 0.62), (0.55, 0.50), (0.25, 0.60)]],
    7: [[(0.15, 0.10), (0.85, 0.10), (0.45, 0.92)]],
    8: [[(0.50, 0.48), (0.75, 0.30), (0.68, 0.10), (0.32, 0.10),
         (0.25, 0.30), (0.50, 0.48), (0.78, 0.68), (0.68, 0.92),
         (0.32, 0.92), (0.22, 0.68), (0.50, 0.48)]],
    9: [[(0.75, 0.40), (0.55, 0.50), (0.28, 0.38), (0.32, 0.12),
         (0.68, 0.08), (0.75, 0.40), (0.70, 0.92)]],
}


def _render_glyph(polylines, box: int, thickness: float) -> np.ndarray:
    """Rasterize unit-box polylines into a box x box float image in [0, 1]."""
    coords = (np.arange(box, dtype=np.float64) + 0.5) / box
    px, py = np.meshgrid(coords, coords, indexing="xy")
    dist = np.full((box, box), np.inf)
    for line in polylines:
        pts = np.asarray(line, dtype=np.float64)
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            dx, dy = x1 - x0, y1 - y0
            seg2 = dx * dx + dy * dy
            if seg2 == 0:
                t = np.zeros_like(px)
            else:
                t = np.clip(((px - x0) * dx + (py - y0) * dy) / seg2, 0.0, 1.0)
            d = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
            dist = np.minimum(dist, d)
    w = thickness / box
    return np.clip(1.5 - dist / w, 0.0, 1.0)


def _digit_templates(rng, box: int, variants: int) -> np.ndarray:
    """(classes, variants, box, box) stroke templates with jittered vertices."""
    out = np.zeros((10, variants, box, box))
    for c in range(10):
        for v in range(variants):
            jittered = []
            for line in _GLYPHS[c]:
                pts = np.asarray(line, dtype=np.float64)
                if v > 0:
                    pts = pts + rng.normal(0.0, 0.055, size=pts.shape)
                jittered.append(pts)
            thickness = (0.85 + 0.5 * rng.random()) * box / 20.0
            out[c, v] = _render_glyph(jittered, box, thickness)
    return out


def synth_digits(count: int, bits: int, seed: int, side: int = 28,
                 noise: float = 20.0, max_shift: int = 3) -> Dataset:
    """Deterministic centered-digit surrogate at MNIST geometry.

    Each sample places one of several per-class stroke templates (rendered
    in a box roughly 0.6x the canvas side) near the canvas center with a small
    random shift and amplitude jitter, then adds Gaussian pixel noise over
    the whole canvas and quantizes intensities 0..255 down to `bits`-bit
    codes. The defaults (dim strokes, pixel noise, six vertex-jittered
    variants per class, a mostly-dead border) are deliberately unforgiving:
    a low-bit classifier has to spend its scarce fan-in on the live central
    pixels, so wiring quality shows up in accuracy the way it does on real
    handwriting.
    """
    box = max(8, int(round(side * 0.6)))
    if (side - box) // 2 < max_shift:
        raise ValueError("side too small for the glyph box")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xD161])))
    templates = _digit_templates(rng, box, variants=6)
    y = rng.integers(0, 10, size=count)
    variant = rng.integers(0, templates.shape[1], size=count)
    base_off = (side - box) // 2
    offs = rng.integers(-max_shift, max_shift + 1, size=(count, 2)) + base_off
    amp = rng.uniform(110.0, 205.0, size=count)
    noise_px = rng.normal(0.0, noise, size=(count, side, side))
    canvas = np.zeros((count, side, side))
    for i in range(count):
        r0, c0 = offs[i]
        canvas[i, r0:r0 + box, c0:c0 + box] = templates[y[i], variant[i]] * amp[i]
    images = np.clip(canvas + noise_px, 0.0, 255.0)
    images_u8 = np.floor(images + 0.5).astype(np.uint8)
    return Dataset(
        x=_quantize_pixels(images_u8.reshape(count, side, side), bits),
        y=y.astype(np.int64),
        input_spec=pixel_input_spec(bits),
        name="synth_digits",
    )


def _split(full: Dataset, n_train: int):
    """Head/tail split of one generated pool: both halves share the same
    class templates/means, only the samples differ."""
    train = Dataset(full.x[:n_train], full.y[:n_train], full.input_spec, full.name)
    test = Dataset(full.x[n_train:], full.y[n_train:], full.input_spec, full.name)
    return train, test


def make_dataset(cfg: dict, bits: int):
    """Build (train, test) per a config data section.

    kinds: mnist (path = dir with the four IDX files), jsc (path = csv),
    synth (blobs), synth_digits. Synthetic splits are head/tail of one
    generated pool, so they share class structure but no samples.
    """
    kind = cfg["kind"]
    if kind == "mnist":
        d = cfg["path"]
        if not d:
            raise ValueError("mnist dataset needs data.path pointing at the IDX files")
        def find(stem):
            for suffix in ("", ".gz"):
                p = os.path.join(d, stem + suffix)
                if os.path.exists(p):
                    return p
            raise FileNotFoundError(f"missing {stem}[.gz] under {d}")
        train = load_mnist(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"), bits)
        test = load_mnist(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"), bits)
    elif kind == "jsc":
        if not cfg.get("path"):
            raise ValueError("jsc dataset needs data.path pointing at the CSV")
        train, test = load_jsc(cfg["path"], bits, seed=cfg.get("seed", 0))
    elif kind == "synth":
        n_train, n_test = cfg["train_count"], cfg["test_count"]
        full = synth_dataset(n_train + n_test, cfg["features"], cfg["classes"],
                             cfg.get("separability", 2.0), bits, cfg.get("seed", 0))
        train, test = _split(full, n_train)
    elif kind == "synth_digits":
        n_train, n_test = cfg["train_count"], cfg["test_count"]
        full = synth_digits(n_train + n_test, bits, seed=cfg.get("seed", 0))
        train, test = _split(full, n_train)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if cfg.get("train_count") and kind in ("mnist", "jsc"):
        train = train.take(cfg["train_count"])
    if cfg.get("test_count") and kind in ("mnist", "jsc"):
        test = test.take(cfg["test_count"])
    return train, test
