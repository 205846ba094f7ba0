"""Image patches, SDNET-style directory loading, preprocessing and a
synthetic crack generator for desk-scale experiments."""

from __future__ import annotations

import hashlib
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

NON_CRACKED = 0
CRACKED = 1
LABEL_NAMES = {NON_CRACKED: "non-cracked", CRACKED: "cracked"}

STRUCTURE_TYPES = ("bridge-deck", "wall", "pavement", "synthetic")
_STRUCTURE_CODES = {"D": "bridge-deck", "W": "wall", "P": "pavement", "S": "synthetic"}
_CODE_FOR_STRUCTURE = {v: k for k, v in _STRUCTURE_CODES.items()}
_DISPLAY = {"bridge-deck": "Bridge deck", "wall": "Wall", "pavement": "Pavement",
            "synthetic": "Synthetic"}

SDNET_SIDE = 256
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}

# luminance weights for RGB -> gray
_LUMA = np.array([0.299, 0.587, 0.114])


class DatasetError(Exception):
    """Raised when a dataset directory cannot be used at all."""


@dataclass
class ImagePatch:
    pixels: np.ndarray  # H x W x C, uint8
    label: int
    structure_type: str
    source_path: str = ""
    split: Optional[str] = None

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3:
            raise ValueError("pixels must be an H x W x C uint8 array")
        if self.label not in LABEL_NAMES:
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.structure_type not in STRUCTURE_TYPES:
            raise ValueError(f"unknown structure type {self.structure_type!r}")
        h, w, c = self.pixels.shape
        if self.structure_type != "synthetic" and (h, w, c) != (SDNET_SIDE, SDNET_SIDE, 3):
            raise ValueError(
                f"{self.structure_type} patches must be {SDNET_SIDE}x{SDNET_SIDE}x3, got {h}x{w}x{c}")


@dataclass(frozen=True)
class PreprocessConfig:
    target_side: int = 32
    grayscale: bool = True
    normalization: str = "divide-by-255"

    def __post_init__(self):
        if self.target_side < 8:
            raise ValueError("target_side must be >= 8")
        if self.normalization != "divide-by-255":
            raise ValueError(f"unsupported normalization {self.normalization!r}")

    @property
    def feature_dim(self) -> int:
        channels = 1 if self.grayscale else 3
        return channels * self.target_side ** 2

    def digest(self) -> str:
        """Short stable hash identifying this preprocessing."""
        text = (f"target_side={self.target_side};grayscale={int(self.grayscale)};"
                f"normalization={self.normalization}")
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class LabeledPatchSet:
    """Preprocessed feature vectors with aligned class labels."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 2
    provenance: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array (samples x features)")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels must have the same length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "LabeledPatchSet":
        return LabeledPatchSet(self.features[index], self.labels[index],
                               self.n_classes, self.provenance)

    def shuffled(self, rng: np.random.Generator) -> "LabeledPatchSet":
        return self.subset(rng.permutation(len(self)))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class LoadResult:
    patches: list
    errors: list = field(default_factory=list)  # (path, message) pairs

    def counts(self) -> dict:
        """Number of patches per (structure_type, label, split)."""
        return dict(Counter((p.structure_type, p.label, p.split) for p in self.patches))

    def label_counts(self) -> tuple:
        """(cracked, non-cracked) totals."""
        c = Counter(p.label for p in self.patches)
        return c[CRACKED], c[NON_CRACKED]

    def category_table(self) -> str:
        """Per-category counts laid out as category | train | test rows."""
        counts = self.counts()
        lines = [f"{'Category':<28}{'Training dataset':>18}{'Test dataset':>14}"]
        tot_train = tot_test = 0
        for st in STRUCTURE_TYPES:
            for label, suffix in ((NON_CRACKED, "w/o cracks"), (CRACKED, "with cracks")):
                n_train = counts.get((st, label, "train"), 0)
                n_test = counts.get((st, label, "test"), 0)
                if n_train == n_test == 0:
                    continue
                tot_train += n_train
                tot_test += n_test
                lines.append(f"{_DISPLAY[st] + ' ' + suffix:<28}{n_train:>18,}{n_test:>14,}")
        lines.append(f"{'total':<28}{tot_train:>18,}{tot_test:>14,}")
        return "\n".join(lines)


def category_dir_name(structure_type: str, label: int) -> str:
    """SDNET-style two-letter directory code, e.g. ``CD`` for cracked decks."""
    return ("C" if label == CRACKED else "U") + _CODE_FOR_STRUCTURE[structure_type]


def category_label(patch: ImagePatch) -> str:
    """Display name such as ``Bridge deck with cracks``."""
    suffix = "with cracks" if patch.label == CRACKED else "w/o cracks"
    return f"{_DISPLAY[patch.structure_type]} {suffix}"


def parse_category(name: str) -> Optional[tuple]:
    """Map a directory name to ``(structure_type, label)`` or None.

    Accepts the SDNET codes (``CD``, ``UW``, ...) and long names of the
    form ``bridge-deck_cracked`` / ``wall_non-cracked``.
    """
    m = re.fullmatch(r"([CU])([DWPS])", name)
    if m:
        return _STRUCTURE_CODES[m.group(2)], CRACKED if m.group(1) == "C" else NON_CRACKED
    m = re.fullmatch(r"([a-z-]+)_(cracked|non-cracked)", name)
    if m and m.group(1) in STRUCTURE_TYPES:
        return m.group(1), CRACKED if m.group(2) == "cracked" else NON_CRACKED
    return None


def read_manifest(path) -> dict:
    """Parse ``relative-path<TAB>split`` lines into a dict."""
    splits = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            try:
                rel, split = line.split("\t")
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: expected 'path<TAB>split'") from None
            splits[Path(rel).as_posix()] = split.strip()
    return splits


def write_manifest(path, entries: Iterable[tuple]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rel, split in entries:
            fh.write(f"{Path(rel).as_posix()}\t{split}\n")


def load_dataset(root, manifest=None) -> LoadResult:
    """Load every image under ``root`` whose parent directory names a category.

    Files are visited in sorted relative-path order. Decode failures are
    collected in ``LoadResult.errors`` rather than raised. If a manifest
    is given, each patch's ``split`` comes from it (``None`` when absent).
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    splits = read_manifest(manifest) if manifest is not None else {}

    files = []
    for dirpath, _, filenames in os.walk(root):
        category = parse_category(Path(dirpath).name)
        if category is None:
            continue
        for fn in filenames:
            if Path(fn).suffix.lower() in IMAGE_SUFFIXES:
                files.append((Path(dirpath, fn).relative_to(root).as_posix(), category))
    if not files:
        raise DatasetError(f"no category images found under {root}")
    files.sort()

    result = LoadResult(patches=[])
    for rel, (structure, label) in files:
        try:
            with Image.open(root / rel) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
            patch = ImagePatch(pixels, label, structure, rel, splits.get(rel))
        except (OSError, ValueError, UnidentifiedImageError) as exc:
            result.errors.append((rel, str(exc)))
            continue
        result.patches.append(patch)
    return result


def _area_downscale(img: np.ndarray, side: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h % side == 0 and w % side == 0:
        fh, fw = h // side, w // side
        return img.reshape(side, fh, side, fw, *img.shape[2:]).mean(axis=(1, 3))
    # non-integer factors: PIL box filter on float planes
    planes = img[..., None] if img.ndim == 2 else img
    out = np.stack([np.asarray(Image.fromarray(planes[..., k].astype(np.float32), mode="F")
                               .resize((side, side), Image.BOX), dtype=np.float64)
                    for k in range(planes.shape[2])], axis=-1)
    return out[..., 0] if img.ndim == 2 else out


def preprocess(patch, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Grayscale, area-average downscale and scale to [0, 1].

    ``patch`` may be an ImagePatch or a raw H x W x C uint8 array.
    """
    pixels = patch.pixels if isinstance(patch, ImagePatch) else patch
    img = np.asarray(pixels, dtype=np.float64)
    if config.grayscale:
        img = img[..., :3] @ _LUMA if img.shape[2] >= 3 else img[..., 0]
    small = _area_downscale(img, config.target_side)
    if not config.grayscale:
        small = np.moveaxis(small, -1, 0)
    return np.clip(small.reshape(-1) / 255.0, 0.0, 1.0)


def to_patch_set(patches: Sequence[ImagePatch], config: PreprocessConfig = PreprocessConfig()
                 ) -> LabeledPatchSet:
    features = np.stack([preprocess(p, config) for p in patches]) if patches else \
        np.zeros((0, config.feature_dim))
    labels = np.array([p.label for p in patches], dtype=np.int64)
    return LabeledPatchSet(features, labels, 2, config.digest())


# --------------------------------------------------------------------------
# synthetic cracks

@dataclass(frozen=True)
class SynthConfig:
    side: int = 64
    width_range: tuple = (3.0, 6.0)
    noise_level: float = 0.03
    depth_range: tuple = (0.65, 0.9)
    base_range: tuple = (0.60, 0.64)
    texture_amplitude: float = 0.03

    def __post_init__(self):
        if self.side < 16:
            raise ValueError("side must be >= 16")
        lo, hi = self.width_range
        if not 0 < lo <= hi:
            raise ValueError("width_range must satisfy 0 < low <= high")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


def _smooth_field(side: int, rng: np.random.Generator, grid: int = 5) -> np.ndarray:
    """Low-frequency noise in [-1, 1] by bilinear upsampling of a coarse grid."""
    coarse = rng.uniform(-1.0, 1.0, size=(grid, grid))
    t = np.linspace(0, grid - 1, side)
    i0 = np.minimum(t.astype(int), grid - 2)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def synth_background(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Concrete-like gray texture as floats in [0, 1]."""
    side = config.side
    img = rng.uniform(*config.base_range) + config.texture_amplitude * _smooth_field(side, rng)
    if config.noise_level > 0:
        img = img + rng.normal(0.0, config.noise_level, size=(side, side))
    return np.clip(img, 0.0, 1.0)


def _crack_polyline(side: int, rng: np.random.Generator) -> np.ndarray:
    """Vertices of a meandering path running between two opposite edges."""
    n_vertices = int(rng.integers(3, 7))
    edge_a = int(rng.integers(4))
    edge_b = edge_a ^ 1  # opposite edge: top<->bottom, left<->right

    def edge_point(edge):
        s = rng.uniform(0.1, 0.9) * (side - 1)
        return [(s, 0.0), (s, side - 1.0), (0.0, s), (side - 1.0, s)][edge]

    start, end = np.array(edge_point(edge_a)), np.array(edge_point(edge_b))
    t = np.linspace(0.0, 1.0, n_vertices)[:, None]
    pts = start + t * (end - start)
    jitter = rng.normal(0.0, side * 0.08, size=pts.shape)
    jitter[[0, -1]] = 0.0
    return np.clip(pts + jitter, 0, side - 1)


def crack_mask(side: int, vertices: np.ndarray, width: float) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of a polyline with the given width."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dist = np.full((side, side), np.inf)
    for (x0, y0), (x1, y1) in zip(vertices[:-1], vertices[1:]):
        dx, dy = x1 - x0, y1 - y0
        seg2 = dx * dx + dy * dy
        t = 0.0 if seg2 == 0 else np.clip(((xx - x0) * dx + (yy - y0) * dy) / seg2, 0, 1)
        dist = np.minimum(dist, np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy)))
    return np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)


def _to_rgb(gray: np.ndarray) -> np.ndarray:
    tint = np.array([1.0, 0.98, 0.95])
    return np.round(np.clip(gray[..., None] * tint, 0, 1) * 255).astype(np.uint8)


def render_crack_pair(config: SynthConfig, rng: np.random.Generator) -> tuple:
    """One background image and the same background with a crack drawn on it.

    Both are returned as H x W x 3 uint8 arrays.
    """
    bg = synth_background(config, rng)
    width = rng.uniform(*config.width_range)
    depth = rng.uniform(*config.depth_range)
    mask = crack_mask(config.side, _crack_polyline(config.side, rng), width)
    cracked = bg * (1.0 - depth * mask)
    return _to_rgb(bg), _to_rgb(cracked)


def generate_synthetic_crack_set(n_per_class: int, config: SynthConfig = SynthConfig(),
                                 seed: int = 0) -> list:
    """Balanced list of synthetic patches, cracked and non-cracked interleaved.

    Every cracked image and every plain image gets its own background, so
    the two classes cannot be matched pairwise.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    patches = []
    for k in range(n_per_class):
        plain = _to_rgb(synth_background(config, rng))
        _, cracked = render_crack_pair(config, rng)
        patches.append(ImagePatch(plain, NON_CRACKED, "synthetic", f"synthetic/US/{k:05d}.png"))
        patches.append(ImagePatch(cracked, CRACKED, "synthetic", f"synthetic/CS/{k:05d}.png"))
    return patches


def dark_pixel_count(patch, level: int = 80) -> int:
    """Number of pixels whose gray value is below ``level`` (0..255)."""
    pixels = patch.pixels if isinstance(patch, ImagePatch) else patch
    gray = np.asarray(pixels, dtype=np.float64)[..., :3] @ _LUMA
    return int((gray < level).sum())


def save_patches(patches: Sequence[ImagePatch], root, splits: Optional[Sequence[str]] = None
                 ) -> Path:
    """Write patches as PNGs in category directories plus ``manifest.tsv``."""
    root = Path(root)
    entries = []
    for k, p in enumerate(patches):
        rel = Path(category_dir_name(p.structure_type, p.label)) / f"{k:06d}.png"
        (root / rel.parent).mkdir(parents=True, exist_ok=True)
        Image.fromarray(p.pixels).save(root / rel)
        entries.append((rel, splits[k] if splits is not None else "train"))
    write_manifest(root / "manifest.tsv", entries)
    return root / "manifest.tsv"
