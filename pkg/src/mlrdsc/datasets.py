"""Benchmark loaders, the on-disk cache, and a synthetic union-of-subspaces generator.

Directory layouts understood by the loaders:

* Extended Yale B (cropped): ``root/<subject>/*.pgm``, one subdirectory per
  subject (e.g. ``yaleB01``), sorted by name; ``*Ambient*`` images are ignored.
  Each subject must provide exactly 64 images of 192x168.
* ORL / AT&T: ``root/s1 ... root/s40``, each holding ``1.pgm ... 10.pgm`` (112x92).
* COIL20 / COIL100: flat directory of ``obj<i>__<j>.png`` files, 72 per object.

All images are converted to grayscale, scaled to [0, 1] and downsampled with
area-average (box) resampling. X is stored as a (d, n) float32 matrix whose
columns are flattened images in row-major (height, width, channel) order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import container

_CACHE_KIND = "sampleset"


class IngestionError(FileNotFoundError):
    """A dataset directory or an expected subject/object is missing."""


class DecodeError(OSError):
    """An image file exists but could not be decoded."""


@dataclass(eq=False)
class SampleSet:
    X: np.ndarray
    labels: np.ndarray
    image_shape: tuple[int, int, int]
    name: str
    K: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.K = int(self.K)
        h, w, c = self.image_shape
        if self.X.ndim != 2 or self.X.shape[0] != h * w * c:
            raise ValueError(f"X has shape {self.X.shape}, expected ({h * w * c}, n) for image_shape {self.image_shape}")
        if self.labels.shape != (self.X.shape[1],):
            raise ValueError("labels must have one entry per column of X")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X contains non-finite entries")
        uniq = np.unique(self.labels)
        if len(uniq) != self.K or uniq[0] != 0 or uniq[-1] != self.K - 1:
            raise ValueError(f"labels must cover exactly 0..{self.K - 1}")

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[0]

    def images(self) -> np.ndarray:
        """Return the samples as an (n, channels, height, width) array."""
        h, w, c = self.image_shape
        return self.X.T.reshape(self.n, h, w, c).transpose(0, 3, 1, 2)

    def __eq__(self, other):
        if not isinstance(other, SampleSet):
            return NotImplemented
        return (self.name == other.name and self.K == other.K
                and self.image_shape == other.image_shape
                and self.X.dtype == other.X.dtype
                and np.array_equal(self.X, other.X)
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class SyntheticSpec:
    K: int
    ambient_dim: int
    subspace_dim: int
    points_per_subspace: int
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        if not 0 < self.subspace_dim < self.ambient_dim:
            raise ValueError("need 0 < subspace_dim < ambient_dim")
        if self.points_per_subspace < self.subspace_dim + 1:
            raise ValueError("points_per_subspace must be at least subspace_dim + 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


def _read_gray(path: Path, size: tuple[int, int] | None) -> np.ndarray:
    """Read one image as float32 in [0, 1], optionally box-resampled to (height, width)."""
    try:
        with Image.open(path) as im:
            im.load()
            im = im.convert("L")
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    arr = np.asarray(im, dtype=np.float32) / np.float32(255.0)
    if size is not None and arr.shape != size:
        h, w = size
        arr = np.asarray(Image.fromarray(arr, mode="F").resize((w, h), Image.BOX), dtype=np.float32)
    # box filtering can overshoot by a few ulps
    return np.clip(arr, 0.0, 1.0)


def _stack(images: list[np.ndarray], labels: list[int], name: str, K: int) -> SampleSet:
    h, w = images[0].shape
    X = np.stack([im.reshape(-1) for im in images], axis=1).astype(np.float32)
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name}: pixel values outside [0, 1]")
    return SampleSet(X=X, labels=np.asarray(labels), image_shape=(h, w, 1), name=name, K=K)


def _require_dir(root) -> Path:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    return root


def load_yaleb(root, subject_start: int = 1, subject_count: int = 38,
               size: tuple[int, int] = (48, 42)) -> SampleSet:
    """Load ``subject_count`` consecutive Extended Yale B subjects starting at ``subject_start`` (1-based)."""
    if subject_start < 1 or subject_count < 1 or subject_start + subject_count - 1 > 38:
        raise ValueError(f"subjects {subject_start}..{subject_start + subject_count - 1} outside 1..38")
    root = _require_dir(root)
    subjects = sorted(p for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for offset in range(subject_count):
        idx = subject_start - 1 + offset
        if idx >= len(subjects):
            raise IngestionError(f"Extended Yale B subject {idx + 1} missing under {root}")
        files = sorted(f for f in subjects[idx].glob("*.pgm") if "ambient" not in f.name.lower())
        if len(files) != 64:
            raise IngestionError(f"Extended Yale B subject {idx + 1} ({subjects[idx].name}): "
                                 f"found {len(files)} images, expected 64")
        for f in files:
            images.append(_read_gray(f, size))
            labels.append(offset)
    return _stack(images, labels, f"yaleb_{subject_start}_{subject_count}", subject_count)


def load_orl(root, size: tuple[int, int] = (32, 32)) -> SampleSet:
    root = _require_dir(root)
    images, labels = [], []
    for s in range(1, 41):
        sdir = root / f"s{s}"
        if not sdir.is_dir():
            raise IngestionError(f"ORL subject s{s} missing under {root}")
        for i in range(1, 11):
            f = sdir / f"{i}.pgm"
            if not f.is_file():
                raise IngestionError(f"ORL subject s{s}: missing {f.name}")
            images.append(_read_gray(f, size))
            labels.append(s - 1)
    return _stack(images, labels, "orl", 40)


_COIL_NAME = re.compile(r"obj(\d+)__(\d+)\.png$", re.IGNORECASE)


def load_coil(root, variant: int = 20, size: tuple[int, int] = (32, 32)) -> SampleSet:
    if variant not in (20, 100):
        raise ValueError("variant must be 20 or 100")
    root = _require_dir(root)
    by_obj: dict[int, list[tuple[int, Path]]] = {}
    for f in root.iterdir():
        m = _COIL_NAME.match(f.name)
        if m:
            by_obj.setdefault(int(m.group(1)), []).append((int(m.group(2)), f))
    images, labels = [], []
    for obj in range(1, variant + 1):
        views = sorted(by_obj.get(obj, []))
        if len(views) != 72:
            raise IngestionError(f"COIL{variant} object {obj}: found {len(views)} images, expected 72")
        for _, f in views:
            images.append(_read_gray(f, size))
            labels.append(obj - 1)
    return _stack(images, labels, f"coil{variant}", variant)


def save_cache(samples: SampleSet, path) -> None:
    meta = {"name": samples.name, "K": samples.K, "image_shape": list(samples.image_shape)}
    container.write(path, _CACHE_KIND, {"X": samples.X, "labels": samples.labels.astype(np.int32)}, meta)


def load_cache(path) -> SampleSet:
    arrays, meta = container.read(path, _CACHE_KIND)
    return SampleSet(X=arrays["X"], labels=arrays["labels"], image_shape=tuple(meta["image_shape"]),
                     name=meta["name"], K=meta["K"])


def synth_union_of_subspaces(spec: SyntheticSpec, image_shape: tuple[int, int, int] | None = None) -> SampleSet:
    """Sample points from K random linear subspaces.

    Each subspace gets an orthonormal basis; points use unit-norm coefficient
    vectors, optional isotropic noise, and the final columns are scaled to unit
    l2 norm. ``image_shape`` lets the network treat the ambient vectors as
    images; it defaults to ``(ambient_dim, 1, 1)``.
    """
    rng = np.random.default_rng(spec.seed)
    D, r, m = spec.ambient_dim, spec.subspace_dim, spec.points_per_subspace
    cols, labels = [], []
    for k in range(spec.K):
        basis, _ = np.linalg.qr(rng.standard_normal((D, r)))
        coef = rng.standard_normal((r, m))
        coef /= np.linalg.norm(coef, axis=0, keepdims=True)
        pts = basis @ coef
        if spec.noise_sigma > 0:
            pts = pts + spec.noise_sigma * rng.standard_normal(pts.shape)
        cols.append(pts)
        labels.extend([k] * m)
    X = np.concatenate(cols, axis=1)
    X /= np.linalg.norm(X, axis=0, keepdims=True)
    if image_shape is None:
        image_shape = (D, 1, 1)
    return SampleSet(X=X, labels=np.asarray(labels), image_shape=image_shape,
                     name=f"synthetic_K{spec.K}_D{D}_r{r}_s{spec.seed}", K=spec.K)
