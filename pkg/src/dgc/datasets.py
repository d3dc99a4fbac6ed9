"""Synthetic experiment data: Pacman annuli with functional responses and
handwritten digits with natural-image backgrounds."""

from __future__ import annotations

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PACMAN_CLUSTERS = ("inner", "outer")
PACMAN_COLUMNS = ("x1", "x2", "y", "cluster", "split")
MANIFEST_COLUMNS = ("filename", "label", "cluster", "split")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


def data_root() -> Path:
    """Dataset root: $DGC_DATA_DIR, else ~/dgc_data."""
    return Path(os.environ.get("DGC_DATA_DIR", Path.home() / "dgc_data"))


@dataclass
class TaskData:
    """Inputs, side-information responses and (optional) ground-truth clusters."""

    x: np.ndarray
    y: np.ndarray
    cluster: Optional[np.ndarray] = None
    cluster_names: tuple = ()
    label_names: tuple = ()

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have the same length")
        if self.cluster is not None and len(self.cluster) != len(self.x):
            raise ValueError("cluster labels must align with x")

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "TaskData":
        return TaskData(self.x[idx], self.y[idx],
                        None if self.cluster is None else self.cluster[idx],
                        self.cluster_names, self.label_names)


# ---------------------------------------------------------------------------
# Pacman
# ---------------------------------------------------------------------------

@dataclass
class PacmanData:
    x: np.ndarray  # [N, 2]
    y: np.ndarray  # [N]
    cluster: np.ndarray  # [N] 0 = inner, 1 = outer
    split: np.ndarray  # [N] "train" | "test"
    angle: np.ndarray  # [N] radians, generation metadata

    def __len__(self) -> int:
        return len(self.x)

    def part(self, split: str) -> TaskData:
        m = self.split == split
        return TaskData(self.x[m].astype(np.float32), self.y[m].astype(np.float32),
                        self.cluster[m], PACMAN_CLUSTERS)


def generate_pacman(n_per_annulus: int = 10_000, seed: int = 0, *,
                    n_train_per_annulus: Optional[int] = None, inner_radius: float = 0.8,
                    outer_radius: float = 1.0, band: float = 0.0,
                    mouth: float = math.pi / 3) -> PacmanData:
    """Two concentric Pacman-shaped arcs with opposite-trend responses.

    Angles are drawn uniformly on the arc that leaves a ``mouth`` wedge open
    around the positive x axis. Ordering each arc's points clockwise, the
    inner arc gets the split points u_i = i/(n-1) as y = 1 - u_i (linear,
    1 -> 0 clockwise). The outer arc, ordered counterclockwise, gets
    (exp(u_i) - 1)/(e - 1): exponential growth 0 -> 1 in the opposite
    direction, so both curves meet only at the arc ends. 3/4 of each arc goes to training unless
    ``n_train_per_annulus`` says otherwise.
    """
    if n_per_annulus < 2:
        raise ValueError("need at least two points per annulus")
    n_train = (3 * n_per_annulus) // 4 if n_train_per_annulus is None else n_train_per_annulus
    if not 0 <= n_train <= n_per_annulus:
        raise ValueError("n_train_per_annulus out of range")
    rng = np.random.default_rng(seed)
    u = np.linspace(0.0, 1.0, n_per_annulus)
    responses = {0: 1.0 - u, 1: np.clip(np.expm1(u) / math.expm1(1.0), 0.0, 1.0)}
    xs, ys, cs, ss, angs = [], [], [], [], []
    for c, radius in enumerate((inner_radius, outer_radius)):
        theta = rng.uniform(mouth / 2, 2 * math.pi - mouth / 2, n_per_annulus)
        theta = np.sort(theta)[::-1]  # clockwise = decreasing angle
        if c == 1:
            theta = theta[::-1]
        r = radius + (rng.uniform(-band, band, n_per_annulus) if band > 0 else 0.0)
        xs.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))
        ys.append(responses[c])
        cs.append(np.full(n_per_annulus, c))
        split = np.full(n_per_annulus, "test", dtype=object)
        split[rng.permutation(n_per_annulus)[:n_train]] = "train"
        ss.append(split)
        angs.append(theta)
    return PacmanData(np.concatenate(xs), np.concatenate(ys), np.concatenate(cs),
                      np.concatenate(ss).astype(str), np.concatenate(angs))


def write_pacman_csv(data: PacmanData, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PACMAN_COLUMNS)
        for (a, b), y, c, s in zip(data.x, data.y, data.cluster, data.split):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(y)), PACMAN_CLUSTERS[c], s])


def read_pacman_csv(path) -> PacmanData:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetFormatError("empty file", 1)
        missing = [c for c in PACMAN_COLUMNS if c not in header]
        if missing:
            raise DatasetFormatError(f"missing column(s) {', '.join(missing)}", 1)
        col = {name: header.index(name) for name in PACMAN_COLUMNS}
        xs, ys, cs, ss = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetFormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                xs.append((float(row[col["x1"]]), float(row[col["x2"]])))
                ys.append(float(row[col["y"]]))
            except ValueError as exc:
                raise DatasetFormatError(str(exc), lineno) from None
            if row[col["cluster"]] not in PACMAN_CLUSTERS:
                raise DatasetFormatError(f"unknown cluster {row[col['cluster']]!r}", lineno)
            cs.append(PACMAN_CLUSTERS.index(row[col["cluster"]]))
            if row[col["split"]] not in ("train", "test"):
                raise DatasetFormatError(f"unknown split {row[col['split']]!r}", lineno)
            ss.append(row[col["split"]])
    x = np.array(xs, dtype=np.float64).reshape(-1, 2)
    return PacmanData(x, np.array(ys), np.array(cs, dtype=np.int64), np.array(ss),
                      np.arctan2(x[:, 1], x[:, 0]) % (2 * math.pi))


# ---------------------------------------------------------------------------
# digits with backgrounds
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Read an IDX array (the MNIST distribution format), optionally gzipped."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetFormatError(f"{path}: not an IDX file")
    dtype = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}[raw[2]]
    ndim = raw[3]
    shape = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    return np.frombuffer(raw, dtype=dtype, offset=4 + 4 * ndim).reshape(shape)


def _find(root: Path, stems: Sequence[str]) -> Path:
    for stem in stems:
        for suffix in ("", ".gz"):
            p = root / (stem + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"none of {list(stems)} found under {root}")


def load_mnist(root=None) -> dict:
    """Standard MNIST IDX files from ``root`` (default: <data root>/mnist)."""
    root = Path(root) if root is not None else data_root() / "mnist"
    out = {}
    for part, prefix in (("train", "train"), ("test", "t10k")):
        out[f"{part}_images"] = read_idx(_find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"]))
        out[f"{part}_labels"] = read_idx(_find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"]))
    return out


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.max() > 1.0:
        img = img / 255.0
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return img


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    from skimage.transform import resize
    return resize(img, (size, size), order=1, anti_aliasing=True, mode="reflect")


def load_cifar_images(root) -> np.ndarray:
    """CIFAR-10 python batches as uint8 [N, 32, 32, 3]."""
    import pickle
    root = Path(root)
    batches = sorted(root.glob("data_batch_*"))
    if not batches:
        raise FileNotFoundError(f"no CIFAR-10 batches under {root}")
    images = []
    for b in batches:
        with open(b, "rb") as fh:
            d = pickle.load(fh, encoding="bytes")
        images.append(d[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    return np.concatenate(images)


PHOTO_NAMES = ("astronaut", "camera", "cat", "chelsea", "coffee", "coins", "rocket",
               "immunohistochemistry", "moon", "grass", "gravel", "brick", "horse", "clock",
               "retina", "page", "text")
MIN_PATCH_MEAN = 0.15  # near-black crops would leave the digit looking clean


def background_pool(n: int, seed: int = 0, *, size: int = 28, source=None) -> np.ndarray:
    """``n`` grayscale background patches in [0, 1], shape [n, size, size].

    With CIFAR-10 available (``source`` or <data root>/cifar-10-batches-py)
    a patch is a random crop of a random CIFAR image. Otherwise patches are
    random crops of the natural photographs bundled with scikit-image,
    each crop 48-160 px wide and downsampled, which gives CIFAR-like
    object-scale texture. Crops darker on average than ``MIN_PATCH_MEAN``
    are redrawn.
    """
    rng = np.random.default_rng(seed)
    cifar_dir = Path(source) if source is not None else data_root() / "cifar-10-batches-py"
    out = np.empty((n, size, size))
    if cifar_dir.exists():
        images = load_cifar_images(cifar_dir)
        for i in range(n):
            img = _to_gray(images[rng.integers(len(images))])
            r, c = rng.integers(0, 32 - size + 1, 2)
            out[i] = img[r:r + size, c:c + size]
        return out
    import skimage.data
    photos = [_to_gray(getattr(skimage.data, name)()) for name in PHOTO_NAMES]
    for i in range(n):
        while True:
            img = photos[rng.integers(len(photos))]
            w = int(rng.integers(48, min(161, min(img.shape[:2]) + 1)))
            r = rng.integers(0, img.shape[0] - w + 1)
            c = rng.integers(0, img.shape[1] - w + 1)
            crop = img[r:r + w, c:c + w]
            if crop.mean() >= MIN_PATCH_MEAN:
                break
        out[i] = np.clip(_resize(crop, size), 0.0, 1.0)
    return out


@dataclass
class CompositeDigits:
    images: np.ndarray  # [N, 28, 28] float32 in [0, 1]
    label: np.ndarray  # [N] 0 = first digit, 1 = second digit
    cluster: np.ndarray  # [N] index into cluster_names
    cluster_names: tuple
    label_names: tuple

    def __len__(self) -> int:
        return len(self.images)

    def task_data(self) -> TaskData:
        return TaskData(self.images.reshape(len(self), -1).astype(np.float32),
                        self.label.astype(np.int64), self.cluster, self.cluster_names,
                        self.label_names)


def superpose(digit: np.ndarray, background: np.ndarray, mode: str = "max") -> np.ndarray:
    if mode == "max":
        out = np.maximum(digit, background)
    elif mode == "sum":
        out = digit + background
    else:
        raise ValueError(f"unknown superposition mode {mode!r}")
    return np.clip(out, 0.0, 1.0)


def generate_composite_digits(digits_a: np.ndarray, digits_b: np.ndarray,
                              backgrounds: np.ndarray, seed: int = 0, *,
                              names: tuple = ("2", "7"), mode: str = "max") -> CompositeDigits:
    """Give a random half (rounded down) of each digit class a background.

    Clusters: 0 = A, 1 = B, 2 = A + background, 3 = B + background. The
    binary response is the digit identity only.
    """
    if len(digits_a) == 0 or len(digits_b) == 0:
        raise ValueError("both digit classes need at least one image")
    if len(backgrounds) == 0:
        raise ValueError("background pool is empty")
    rng = np.random.default_rng(seed)
    images, labels, clusters = [], [], []
    for label, digits in enumerate((digits_a, digits_b)):
        digits = np.asarray(digits, dtype=np.float64)
        if digits.max() > 1.0:
            digits = digits / 255.0
        with_bg = np.zeros(len(digits), dtype=bool)
        with_bg[rng.permutation(len(digits))[:len(digits) // 2]] = True
        picks = rng.integers(0, len(backgrounds), len(digits))
        for img, bg, pick in zip(digits, with_bg, picks):
            images.append(superpose(img, backgrounds[pick], mode) if bg else img)
            labels.append(label)
            clusters.append(label + 2 * bg)
    a, b = names
    return CompositeDigits(np.array(images, dtype=np.float32), np.array(labels),
                           np.array(clusters), (a, b, f"{a}B", f"{b}B"), (a, b))


def build_noisy_digits(seed: int = 0, *, digits=(2, 7), n_train: Optional[int] = None,
                       n_test: Optional[int] = None, mnist_root=None, background_source=None,
                       mode: str = "max") -> tuple:
    """Train/test composite-digit sets from the standard MNIST split.

    Optional ``n_train``/``n_test`` draw a random subsample after
    compositing (the full sets hold 12,223 / 2,060 images for digits 2, 7).
    """
    mnist = load_mnist(mnist_root)
    out = []
    for i, part in enumerate(("train", "test")):
        imgs, labels = mnist[f"{part}_images"], mnist[f"{part}_labels"]
        a, b = imgs[labels == digits[0]], imgs[labels == digits[1]]
        pool = background_pool(len(a) + len(b), seed=seed * 2 + i, source=background_source)
        data = generate_composite_digits(a, b, pool, seed=seed * 2 + i,
                                         names=tuple(str(d) for d in digits), mode=mode)
        n = n_train if part == "train" else n_test
        if n is not None and n < len(data):
            idx = np.sort(np.random.default_rng(seed + 100 + i).permutation(len(data))[:n])
            data = CompositeDigits(data.images[idx], data.label[idx], data.cluster[idx],
                                   data.cluster_names, data.label_names)
        out.append(data)
    return tuple(out)


def write_image_archive(path, parts: dict) -> None:
    """Directory of per-cluster PNG subfolders plus manifest.csv.

    ``parts`` maps split name to CompositeDigits.
    """
    from PIL import Image
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rows = []
    for split, data in parts.items():
        for i in range(len(data)):
            name = data.cluster_names[data.cluster[i]]
            (path / name).mkdir(exist_ok=True)
            rel = f"{name}/{split}_{i:05d}.png"
            pixels = np.round(data.images[i] * 255).astype(np.uint8)
            Image.fromarray(pixels, mode="L").save(path / rel, optimize=False)
            rows.append((rel, data.label_names[data.label[i]], name, split))
    with open(path / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)


def read_image_archive(path) -> dict:
    from PIL import Image
    path = Path(path)
    manifest = path / "manifest.csv"
    if not manifest.exists():
        raise DatasetFormatError(f"{manifest} not found")
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None) or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise DatasetFormatError(f"missing column(s) {', '.join(missing)}", 1)
        col = {c: header.index(c) for c in MANIFEST_COLUMNS}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetFormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
            rows.append([row[col[c]] for c in MANIFEST_COLUMNS])
    cluster_names = tuple(sorted({r[2] for r in rows}, key=lambda s: (s.endswith("B"), s)))
    label_names = tuple(sorted({r[1] for r in rows}))
    parts = {}
    for split in dict.fromkeys(r[3] for r in rows):
        sel = [r for r in rows if r[3] == split]
        images = np.stack([np.asarray(Image.open(path / r[0]), dtype=np.float32) / 255.0 for r in sel])
        parts[split] = CompositeDigits(images, np.array([label_names.index(r[1]) for r in sel]),
                                       np.array([cluster_names.index(r[2]) for r in sel]),
                                       cluster_names, label_names)
    return parts


def load_dataset(path, format: str):
    """Load ``pacman-csv`` (a file) or ``image-archive`` (a directory)."""
    if format == "pacman-csv":
        return read_pacman_csv(path)
    if format == "image-archive":
        return read_image_archive(path)
    raise ValueError(f"unknown dataset format {format!r}")
