"""GIST descriptors and brute-force K-nearest-neighbor classification."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import EmptyIndex, WrongDimensions
from .fft2d import fft2, ifft2
from .imaging import GrayImage

GIST_DIM = 320


@dataclass(frozen=True)
class GistParams:
    """Frozen filter-bank constants. 3 scales x (8, 8, 4) orientations,
    each pooled on a 4x4 grid, gives 20 * 16 = 320 values."""
    image_size: int = 64
    orientations: tuple[int, ...] = (8, 8, 4)
    grid: int = 4
    radial_bandwidth: float = 0.35
    peak_frequency: float = 0.3   # cycles/pixel at the finest scale
    scale_ratio: float = 1.85
    angular_base: float = 16.0 / 32.0 ** 2

    @property
    def n_filters(self) -> int:
        return sum(self.orientations)

    @property
    def dim(self) -> int:
        return self.n_filters * self.grid * self.grid


DEFAULT_PARAMS = GistParams()


def filter_parameters(params: GistParams = DEFAULT_PARAMS) -> list[tuple[float, float, float, float]]:
    """(bandwidth, peak frequency, angular sharpness, orientation) per channel,
    scale-major then orientation."""
    out = []
    for scale, n_or in enumerate(params.orientations):
        for j in range(n_or):
            out.append((
                params.radial_bandwidth,
                params.peak_frequency / params.scale_ratio ** scale,
                params.angular_base * n_or ** 2,
                np.pi / n_or * j,
            ))
    return out


@lru_cache(maxsize=4)
def gabor_bank(params: GistParams = DEFAULT_PARAMS) -> np.ndarray:
    """Transfer functions, shape (n_filters, n, n), in unshifted DFT order.

    Each channel is a Gaussian in radial frequency around its scale's peak
    (peaks spaced geometrically by ``scale_ratio``) times a Gaussian in
    angle around its orientation.
    """
    n = params.image_size
    k = np.arange(n)
    f = np.where(k < n // 2, k, k - n).astype(np.float64)
    fx, fy = np.meshgrid(f, f)
    fr = np.sqrt(fx ** 2 + fy ** 2)
    theta = np.arctan2(fy, fx)
    bank = np.empty((params.n_filters, n, n))
    for i, (bw, peak, sharp, orient) in enumerate(filter_parameters(params)):
        tr = theta + orient
        tr = tr + 2 * np.pi * (tr < -np.pi) - 2 * np.pi * (tr > np.pi)
        bank[i] = np.exp(-10 * bw * (fr / n / peak - 1) ** 2 - 2 * sharp * np.pi * tr ** 2)
    bank.setflags(write=False)
    return bank


def _check_image(img, params: GistParams) -> np.ndarray:
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img)
    n = params.image_size
    if px.shape != (n, n):
        raise WrongDimensions(f"GIST expects a {n}x{n} image, got {px.shape[1]}x{px.shape[0]}")
    return px.astype(np.float64) / 255.0


def filter_responses(img, params: GistParams = DEFAULT_PARAMS) -> np.ndarray:
    """Complex response of every channel, shape (n_filters, n, n)."""
    x = _check_image(img, params)
    return ifft2(fft2(x)[None, :, :] * gabor_bank(params))


def pool_blocks(maps: np.ndarray, grid: int) -> np.ndarray:
    """Average each (…, n, n) map over a grid x grid partition, row-major."""
    n = maps.shape[-1]
    b = n // grid
    lead = maps.shape[:-2]
    return maps.reshape(*lead, grid, b, grid, b).mean(axis=(-3, -1)).reshape(*lead, grid * grid)


def gist_descriptor(img, params: GistParams = DEFAULT_PARAMS) -> np.ndarray:
    """320-dim descriptor: pooled magnitude per channel, channels in
    scale-major/orientation order, blocks row-major."""
    mag = np.abs(filter_responses(img, params))
    return pool_blocks(mag, params.grid).reshape(-1)


def gist_descriptors(images, params: GistParams = DEFAULT_PARAMS) -> np.ndarray:
    """Batched gist_descriptor; row i equals gist_descriptor(images[i])."""
    if len(images) == 0:
        return np.zeros((0, params.dim))
    x = np.stack([_check_image(img, params) for img in images])
    spec = fft2(x)[:, None, :, :] * gabor_bank(params)[None]
    mag = np.abs(ifft2(spec))
    return pool_blocks(mag, params.grid).reshape(len(images), -1)


@dataclass(frozen=True)
class Prediction:
    label: str
    scores: dict  # label -> vote fraction, every gallery label present

    def score_vector(self, labels: Sequence[str]) -> np.ndarray:
        return np.array([self.scores.get(lab, 0.0) for lab in labels])


@dataclass
class KnnIndex:
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, GIST_DIM)))
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64).reshape(-1, GIST_DIM)
        self.labels = [str(x) for x in self.labels]
        if len(self.labels) != len(self.descriptors):
            raise ValueError("one label per descriptor required")

    @classmethod
    def build(cls, descriptors, labels) -> "KnnIndex":
        return cls(np.asarray(descriptors, dtype=np.float64), list(labels))

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> list[str]:
        return sorted(set(self.labels))

    def add(self, descriptor, label: str) -> None:
        d = np.asarray(descriptor, dtype=np.float64).reshape(1, GIST_DIM)
        self.descriptors = np.vstack([self.descriptors, d])
        self.labels.append(str(label))


def knn_classify(index: KnnIndex, query, k: int = 3) -> Prediction:
    """Majority vote among the k nearest gallery vectors (Euclidean).

    Neighbors are ranked by (distance, label), so exact distance ties go to
    the lexicographically smallest label and insertion order never matters.
    Tied vote counts are resolved by the nearest neighbor among the tied
    labels.
    """
    if len(index) == 0:
        raise EmptyIndex("gallery is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64).reshape(GIST_DIM)
    dist = np.sqrt(((index.descriptors - q) ** 2).sum(axis=1))
    labels = np.asarray(index.labels)
    order = np.lexsort((labels, dist))[:k]
    neigh = [index.labels[i] for i in order]
    counts: dict[str, int] = {}
    for lab in neigh:
        counts[lab] = counts.get(lab, 0) + 1
    best = max(counts.values())
    tied = {lab for lab, c in counts.items() if c == best}
    winner = next(lab for lab in neigh if lab in tied)
    kk = len(neigh)
    scores = {lab: counts.get(lab, 0) / kk for lab in index.classes}
    return Prediction(winner, scores)


# -- persistence ----------------------------------------------------------------

GALLERY_MAGIC = b"SIGX"
GALLERY_VERSION = 1


def save_gallery(index: KnnIndex, path) -> None:
    """Flat little-endian format: magic, version, count, dim, float32 rows,
    then labels as u32 length + UTF-8."""
    with open(path, "wb") as fh:
        fh.write(GALLERY_MAGIC)
        fh.write(struct.pack("<III", GALLERY_VERSION, len(index), GIST_DIM))
        fh.write(index.descriptors.astype("<f4").tobytes())
        for lab in index.labels:
            raw = lab.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_gallery(path) -> KnnIndex:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != GALLERY_MAGIC:
        raise ValueError("not a gallery file")
    version, count, dim = struct.unpack_from("<III", buf, 4)
    if version != GALLERY_VERSION or dim != GIST_DIM:
        raise ValueError(f"unsupported gallery version {version} / dim {dim}")
    pos = 16
    nbytes = count * dim * 4
    desc = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim)
    pos += nbytes
    labels = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        labels.append(buf[pos:pos + n].decode("utf-8"))
        pos += n
    return KnnIndex(desc.astype(np.float64), labels)


def export_csv(index: KnnIndex, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"g{i}" for i in range(GIST_DIM)])
        for lab, row in zip(index.labels, index.descriptors):
            w.writerow([lab] + [repr(float(v)) for v in row])
