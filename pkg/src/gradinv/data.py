"""Datasets: synthetic generators and shard partitioners."""

from dataclasses import dataclass

import numpy as np

SYNTH_KINDS = ("gaussian", "stripes", "blobs", "strokes")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, d, d), values in [0, 1]
    labels: np.ndarray  # (N,) integer class ids
    name: str = "data"
    classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, d, d), got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.images[idx], self.labels[idx], self.name, self.classes)

    def flat(self, idx=None):
        """Images as (N, C*d*d) rows, the MLP input layout."""
        imgs = self.images if idx is None else self.images[np.asarray(idx, dtype=int)]
        return imgs.reshape(len(imgs), -1)


def _grid(d):
    ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    return ii / max(d - 1, 1), jj / max(d - 1, 1)


def _stripes(rng, labels, C, d, classes):
    u, v = _grid(d)
    theta = np.pi * labels / classes
    freq = 2.0 + (labels % 3)
    phase = rng.uniform(0, 2 * np.pi, size=len(labels))
    arg = np.cos(theta)[:, None, None] * u + np.sin(theta)[:, None, None] * v
    base = 0.5 + 0.4 * np.sin(2 * np.pi * freq[:, None, None] * arg + phase[:, None, None])
    imgs = np.repeat(base[:, None], C, axis=1)
    imgs *= rng.uniform(0.8, 1.0, size=(len(labels), C, 1, 1))
    return imgs + 0.05 * rng.standard_normal(imgs.shape)


def _blobs(rng, labels, C, d, classes):
    u, v = _grid(d)
    angle = 2 * np.pi * labels / classes
    cu = 0.5 + 0.3 * np.cos(angle) + 0.03 * rng.standard_normal(len(labels))
    cv = 0.5 + 0.3 * np.sin(angle) + 0.03 * rng.standard_normal(len(labels))
    r2 = (u[None] - cu[:, None, None]) ** 2 + (v[None] - cv[:, None, None]) ** 2
    base = np.exp(-r2 / (2 * 0.12**2))
    tint = 0.6 + 0.4 * rng.uniform(size=(len(labels), C, 1, 1))
    imgs = base[:, None] * tint
    return imgs + 0.05 * rng.standard_normal(imgs.shape)


def _segment(canvas, p0, p1, width):
    d = canvas.shape[-1]
    u, v = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    seg = p1 - p0
    t = ((u - p0[0]) * seg[0] + (v - p0[1]) * seg[1]) / max(seg @ seg, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    dist = np.hypot(u - p0[0] - t * seg[0], v - p0[1] - t * seg[1])
    np.maximum(canvas, np.clip(1.5 - dist / width, 0.0, 1.0), out=canvas)


def glyph(label, d, rng, jitter=0.0):
    """A stroke-drawn, digit-like (d, d) image; ``jitter`` shifts every endpoint."""
    prng = np.random.default_rng(int(label) + 7919)
    n_strokes = 2 + int(label) % 3
    pts = prng.uniform(0.2, 0.8, size=(n_strokes + 1, 2)) * (d - 1)
    pts = pts + jitter * d * rng.standard_normal(pts.shape)
    canvas = np.zeros((d, d))
    width = max(d / 28.0, 0.75)
    for a, b in zip(pts[:-1], pts[1:]):
        _segment(canvas, a, b, width)
    return canvas


def _strokes(rng, labels, C, d, classes):
    imgs = np.stack([glyph(lab, d, rng, jitter=0.03) for lab in labels])
    return np.repeat(imgs[:, None], C, axis=1)


def synth_dataset(kind, N, C, d, classes=10, seed=0):
    """Deterministic synthetic images in [0, 1] with integer labels.

    ``gaussian`` is label-independent noise; ``stripes``, ``blobs`` and
    ``strokes`` carry class-dependent structure.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=N)
    if kind == "gaussian":
        imgs = 0.5 + 0.25 * rng.standard_normal((N, C, d, d))
    elif kind == "stripes":
        imgs = _stripes(rng, labels, C, d, classes)
    elif kind == "blobs":
        imgs = _blobs(rng, labels, C, d, classes)
    else:
        imgs = _strokes(rng, labels, C, d, classes)
    return Dataset(np.clip(imgs, 0.0, 1.0), labels, name=f"synth-{kind}", classes=classes)


def near_duplicate_batch(B, d, label=3, spread=0.02, seed=0, classes=10):
    """B variants of one glyph, each with independently jittered strokes."""
    rng = np.random.default_rng(seed)
    imgs = np.stack([glyph(label, d, rng, jitter=spread) for _ in range(B)])
    return Dataset(imgs[:, None], np.full(B, label), name="near-duplicates", classes=classes)


# --- sharding --------------------------------------------------------------


def partition_contiguous(n, workers, sizes=None):
    """Split ``range(n)`` into consecutive shards, evenly or with explicit sizes."""
    if workers < 1:
        raise ValueError("need at least one worker")
    if sizes is None:
        return [np.asarray(s, dtype=int) for s in np.array_split(np.arange(n), workers)]
    sizes = [int(s) for s in sizes]
    if len(sizes) != workers or min(sizes) < 1 or sum(sizes) > n:
        raise ValueError(f"shard sizes {sizes} do not fit {n} items over {workers} workers")
    bounds = np.cumsum([0] + sizes)
    return [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def partition_label_skew(labels, workers, sizes=None):
    """Label-sorted contiguous shards, so each worker sees few classes."""
    order = np.argsort(np.asarray(labels), kind="stable")
    return [order[s] for s in partition_contiguous(len(order), workers, sizes)]
