"""File formats: IDX datasets, binary PGM/PPM images and trajectory CSV."""

import csv
import os
import struct

import numpy as np

from .data import Dataset

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_IDX_UBYTE = 0x08


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, path, offset, msg):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.path = path
        self.offset = offset


# --- IDX ------------------------------------------------------------------------


def read_idx(path):
    """Parse an unsigned-byte IDX file into a uint8 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(path, len(raw), f"header needs 4 bytes, file has {len(raw)}")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != _IDX_UBYTE or ndim not in (1, 3, 4):
        raise FormatError(path, 0, f"bad magic number 0x{struct.unpack('>I', raw[:4])[0]:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(path, len(raw), f"header needs {head} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    expected = head + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(path, min(len(raw), expected), f"expected {expected} bytes for dims {dims}, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims).copy()


def save_idx(path, array):
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError(f"IDX writer handles uint8 only, got {arr.dtype}")
    if arr.ndim not in (1, 3, 4):
        raise ValueError(f"IDX arrays must be 1-, 3- or 4-D, got {arr.ndim}-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, _IDX_UBYTE, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path=None, classes=None, name=None):
    """Dataset from an IDX image file and optional IDX label file; pixels / 255."""
    imgs = read_idx(images_path)
    if imgs.ndim == 1:
        raise FormatError(images_path, 0, "label file given where images were expected")
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(labels_path, 0, "image file given where labels were expected")
    else:
        labels = np.zeros(len(imgs), dtype=np.uint8)
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 1
    images = imgs.astype(float) / 255.0
    return Dataset(images, labels.astype(int), name=name or os.path.basename(images_path), classes=classes)


def to_bytes(images):
    return np.rint(np.clip(np.asarray(images, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_idx_dataset(ds: Dataset, images_path, labels_path=None):
    imgs = to_bytes(ds.images)
    save_idx(images_path, imgs[:, 0] if imgs.shape[1] == 1 else imgs)
    if labels_path is not None:
        save_idx(labels_path, ds.labels.astype(np.uint8))


# --- PGM / PPM ------------------------------------------------------------------


def _check_range(img):
    img = np.asarray(img, dtype=float)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError(f"pixels must lie in [0, 1], got range [{img.min():g}, {img.max():g}]")
    return img


def save_pgm(img, path):
    """Binary P5, maxval 255, rounded to nearest. Accepts (d, d) or (1, d, d)."""
    img = _check_range(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"PGM needs a single channel, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_bytes(img).tobytes())


def save_ppm(img, path):
    """Binary P6 composite of a (3, d, d) image."""
    img = _check_range(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM needs shape (3, h, w), got {img.shape}")
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_bytes(np.moveaxis(img, 0, -1)).tobytes())


def save_image(img, stem):
    """Write an image as PGM (one channel) or three PGM planes plus a PPM composite.

    Values are clipped to [0, 1] first. Returns the written paths.
    """
    img = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    if img.ndim == 2 or img.shape[0] == 1:
        save_pgm(img, stem + ".pgm")
        return [stem + ".pgm"]
    paths = []
    for c in range(img.shape[0]):
        paths.append(f"{stem}_c{c}.pgm")
        save_pgm(img[c], paths[-1])
    if img.shape[0] == 3:
        paths.append(stem + ".ppm")
        save_ppm(img, paths[-1])
    return paths


def _header_tokens(raw, path, count):
    """First ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(path, pos, "truncated header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError(path, pos, "missing whitespace after header")
    return tokens, pos + 1


def load_pgm(path):
    """Read P5 (returns (h, w)) or P6 (returns (3, h, w)) as floats in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = _header_tokens(raw, path, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(path, 0, f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(path, 2, "non-integer size or maxval") from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise FormatError(path, 2, f"unsupported size {w}x{h} or maxval {maxval}")
    chans = 3 if magic == b"P6" else 1
    need = w * h * chans
    if len(raw) - pos < need:
        raise FormatError(path, len(raw), f"expected {need} raster bytes, got {len(raw) - pos}")
    px = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).astype(float) / maxval
    if chans == 1:
        return px.reshape(h, w)
    return np.moveaxis(px.reshape(h, w, 3), -1, 0)


# --- trajectories ----------------------------------------------------------------


def _fmt(x):
    return "%.17g" % x


def write_trajectory_csv(result, path):
    losses = np.asarray(result.loss_trajectory, dtype=float)
    l1 = result.l1_trajectory
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["iter", "loss", "mean_l1"])
        for i, loss in enumerate(losses):
            out.writerow([i + 1, _fmt(loss), _fmt(l1[i]) if l1 is not None and len(l1) else ""])


def read_trajectory_csv(path):
    """Returns ``(iters, loss, mean_l1)``; ``mean_l1`` is None when the column is empty."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["iter", "loss", "mean_l1"]:
        raise FormatError(path, 0, "missing iter,loss,mean_l1 header")
    body = rows[1:]
    iters = np.array([int(r[0]) for r in body], dtype=int)
    loss = np.array([float(r[1]) for r in body])
    if body and all(r[2] for r in body):
        l1 = np.array([float(r[2]) for r in body])
    else:
        l1 = None
    return iters, loss, l1
