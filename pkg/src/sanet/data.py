"""Dataset generation, tensor file I/O, and map export.

Binary tensor container ("SAT1"): magic bytes | u8 dtype (0 = f32, 1 = u8)
| u8 rank | u32 little-endian dims | raw little-endian row-major payload.
Images are written as rank-3 float32 (c, h, w) in [0, 1], label maps as
rank-2 uint8.

The synthetic corpus draws colored axis-aligned rectangles and circles on
a textured background; every sample is a pure function of (seed, index),
so regenerating a directory reproduces it byte for byte.
"""
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import SegTargets
from .tensor import Tensor

MAGIC = b"SAT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class FormatError(ValueError):
    """Malformed tensor file; the message names the failing byte offset."""


def write_tensor(path, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or uint8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        f.write(data.tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0: {blob[:4]!r}")
    if len(blob) < 6:
        raise FormatError(f"{path}: truncated header at offset {len(blob)}")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code} at offset 4")
    if rank < 1 or rank > 8:
        raise FormatError(f"{path}: implausible rank {rank} at offset 5")
    dims_end = 6 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError(f"{path}: truncated dims at offset {len(blob)}")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: zero dim in {dims} at offset 6")
    dtype = _DTYPES[code]
    expected = dims_end + int(np.prod(dims)) * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload size mismatch at offset {min(len(blob), expected)}: "
            f"file has {len(blob)} bytes, header implies {expected}")
    arr = np.frombuffer(blob, dtype=dtype, offset=dims_end).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


# ---------------------------------------------------------------------------
# netpbm writers

def normalize_u8(arr):
    """Min-max to [0, 255]; a constant map becomes mid-gray 128."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.full(arr.shape, 128, dtype=np.uint8)
    return np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, gray):
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


# ---------------------------------------------------------------------------
# synthetic dataset

@dataclass
class SynthCfg:
    classes: int = 3              # class 0 is background
    image_size: int = 64
    shapes_min: int = 1
    shapes_max: int = 4
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.shapes_min > self.shapes_max or self.shapes_min < 0:
            raise ValueError(
                f"bad shapes range [{self.shapes_min}, {self.shapes_max}]")


# fixed, clearly separated base colors; class j uses palette[j % len]
_PALETTE = np.array([
    [0.35, 0.35, 0.35],
    [0.85, 0.25, 0.25],
    [0.25, 0.75, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.75, 0.25],
    [0.70, 0.30, 0.80],
    [0.25, 0.75, 0.75],
], dtype=np.float64)


def make_sample(cfg, index):
    """(image (3,s,s) float32 in [0,1], labels (s,s) uint8) for one index."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
    s = cfg.image_size
    base = _PALETTE[0] + rng.uniform(-0.08, 0.08, size=3)
    image = np.empty((3, s, s), dtype=np.float64)
    image[:] = base[:, None, None]
    labels = np.zeros((s, s), dtype=np.uint8)

    yy, xx = np.mgrid[0:s, 0:s]
    count = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    for _ in range(count):
        cls = int(rng.integers(1, cfg.classes))
        color = _PALETTE[cls % len(_PALETTE)] + rng.uniform(-0.15, 0.15, size=3)
        extent = int(rng.integers(s // 8, s // 3 + 1))
        cy = int(rng.integers(0, s))
        cx = int(rng.integers(0, s))
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= extent) & (np.abs(xx - cx) <= extent)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= extent ** 2
        labels[mask] = cls
        image[:, mask] = color[:, None]

    image += rng.normal(0.0, cfg.noise_std, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def generate_dataset(cfg, count, out_dir):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    for i in range(count):
        image, labels = make_sample(cfg, i)
        write_tensor(os.path.join(out_dir, "images", f"{i:06d}.sat"), image)
        write_tensor(os.path.join(out_dir, "labels", f"{i:06d}.sat"), labels)
    meta = (f"classes = {cfg.classes}\nsize = {cfg.image_size}\n"
            f"seed = {cfg.seed}\ncount = {count}\n")
    with open(os.path.join(out_dir, "meta.txt"), "w", encoding="utf-8") as f:
        f.write(meta)


def read_meta(data_dir):
    meta = {}
    path = os.path.join(data_dir, "meta.txt")
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, value = (part.strip() for part in line.split("=", 1))
            meta[key] = int(value)
    for key in ("classes", "size", "seed", "count"):
        if key not in meta:
            raise FormatError(f"{path}: missing key {key!r}")
    return meta


@dataclass
class SegBatch:
    images: Tensor                # (n, 3, h, w) in [0, 1]
    targets: SegTargets


def load_batch(data_dir, indices, classes, flip=None):
    """Assemble a batch; flip[i] mirrors sample i horizontally."""
    images, labels = [], []
    for i in indices:
        img = read_tensor(os.path.join(data_dir, "images", f"{i:06d}.sat"))
        lab = read_tensor(os.path.join(data_dir, "labels", f"{i:06d}.sat"))
        images.append(img)
        labels.append(lab)
    images = np.stack(images)
    labels = np.stack(labels).astype(np.int64)
    if flip is not None:
        for i, do in enumerate(flip):
            if do:
                images[i] = images[i, :, :, ::-1]
                labels[i] = labels[i, :, ::-1]
    targets = SegTargets.from_labels(labels, classes)
    return SegBatch(images=Tensor(images), targets=targets)


# ---------------------------------------------------------------------------
# map export

def _to_common_size(arr2d, size):
    """Upsample a 2-d map to (size, size) with the library interpolator."""
    h, w = arr2d.shape
    if (h, w) == (size, size):
        return arr2d
    t = Tensor(arr2d[None, None].astype(np.float32))
    return T.bilinear_upsample(t, size // h).data[0, 0]


def label_colors(labels):
    pal = np.round(_PALETTE * 255).astype(np.uint8)
    return pal[labels % len(_PALETTE)]


def export_maps(outputs, pred_labels, path_prefix, size):
    """Write per-head attention/feature/output PGMs and a PPM label overlay.

    For each attention head: the attention mask and the module output
    reduced over channels by max, and the single most-activated (largest
    mean) channel of the main-branch features.  Everything is rescaled to
    `size` and min-max normalized; filenames carry the reduction used.
    """
    written = []
    for i, (out, attn, res) in enumerate(outputs.sa_maps, start=1):
        views = {
            f"head{i}_attn_channelmax.pgm": attn.data[0].max(axis=0),
            f"head{i}_out_channelmax.pgm": out.data[0].max(axis=0),
            f"head{i}_res_topchannel.pgm":
                res.data[0, res.data[0].mean(axis=(1, 2)).argmax()],
        }
        for fname, arr in views.items():
            path = path_prefix + fname
            write_pgm(path, normalize_u8(_to_common_size(arr, size)))
            written.append(path)
    path = path_prefix + "labels.ppm"
    write_ppm(path, label_colors(pred_labels[0]))
    written.append(path)
    return written
