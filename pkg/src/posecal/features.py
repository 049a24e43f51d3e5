"""Overlapped-patch HoG features.

An image is resized to 112x112 and cut into a 6x6 grid of 32x32 patches with
stride 16. Each patch yields 8x8 cells of 4x4 pixels, with a 9-bin unsigned
orientation histogram per cell (8*8*9 = 576 values), L2-normalized per cell.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import N_PATCHES, PATCH_DIM, InvalidArgument

N_BINS = 9
CELL = 4
EPS = 1e-6
CACHE_MAGIC = b"PHOG"
CACHE_VERSION = 1
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class PatchGridSpec:
    image_size: int = 112
    patch_size: int = 32
    stride: int = 16
    grid_n: int = 6

    def __post_init__(self):
        if (self.image_size - self.patch_size) % self.stride or \
                (self.image_size - self.patch_size) // self.stride + 1 != self.grid_n:
            raise InvalidArgument(f"inconsistent patch grid: {self}")


DEFAULT_GRID = PatchGridSpec()


def as_gray(img):
    """Return a float64 2-D luminance array; RGB input is converted with BT.601 weights."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] in (3, 4):
        img = img[..., :3] @ _LUMA
    if img.ndim != 2 or img.size == 0:
        raise InvalidArgument(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidArgument("image contains non-finite values")
    return img


def resize(img, target):
    """Bilinear resize to ``target`` x ``target`` using pixel-centre alignment."""
    if target < 1:
        raise InvalidArgument(f"target size must be >= 1, got {target}")
    img = as_gray(img)
    h, w = img.shape
    if h == target and w == target:
        return img.copy()

    def axis(n_in):
        pos = (np.arange(target) + 0.5) * (n_in / target) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    r0, r1, fr = axis(h)
    c0, c1, fc = axis(w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    out = top * (1 - fr[:, None]) + bottom * fr[:, None]
    return np.clip(out, 0.0, 1.0)


def extract_patches(img, spec=DEFAULT_GRID):
    """Return the (grid_n**2, patch_size, patch_size) stack of patches in row-major order."""
    img = as_gray(img)
    if img.shape != (spec.image_size, spec.image_size):
        raise InvalidArgument(f"expected a {spec.image_size}x{spec.image_size} image, got {img.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(img, (spec.patch_size, spec.patch_size))
    grid = windows[::spec.stride, ::spec.stride]
    return grid.reshape(-1, spec.patch_size, spec.patch_size).copy()


def _hog_batch(patches):
    k, size, _ = patches.shape
    padded = np.pad(patches, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = (padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]) / 2.0
    gy = (padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    angle = np.mod(np.rad2deg(np.arctan2(gy, gx)), 180.0)

    # bins are centred on 0, 20, ..., 160 degrees; votes split between the two nearest
    pos = angle / (180.0 / N_BINS)
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.intp) % N_BINS
    hi = (lo + 1) % N_BINS

    n_cells = size // CELL
    rows = np.arange(size) // CELL
    cell = rows[:, None] * n_cells + rows[None, :]
    base = (np.arange(k)[:, None, None] * n_cells * n_cells + cell[None]) * N_BINS
    total = k * n_cells * n_cells * N_BINS
    hist = np.bincount((base + lo).ravel(), weights=(mag * (1 - frac)).ravel(), minlength=total)
    hist += np.bincount((base + hi).ravel(), weights=(mag * frac).ravel(), minlength=total)
    hist = hist.reshape(k, n_cells * n_cells, N_BINS)
    norm = np.sqrt(np.sum(hist * hist, axis=2, keepdims=True) + EPS * EPS)
    hist /= norm
    return hist.reshape(k, -1)


def compute_hog(patch):
    """576-value HoG descriptor of one 32x32 patch (cells row-major, then bins)."""
    patch = as_gray(patch)
    if patch.shape != (32, 32):
        raise InvalidArgument(f"HoG patches must be 32x32, got {patch.shape}")
    return _hog_batch(patch[None])[0]


def featurize(img, spec=DEFAULT_GRID):
    """Full image feature: (36, 576) float32, resize -> patches -> HoG."""
    img = resize(img, spec.image_size)
    return _hog_batch(extract_patches(img, spec)).astype(np.float32)


def featurize_files(paths, threads=1):
    from .synthgen import read_pgm

    def one(p):
        return featurize(read_pgm(p))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            feats = list(pool.map(one, paths))
    else:
        feats = [one(p) for p in paths]
    if not feats:
        return np.zeros((0, N_PATCHES, PATCH_DIM), dtype=np.float32)
    return np.stack(feats)


def save_feature_cache(path, feats):
    feats = np.ascontiguousarray(feats, dtype="<f4")
    n, n_patches, dim = feats.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<IIII", CACHE_VERSION, n, n_patches, dim))
        fh.write(feats.tobytes())


def load_feature_cache(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise InvalidArgument(f"{path}: not a feature cache")
    version, n, n_patches, dim = struct.unpack_from("<IIII", raw, 4)
    if version != CACHE_VERSION:
        raise InvalidArgument(f"{path}: unsupported feature cache version {version}")
    data = np.frombuffer(raw, dtype="<f4", count=n * n_patches * dim, offset=20)
    return data.reshape(n, n_patches, dim).astype(np.float32)
