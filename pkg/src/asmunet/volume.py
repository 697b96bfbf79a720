"""3D volume containers, SVOL I/O, preprocessing, patching and augmentation.

Arrays are stored with shape ``(W, H, D)``. The canonical linear voxel order is
w-fastest, then h, then d, i.e. ``arr.ravel(order="F")``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

SVOL_MAGIC = b"SVOL"
SVOL_VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1
_HEADER = struct.Struct("<4sBIIIB3f")


class SvolFormatError(ValueError):
    """Malformed SVOL file."""


class SvolTruncatedError(SvolFormatError):
    pass


class DegenerateInputError(ValueError):
    """Input statistics make the operation undefined (e.g. zero variance)."""


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing}")
    return spacing


@dataclass
class Volume3D:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)


@dataclass
class LabelVolume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    n_classes: int = field(default=256)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes - 1}]")
        self.data = data.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)


@dataclass(frozen=True)
class PatchSpec:
    origin: tuple
    size: tuple

    def __post_init__(self):
        if any(int(s) <= 0 for s in self.size):
            raise ValueError(f"patch size must be positive, got {self.size}")


# --------------------------------------------------------------------------
# SVOL I/O


def write_svol(path, vol):
    path = Path(path)
    if isinstance(vol, LabelVolume):
        code, payload = DTYPE_U8, vol.data.astype("<u1")
    elif isinstance(vol, Volume3D):
        code, payload = DTYPE_F32, vol.data.astype("<f4")
    else:
        raise TypeError(f"cannot write {type(vol).__name__} as SVOL")
    w, h, d = vol.dims
    header = _HEADER.pack(SVOL_MAGIC, SVOL_VERSION, w, h, d, code, *vol.spacing)
    path.write_bytes(header + payload.ravel(order="F").tobytes())


def read_svol(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise SvolTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, w, h, d, code, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != SVOL_MAGIC:
        raise SvolFormatError(f"{path}: bad magic {magic!r}")
    if version != SVOL_VERSION:
        raise SvolFormatError(f"{path}: unsupported version {version}")
    if code == DTYPE_F32:
        dtype = np.dtype("<f4")
    elif code == DTYPE_U8:
        dtype = np.dtype("<u1")
    else:
        raise SvolFormatError(f"{path}: unknown dtype code {code}")
    n = w * h * d
    body = raw[_HEADER.size:]
    if len(body) < n * dtype.itemsize:
        raise SvolTruncatedError(
            f"{path}: payload has {len(body)} bytes, expected {n * dtype.itemsize}")
    if len(body) > n * dtype.itemsize:
        raise SvolFormatError(f"{path}: {len(body) - n * dtype.itemsize} trailing bytes")
    data = np.frombuffer(body, dtype=dtype, count=n).reshape((w, h, d), order="F")
    spacing = (sx, sy, sz)
    if code == DTYPE_U8:
        return LabelVolume(data.copy(), spacing)
    return Volume3D(data.copy(), spacing)


# --------------------------------------------------------------------------
# Preprocessing


def resample(vol, target_spacing):
    """Resample to ``target_spacing`` (mm).

    Intensities use trilinear interpolation, labels nearest neighbour. Voxel
    centres are aligned, so sample ``i`` of the output sits at physical
    position ``(i + 0.5) * target`` and borders are clamped.
    """
    target = _check_spacing(target_spacing)
    dims_in = np.array(vol.dims)
    sp_in = np.array(vol.spacing)
    dims_out = np.maximum(1, np.round(dims_in * sp_in / np.array(target)).astype(int))
    is_label = isinstance(vol, LabelVolume)
    if np.array_equal(dims_out, dims_in) and np.allclose(sp_in, target, rtol=0, atol=0):
        return type(vol)(vol.data.copy(), target) if not is_label else \
            LabelVolume(vol.data.copy(), target, vol.n_classes)
    axes = [(np.arange(n_out) + 0.5) * t / s - 0.5
            for n_out, t, s in zip(dims_out, target, sp_in)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    if is_label:
        out = ndimage.map_coordinates(vol.data, coords, order=0, mode="nearest")
        return LabelVolume(out, target, vol.n_classes)
    out = ndimage.map_coordinates(vol.data.astype(np.float64), coords, order=1,
                                  mode="nearest")
    return Volume3D(out, target)


def foreground_stats(vols, masks):
    """Pooled mean and population std of intensities where ``mask > 0``."""
    values = np.concatenate([v.data[m.data > 0].astype(np.float64)
                             for v, m in zip(vols, masks)])
    if values.size < 2:
        raise DegenerateInputError("need at least two foreground voxels")
    mean, std = values.mean(), values.std()
    if not np.isfinite(std) or std <= 0:
        raise DegenerateInputError("foreground intensities have zero variance")
    return float(mean), float(std)


def apply_zscore(vol, mean, std):
    return Volume3D((vol.data.astype(np.float64) - mean) / std, vol.spacing)


def zscore_normalize(vol, mask):
    mean, std = foreground_stats([vol], [mask])
    return apply_zscore(vol, mean, std)


# --------------------------------------------------------------------------
# Patches


def extract_patch(vol, labels, spec):
    """Crop ``spec`` out of the pair; out-of-bounds voxels become 0 / background."""
    size = tuple(int(s) for s in spec.size)
    origin = tuple(int(o) for o in spec.origin)
    img = np.zeros(size, dtype=np.float32)
    lbl = np.zeros(size, dtype=np.uint8)
    src, dst = [], []
    for o, n, dim in zip(origin, size, vol.dims):
        lo, hi = max(o, 0), min(o + n, dim)
        if hi <= lo:
            return Volume3D(img, vol.spacing), LabelVolume(lbl, labels.spacing, labels.n_classes)
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    img[tuple(dst)] = vol.data[tuple(src)]
    lbl[tuple(dst)] = labels.data[tuple(src)]
    return Volume3D(img, vol.spacing), LabelVolume(lbl, labels.spacing, labels.n_classes)


def sample_patch_spec(labels, size, rng, foreground_prob=0.5):
    """Draw a patch origin; with ``foreground_prob`` the patch is centred on a
    random foreground voxel, otherwise the origin is uniform over the volume
    (padding allowed when the patch is larger than the volume)."""
    size = tuple(int(s) for s in size)
    dims = labels.dims
    if rng.random() < foreground_prob:
        fg = np.argwhere(labels.data > 0)
        if len(fg):
            centre = fg[rng.integers(len(fg))]
            origin = tuple(int(c) - n // 2 + int(rng.integers(-(n // 4), n // 4 + 1))
                           for c, n in zip(centre, size))
            # keep the chosen voxel inside the patch
            origin = tuple(min(max(o, c - n + 1), c) for o, c, n in zip(origin, centre, size))
            return PatchSpec(origin, size)
    origin = tuple(int(rng.integers(min(0, dim - n), max(0, dim - n) + 1))
                   for dim, n in zip(dims, size))
    return PatchSpec(origin, size)


# --------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip_prob: float = 0.5
    max_angle_deg: float = 30.0
    scale_range: tuple = (0.7, 1.4)


def flip(arr, axis):
    return np.flip(arr, axis=axis).copy()


def _rotation(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    i, j = [a for a in range(3) if a != axis]
    rot = np.eye(3)
    rot[i, i], rot[i, j], rot[j, i], rot[j, j] = c, -s, s, c
    return rot


def augment(vol, labels, rng_seed, params=AugmentParams()):
    """Random flip -> principal-axis rotation -> isotropic scaling.

    Every random draw is made unconditionally so the stream consumed per call
    does not depend on the outcome.
    """
    rng = np.random.default_rng(rng_seed)
    flips = rng.random(3) < params.flip_prob
    axis = int(rng.integers(3))
    angle = np.deg2rad(rng.uniform(-params.max_angle_deg, params.max_angle_deg))
    scale = rng.uniform(*params.scale_range)

    img, lbl = vol.data, labels.data
    for ax in range(3):
        if flips[ax]:
            img, lbl = flip(img, ax), flip(lbl, ax)
    if angle != 0.0 or scale != 1.0:
        # output voxel o samples input at  R^-1 (o - c) / scale + c
        matrix = _rotation(axis, angle).T / scale
        centre = (np.array(img.shape) - 1) / 2.0
        offset = centre - matrix @ centre
        img = ndimage.affine_transform(img.astype(np.float64), matrix, offset, order=1,
                                       mode="constant", cval=0.0)
        lbl = ndimage.affine_transform(lbl, matrix, offset, order=0, mode="constant", cval=0)
    return (Volume3D(img, vol.spacing),
            LabelVolume(lbl, labels.spacing, labels.n_classes))
