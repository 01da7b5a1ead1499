"""Regular 3D scalar volumes and the preprocessing applied before registration.

Arrays are indexed ``data[x, y, z]``.  On disk the voxel values are written
x-fastest, which is numpy's Fortran order for that indexing.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidParameter, InvalidVolume, OpenShell

MAGIC = b"MVOL1"
_HEADER = struct.Struct("<3I3d")


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable voxel grid with physical spacing in millimetres."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise InvalidVolume(f"expected a non-empty 3D array, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise InvalidVolume(f"spacing must be three positive numbers, got {self.spacing}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0) | (self.data == 1)))

    def with_data(self, data) -> "Volume3D":
        return Volume3D(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


PathLike = Union[str, Path]


def encode_mvol(vol: Volume3D) -> bytes:
    header = MAGIC + _HEADER.pack(*vol.dims, *vol.spacing)
    return header + np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()


def write_mvol(path: PathLike, vol: Volume3D) -> None:
    """Write ``vol`` in the MVOL1 binary format."""
    Path(path).write_bytes(encode_mvol(vol))


def read_mvol(path: PathLike) -> Volume3D:
    raw = Path(path).read_bytes()
    return decode_mvol(raw)


def decode_mvol(raw: bytes) -> Volume3D:
    if len(raw) < len(MAGIC):
        raise FormatError(f"truncated file: {len(raw)} bytes, magic expected at offset 0")
    for offset, (got, want) in enumerate(zip(raw[: len(MAGIC)], MAGIC)):
        if got != want:
            raise FormatError(f"bad magic byte at offset {offset}: expected {want:#04x}, got {got:#04x}")
    start = len(MAGIC)
    if len(raw) < start + _HEADER.size:
        raise FormatError(f"truncated header at offset {start}")
    nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw, start)
    start += _HEADER.size
    count = nx * ny * nz
    if count == 0:
        raise FormatError(f"zero dimension in header at offset {len(MAGIC)}")
    expected = start + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"payload size mismatch at offset {start}: expected {4 * count} bytes, "
            f"got {len(raw) - start}"
        )
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
    try:
        return Volume3D(values.reshape((nx, ny, nz), order="F"), (sx, sy, sz))
    except InvalidVolume as exc:
        raise FormatError(f"invalid header at offset {len(MAGIC)}: {exc}") from exc


def fill_interior(shell: Volume3D) -> Volume3D:
    """Fill the inside of a closed binary shell.

    The exterior is the 6-connected background region reachable from the
    grid corners; everything else becomes 1.
    """
    if not shell.is_binary():
        raise InvalidVolume("fill_interior requires a binary volume")
    solid = shell.data.astype(bool)
    border = np.zeros_like(solid)
    border[[0, -1], :, :] = True
    border[:, [0, -1], :] = True
    border[:, :, [0, -1]] = True
    if np.any(solid & border):
        raise OpenShell("shell touches the grid boundary")
    background = ~solid
    labels, _ = ndimage.label(background, structure=ndimage.generate_binary_structure(3, 1))
    nx, ny, nz = solid.shape
    corners = [labels[i, j, k] for i in (0, nx - 1) for j in (0, ny - 1) for k in (0, nz - 1)]
    exterior = np.isin(labels, [c for c in corners if c > 0])
    return shell.with_data((~exterior).astype(np.float32))


def gaussian_kernel(window: int = 9, sigma: float = 1.0) -> np.ndarray:
    """Truncated 1D Gaussian of odd length ``window``, normalised to sum 1."""
    if int(window) != window or window < 1 or window % 2 == 0:
        raise InvalidParameter(f"window must be an odd positive integer, got {window}")
    if not sigma > 0:
        raise InvalidParameter(f"sigma must be positive, got {sigma}")
    half = int(window) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(vol: Volume3D, window: int = 9, sigma: float = 1.0) -> Volume3D:
    """Separable truncated-Gaussian smoothing with clamp-to-edge boundaries."""
    kernel = gaussian_kernel(window, sigma)
    out = vol.data.astype(np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="nearest")
    return vol.with_data(out)


def _as_fraction(f) -> Fraction:
    frac = Fraction(f).limit_denominator(10**6) if isinstance(f, float) else Fraction(f)
    if frac <= 0:
        raise InvalidParameter(f"resample factor must be positive, got {f}")
    return frac


def resample(vol: Volume3D, factor: Union[float, Fraction, Sequence], mode: str = "trilinear") -> Volume3D:
    """Resample by a per-axis factor (2 doubles the voxel count along an axis).

    Voxel ``i`` is centred at ``(i + 0.5) * spacing``; coordinates falling
    outside the input grid are clamped to the nearest edge voxel.
    """
    if mode not in ("nearest", "trilinear"):
        raise InvalidParameter(f"unknown interpolation mode {mode!r}")
    if np.ndim(factor) == 0:
        factor = (factor,) * 3
    fracs = [_as_fraction(f) for f in factor]
    if len(fracs) != 3:
        raise InvalidParameter("factor needs one entry per axis")
    new_dims = []
    for n, f in zip(vol.dims, fracs):
        out = n * f
        if out.denominator != 1:
            raise InvalidParameter(f"factor {f} gives non-integer size {float(out)} for axis of {n}")
        new_dims.append(int(out))
    axes = []
    for n_in, n_out, f in zip(vol.dims, new_dims, fracs):
        src = (np.arange(n_out) + 0.5) / float(f) - 0.5
        axes.append(np.clip(src, 0, n_in - 1))
    grid = np.meshgrid(*axes, indexing="ij")
    if mode == "nearest":
        idx = [np.floor(g + 0.5).astype(np.intp) for g in grid]
        out = vol.data[idx[0], idx[1], idx[2]]
    else:
        out = ndimage.map_coordinates(vol.data.astype(np.float64), grid, order=1, mode="nearest")
    spacing = tuple(s / float(f) for s, f in zip(vol.spacing, fracs))
    return Volume3D(out, spacing)


def binary_sphere(dims, radius: float, center=None, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    """Solid digital ball, handy for building synthetic registration inputs."""
    dims = tuple(int(d) for d in dims)
    if center is None:
        center = [(d - 1) / 2.0 for d in dims]
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return Volume3D((r2 <= radius**2).astype(np.float32), spacing)
