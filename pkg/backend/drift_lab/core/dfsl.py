"""
DFSL binary grid dumps.

Layout (little-endian):
  magic   4 bytes  b"DFSL"
  version u32
  n       u32
  points  u32      points per axis
  box     f64      box length
  samples f64      row-major; several components are stored back to back,
                   their count is implied by the payload size
"""

import os
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import ShapeError, ValidationError
from .grid import GridSpec, ScalarField, VectorField

MAGIC = b"DFSL"
VERSION = 1
_HEADER = struct.Struct("<4sIIId")

PathLike = Union[str, os.PathLike]


def write_dfsl(path: PathLike, grid: GridSpec, data: np.ndarray) -> Path:
    """
    Write samples for one grid.

    Args:
        path: Output file
        grid: Grid the samples live on
        data: Array of shape grid.shape or (components,) + grid.shape

    Returns:
        The written path
    """
    data = np.asarray(data, dtype="<f8")
    if data.shape[-grid.n:] != grid.shape or data.ndim not in (grid.n, grid.n + 1):
        raise ShapeError(f"cannot store array of shape {data.shape} on grid {grid.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, grid.n, grid.points_per_axis, float(grid.box_length)))
        f.write(np.ascontiguousarray(data).tobytes(order="C"))
    return path


def read_dfsl(path: PathLike) -> Tuple[GridSpec, np.ndarray]:
    """
    Read a DFSL file.

    Returns:
        (grid, data) with data of shape grid.shape for one component,
        else (components,) + grid.shape
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: file too short for a DFSL header")
    magic, version, n, points, box = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported DFSL version {version}")
    grid = GridSpec(n=int(n), points_per_axis=int(points), box_length=float(box))

    payload = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    per_component = points ** n
    if payload.size == 0 or payload.size % per_component:
        raise ShapeError(f"{path}: payload of {payload.size} samples does not fit {grid.shape}")
    components = payload.size // per_component
    data = payload.astype(float).reshape((components,) + grid.shape)
    return grid, (data[0] if components == 1 else data)


def save_scalar(path: PathLike, f: ScalarField) -> Path:
    return write_dfsl(path, f.grid, f.values)


def save_vector(path: PathLike, b: VectorField) -> Path:
    return write_dfsl(path, b.grid, b.components)


def load_scalar(path: PathLike) -> ScalarField:
    grid, data = read_dfsl(path)
    if data.ndim != grid.n:
        raise ShapeError(f"{path}: expected one component, found {data.shape[0]}")
    return ScalarField(grid, data)


def load_vector(path: PathLike) -> VectorField:
    """Load a drift; certification is left to field_toolkit.certify"""
    grid, data = read_dfsl(path)
    if data.ndim != grid.n + 1 or data.shape[0] != grid.n:
        raise ShapeError(f"{path}: expected {grid.n} components for a vector field")
    return VectorField(grid, data)
