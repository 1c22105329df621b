"""Maximum intensity projections for the tracer classifier.

Image convention: rows run from superior (row 0) to inferior, columns follow
the remaining in-plane axis in increasing array index. A coronal MIP is
(z, x) shaped, a sagittal MIP is (z, y) shaped.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .volume import VoxelGrid

INPUT_SIZE = 224


class Plane(str, enum.Enum):
    CORONAL = "coronal"
    SAGITTAL = "sagittal"


# array axis collapsed by each projection
_PROJECTION_AXIS = {Plane.CORONAL: 1, Plane.SAGITTAL: 0}


@dataclass(frozen=True, eq=False)
class MipImage:
    plane: Plane
    pixels: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or min(px.shape) < 1:
            raise ParameterError(f"MIP pixels must be a non-empty 2D array, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ParameterError("MIP pixels must be finite")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "plane", Plane(self.plane))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def project_mip(pet: VoxelGrid, plane: Plane | str) -> MipImage:
    """Exact column maxima of ``pet`` along the plane's projection axis."""
    plane = Plane(plane)
    m = pet.data.max(axis=_PROJECTION_AXIS[plane])  # (x or y, z)
    return MipImage(plane, m.T[::-1])


def _resize_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # pixel-centre sampling: src = (dst + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_to_input(img: MipImage, size: int = INPUT_SIZE) -> MipImage:
    """Bilinear resize to ``size`` x ``size`` with pixel-centre alignment."""
    px = img.pixels
    if px.shape == (size, size):
        return img
    r0, r1, fr = _resize_axis(px.shape[0], size)
    c0, c1, fc = _resize_axis(px.shape[1], size)
    fr = fr[:, None]
    top = px[r0][:, c0] * (1 - fc) + px[r0][:, c1] * fc
    bot = px[r1][:, c0] * (1 - fc) + px[r1][:, c1] * fc
    out = top * (1 - fr) + bot * fr
    # guard against rounding drifting outside the convex hull of the inputs
    out = np.clip(out, px.min(), px.max())
    return MipImage(img.plane, out, img.normalized)


def normalize_mip(img: MipImage) -> MipImage:
    px = img.pixels
    mean = px.mean()
    std = np.sqrt(np.mean((px - mean) ** 2))
    out = np.zeros_like(px) if std == 0 else (px - mean) / std
    return MipImage(img.plane, out, normalized=True)


def flip_horizontal(img: MipImage) -> MipImage:
    return MipImage(img.plane, img.pixels[:, ::-1], img.normalized)


def classifier_input(pet: VoxelGrid, plane: Plane | str) -> MipImage:
    """Project, resize and normalize: the exact image fed to feature extraction."""
    return normalize_mip(resize_to_input(project_mip(pet, plane)))


def write_pgm(img: MipImage, path) -> None:
    """Write a 16-bit binary PGM (P5, maxval 65535), min-max scaled."""
    px = img.pixels
    lo, hi = px.min(), px.max()
    scaled = np.zeros(px.shape) if hi == lo else (px - lo) / (hi - lo)
    data = np.rint(scaled * 65535).astype(">u2")
    header = f"P5\n{img.width} {img.height}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())
