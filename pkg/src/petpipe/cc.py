"""3D connected-component labeling of binary masks."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .volume import BinaryMask, voxel_volume_ml


class Connectivity(enum.IntEnum):
    FACE6 = 6
    FACE_EDGE18 = 18
    FACE_EDGE_CORNER26 = 26

    @classmethod
    def parse(cls, value) -> Connectivity:
        try:
            return cls(int(value))
        except (TypeError, ValueError):
            raise ParameterError(f"connectivity must be 6, 18 or 26, got {value!r}") from None


DEFAULT_CONNECTIVITY = Connectivity.FACE_EDGE_CORNER26

# squared-distance rank for generate_binary_structure
_RANK = {Connectivity.FACE6: 1, Connectivity.FACE_EDGE18: 2, Connectivity.FACE_EDGE_CORNER26: 3}


def structure(conn: Connectivity) -> np.ndarray:
    return ndimage.generate_binary_structure(3, _RANK[Connectivity.parse(conn)])


@dataclass(frozen=True, eq=False)
class ComponentSet:
    """Components numbered 1..K in order of their first voxel in C raster order."""

    labels: np.ndarray
    sizes: np.ndarray
    volumes_ml: np.ndarray

    @property
    def count(self) -> int:
        return int(self.sizes.size)


def label_array(fg: np.ndarray, conn: Connectivity = DEFAULT_CONNECTIVITY) -> tuple[np.ndarray, int]:
    """Label a boolean array; ids are contiguous and follow raster scan order."""
    raw, k = ndimage.label(np.asarray(fg, dtype=bool), structure=structure(conn))
    if k == 0:
        return raw, 0
    flat = raw.ravel()
    ids, first = np.unique(flat, return_index=True)
    first, ids = first[ids > 0], ids[ids > 0]
    remap = np.zeros(k + 1, dtype=raw.dtype)
    remap[ids[np.argsort(first)]] = np.arange(1, k + 1, dtype=raw.dtype)
    return remap[raw], k


def label_components(mask: BinaryMask, conn: Connectivity = DEFAULT_CONNECTIVITY) -> ComponentSet:
    labels, k = label_array(mask.foreground, conn)
    sizes = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return ComponentSet(labels, sizes, sizes * voxel_volume_ml(mask))
