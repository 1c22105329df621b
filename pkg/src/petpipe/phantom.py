"""Synthetic whole-body PET/CT phantoms with tracer-specific organ uptake.

The body is an elliptic cylinder (torso) topped by an ellipsoid (head).
Organs are axis-aligned ellipsoids with uniform mean uptake plus Gaussian
noise; lesions are small hot spheres placed outside every organ. All SUV
numbers here are made up: they only respect the qualitative pattern that
FDG lights up brain and bladder while PSMA lights up kidneys and the
salivary glands.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .classifier import TracerClass
from .errors import GenerationError, ParameterError
from .volume import BinaryMask, LabelVolume, VoxelGrid

MAX_PLACEMENT_ATTEMPTS = 1000

# name -> anatomy label id (0 background, 1 lesion)
ANATOMY_LABELS = {
    "brain": 2,
    "parotid_glands": 3,
    "submandibular_glands": 4,
    "lungs": 5,
    "heart": 6,
    "esophagus": 7,
    "liver": 8,
    "gallbladder": 9,
    "spleen": 10,
    "kidneys": 11,
    "pancreas": 12,
    "duodenum": 13,
    "small_bowel": 14,
    "colon": 15,
    "urinary_bladder": 16,
    "prostate": 17,
}


@dataclass(frozen=True)
class Organ:
    name: str
    center: tuple[float, float, float]  # fraction of each axis
    radii: tuple[float, float, float]  # voxels
    suv_mean: float
    suv_sigma: float


# (name, centre fractions, radii in voxels at 64x64x128, FDG mean, PSMA mean)
_LAYOUT = [
    ("brain", (0.50, 0.50, 0.905), (9, 10, 7), 6.0, 0.3),
    ("parotid_glands", (0.36, 0.52, 0.84), (2, 3, 3), 1.2, 6.0),
    ("parotid_glands", (0.64, 0.52, 0.84), (2, 3, 3), 1.2, 6.0),
    ("submandibular_glands", (0.42, 0.40, 0.80), (2, 2, 2), 1.2, 6.0),
    ("submandibular_glands", (0.58, 0.40, 0.80), (2, 2, 2), 1.2, 6.0),
    ("lungs", (0.31, 0.52, 0.64), (6, 8, 10), 0.5, 0.4),
    ("lungs", (0.69, 0.52, 0.64), (6, 8, 10), 0.5, 0.4),
    ("heart", (0.53, 0.42, 0.61), (5, 5, 5), 2.6, 1.5),
    ("esophagus", (0.50, 0.62, 0.70), (1.5, 1.5, 5), 2.0, 1.0),
    ("liver", (0.36, 0.48, 0.50), (9, 8, 6), 2.5, 5.0),
    ("gallbladder", (0.42, 0.34, 0.46), (2, 2, 2), 1.2, 2.5),
    ("spleen", (0.70, 0.60, 0.51), (3, 4, 4), 2.2, 4.0),
    ("kidneys", (0.37, 0.64, 0.42), (3, 3, 5), 2.5, 8.0),
    ("kidneys", (0.63, 0.64, 0.42), (3, 3, 5), 2.5, 8.0),
    ("pancreas", (0.55, 0.52, 0.45), (5, 2, 2), 1.5, 2.5),
    ("duodenum", (0.46, 0.44, 0.40), (2, 2, 3), 2.0, 3.0),
    ("small_bowel", (0.52, 0.38, 0.33), (7, 4, 4), 1.8, 3.0),
    ("colon", (0.30, 0.40, 0.30), (2.5, 2.5, 6), 1.5, 1.2),
    ("urinary_bladder", (0.50, 0.40, 0.21), (4, 4, 3), 8.0, 4.0),
    ("prostate", (0.50, 0.44, 0.155), (2, 2, 2), 1.5, 2.5),
]

_SIGMA_FRACTION = 0.1


def default_organs(tracer: TracerClass) -> tuple[Organ, ...]:
    tracer = TracerClass.parse(tracer)
    return tuple(
        Organ(name, center, radii, mean, mean * _SIGMA_FRACTION)
        for name, center, radii, fdg, psma in _LAYOUT
        for mean in [fdg if tracer == TracerClass.FDG else psma]
    )


@dataclass(frozen=True)
class PhantomSpec:
    tracer: TracerClass
    dims: tuple[int, int, int] = (64, 64, 128)
    spacing: tuple[float, float, float] = (4.0, 4.0, 4.0)
    organs: tuple[Organ, ...] = ()
    lesion_count: int = 3
    lesion_radius: tuple[float, float] = (1.0, 2.5)
    lesion_suv: tuple[float, float] = (3.0, 10.0)
    background_suv: tuple[float, float] = (0.7, 0.15)  # mean, sigma
    noise_sigma: float = 0.1  # relative, lesions and organs
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tracer", TracerClass.parse(self.tracer))
        if not self.organs:
            object.__setattr__(self, "organs", default_organs(self.tracer))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ParameterError(f"phantom dims must be three values >= 8, got {self.dims}")
        if not 0 <= self.lesion_count <= 8:
            raise ParameterError(f"lesion count must be in [0, 8], got {self.lesion_count}")
        lo, hi = self.lesion_suv
        if not 2.0 < lo <= hi:
            raise ParameterError(f"lesion SUV range must satisfy 2 < min <= max, got {self.lesion_suv}")
        rlo, rhi = self.lesion_radius
        if not 0 < rlo <= rhi:
            raise ParameterError(f"invalid lesion radius range {self.lesion_radius}")
        for organ in self.organs:
            if organ.name not in ANATOMY_LABELS:
                raise ParameterError(f"unknown organ {organ.name!r}")
            for c, r, n in zip(organ.center, self._scaled(organ.radii), self.dims):
                if c * n - r < 0 or c * n + r > n - 1:
                    raise ParameterError(f"organ {organ.name} does not fit inside the volume")

    def _scaled(self, radii) -> tuple[float, float, float]:
        # radii are given for the default 64x64x128 grid
        return tuple(r * n / d for r, n, d in zip(radii, self.dims, (64, 64, 128)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tracer"] = self.tracer.label
        return d


class Phantom(NamedTuple):
    pet: VoxelGrid
    ct: VoxelGrid
    gt: BinaryMask
    anatomy: LabelVolume


def _ellipsoid(dims, center, radii) -> tuple[tuple[slice, ...], np.ndarray]:
    """Bounding-box slices and the boolean ellipsoid inside that box."""
    sl, grids = [], []
    for n, c, r in zip(dims, center, radii):
        lo, hi = max(0, int(np.floor(c - r))), min(n, int(np.ceil(c + r)) + 1)
        sl.append(slice(lo, hi))
        grids.append(((np.arange(lo, hi) - c) / r) ** 2)
    inside = grids[0][:, None, None] + grids[1][None, :, None] + grids[2][None, None, :] <= 1.0
    return tuple(sl), inside


def _body(dims) -> np.ndarray:
    nx, ny, nz = dims
    x = ((np.arange(nx) - (nx - 1) / 2) / (0.42 * nx))[:, None, None]
    y = ((np.arange(ny) - (ny - 1) / 2) / (0.34 * ny))[None, :, None]
    z = np.arange(nz)[None, None, :]
    torso = (x**2 + y**2 <= 1.0) & (z >= 0.02 * nz) & (z < 0.78 * nz)
    neck = (x**2 / 0.12 + y**2 / 0.2 <= 1.0) & (z >= 0.76 * nz) & (z < 0.82 * nz)
    head = (x**2 / 0.36 + y**2 / 0.55 + ((z - 0.89 * nz) / (0.085 * nz)) ** 2 <= 1.0)
    return torso | neck | head


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """PET, CT, lesion mask and anatomy labels; deterministic in ``spec.rng_seed``."""
    rng = np.random.default_rng(spec.rng_seed)
    dims = spec.dims
    body = _body(dims)

    bg_mean, bg_sigma = spec.background_suv
    pet = np.where(body, bg_mean + bg_sigma * rng.standard_normal(dims), 0.0)
    ct = np.where(body, 40.0, -1000.0)
    anatomy = np.zeros(dims, dtype=np.uint8)

    for organ in spec.organs:
        center = [c * n for c, n in zip(organ.center, dims)]
        sl, inside = _ellipsoid(dims, center, spec._scaled(organ.radii))
        noise = organ.suv_sigma * rng.standard_normal(inside.shape)
        pet[sl] = np.where(inside, organ.suv_mean + noise, pet[sl])
        anatomy[sl][inside] = ANATOMY_LABELS[organ.name]
        if organ.name == "lungs":
            ct[sl][inside] = -800.0

    # spine: a bone rod behind the organs
    nx, ny, nz = dims
    sx, sy, _ = _ellipsoid(dims, (0.5 * nx, 0.8 * ny, 0.4 * nz), (1.5, 1.5, 0.36 * nz))[0]
    ct[sx, sy, int(0.04 * nz) : int(0.76 * nz)] = 700.0

    gt = np.zeros(dims, dtype=bool)
    allowed = body & (anatomy == 0)
    candidates = np.argwhere(allowed)
    if spec.lesion_count and not len(candidates):
        raise GenerationError("no voxel outside the organs is available for lesions")
    for _ in range(spec.lesion_count):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            radius = rng.uniform(*spec.lesion_radius)
            center = candidates[rng.integers(len(candidates))].astype(float)
            sl, inside = _ellipsoid(dims, center, (radius, radius, radius))
            if allowed[sl][inside].all():
                break
        else:
            raise GenerationError(f"could not place a lesion after {MAX_PLACEMENT_ATTEMPTS} attempts")
        suv = rng.uniform(*spec.lesion_suv)
        noise = 1.0 + spec.noise_sigma * rng.standard_normal(inside.shape)
        # lesion voxels never drop below the lower end of the lesion SUV range
        pet[sl] = np.where(inside, np.maximum(suv * noise, spec.lesion_suv[0]), pet[sl])
        gt[sl] |= inside

    pet = np.maximum(pet, 0.0)
    vocab = {i: name for name, i in ANATOMY_LABELS.items()}
    return Phantom(
        pet=VoxelGrid(pet, spec.spacing),
        ct=VoxelGrid(ct, spec.spacing),
        gt=BinaryMask(gt, spec.spacing),
        anatomy=LabelVolume(anatomy, spec.spacing, vocab),
    )


def generate_cohort(
    n_per_class: int,
    base_specs: dict | None = None,
    seed: int = 0,
    lesion_count_range: tuple[int, int] = (1, 6),
) -> list[PhantomSpec]:
    """``n_per_class`` FDG specs followed by ``n_per_class`` PSMA specs.

    Phantom ``i`` uses seed ``seed + i`` both for its jitter (organ means
    scaled by U(0.8, 1.2), random lesion count) and for its own voxels. Call
    :func:`generate_phantom` on a spec to materialize it.
    """
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    base_specs = base_specs or {}
    specs = []
    for i, tracer in enumerate([TracerClass.FDG] * n_per_class + [TracerClass.PSMA] * n_per_class):
        base = base_specs.get(tracer) or PhantomSpec(tracer)
        rng = np.random.default_rng([seed + i, 0x5EED])
        organs = tuple(
            dataclasses.replace(o, suv_mean=o.suv_mean * f, suv_sigma=o.suv_sigma * f)
            for o, f in zip(base.organs, rng.uniform(0.8, 1.2, len(base.organs)))
        )
        specs.append(
            dataclasses.replace(
                base,
                organs=organs,
                lesion_count=int(rng.integers(lesion_count_range[0], lesion_count_range[1] + 1)),
                rng_seed=seed + i,
            )
        )
    return specs


def region_mean(phantom: Phantom, organ: str) -> float:
    """Mean PET value over an organ's anatomy label."""
    sel = phantom.anatomy.labels == ANATOMY_LABELS[organ]
    return float(phantom.pet.data[sel].mean())


def degraded_prediction(phantom: Phantom, seed: int, speckle_blobs: int = 30) -> BinaryMask:
    """A plausible imperfect prediction for a phantom's ground truth.

    Each lesion is either over-segmented (dilated by one face-adjacent shell),
    under-segmented (only 1-4 voxels around a random lesion voxel) or missed.
    Small speckle clusters are sprinkled inside the body, at least two voxels
    away from every over-segmented lesion.
    """
    rng = np.random.default_rng([seed, 0xD06])
    gt = phantom.gt.foreground
    body = phantom.ct.data > -1000
    pred = np.zeros_like(gt)
    labels, k = ndimage.label(gt, structure=np.ones((3, 3, 3)))
    face = ndimage.generate_binary_structure(3, 1)
    for comp_id in range(1, k + 1):
        comp = labels == comp_id
        mode = rng.choice(3, p=[0.5, 0.35, 0.15])
        if mode == 0:
            pred |= ndimage.binary_dilation(comp, face) & body
        elif mode == 1:
            vox = np.argwhere(comp)
            seed_vox = vox[rng.integers(len(vox))]
            order = np.argsort(np.sum((vox - seed_vox) ** 2, axis=1), kind="stable")
            keep = vox[order[: int(rng.integers(1, 5))]]
            pred[tuple(keep.T)] = True

    forbidden = ndimage.binary_dilation(pred | gt, np.ones((3, 3, 3)), iterations=2)
    room = np.argwhere(body & ~forbidden)
    offsets = np.argwhere(np.ones((3, 3, 3))) - 1
    speckle = np.zeros_like(gt)
    for _ in range(speckle_blobs):
        centre = room[rng.integers(len(room))]
        size = int(rng.integers(1, 13))
        pts = centre + offsets[rng.permutation(len(offsets))[:size]]
        pts = np.clip(pts, 0, np.array(gt.shape) - 1)
        speckle[tuple(pts.T)] = True
    return BinaryMask.like(phantom.gt, pred | speckle)
