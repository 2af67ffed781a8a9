"""Voxelized box mass models.

A payload box is discretized into a regular voxel grid.  Each voxel carries a
point mass at its center, so every inertial quantity (center of mass, inertia
tensor) is a plain particle-system sum over voxel centers -- the super-particle
view of a rigid body.  Random distributions are generated by thresholding a
single 3-d Gaussian density with a dense SPD covariance, which yields connected
blobs of occupied voxels; a small mass floor is added to every voxel so that no
contact is ever frictionless.

Coordinates: the box frame has its origin at the geometric center of the box,
axes along (length, width, height).  The quarter-slab hazard volumes U1..U4 are
defined in the corner-anchored frame [0,l]x[0,w]x[0,h]:

    U1: x <= l/4        U2: x >= 3l/4
    U3: y <= w/4        U4: y >= 3w/4

and membership is decided by voxel-center coordinates.
"""

from dataclasses import dataclass
from functools import lru_cache
import struct

import numpy as np

# ---------------------------------------------------------------------------
# defaults
# ---------------------------------------------------------------------------

DEFAULT_GRID_DIMS = (10, 8, 4)            # (N_l, N_w, N_h)
DEFAULT_BOX_DIMS = (0.40, 0.30, 0.15)     # meters
DEFAULT_MASS_RANGE = (0.5, 6.0)           # kg, payload mass before floor
MASS_FLOOR = 0.001                        # kg per voxel at the default grid
HAZARD_FRACTION = 0.95

# Total floor mass is held fixed across resolutions (0.001 kg/voxel at the
# 10x8x4 default), so refining the grid does not inflate the floor's share.
_FLOOR_TOTAL = MASS_FLOOR * np.prod(DEFAULT_GRID_DIMS)

# Gaussian sampler shape parameters: mean margin (fraction of each box edge
# kept clear on both sides) and the per-axis sigma range as a fraction of the
# box volume's cube root.
_MEAN_MARGIN = 0.15
_SIGMA_RANGE = (0.22, 0.42)
_MAX_COV_COND = 1e8

_FILE_MAGIC = b"TBDIST1\x00"
_FILE_VERSION = 1


class EmptyDistributionError(ValueError):
    """Raised when an operation needs mass but the distribution has none."""


def mass_floor_for(grid_dims) -> float:
    """Per-voxel mass floor at a given resolution (kg)."""
    return float(_FLOOR_TOTAL / np.prod(grid_dims))


@lru_cache(maxsize=32)
def _voxel_centers_cached(grid_dims, box_dims):
    axes = [
        (np.arange(n) + 0.5) / n * d - d / 2.0
        for n, d in zip(grid_dims, box_dims)
    ]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    grid.setflags(write=False)
    return grid


def voxel_centers(grid_dims, box_dims=DEFAULT_BOX_DIMS) -> np.ndarray:
    """Voxel-center coordinates in the centered box frame, shape (*grid_dims, 3)."""
    return _voxel_centers_cached(tuple(grid_dims), tuple(box_dims))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MassDistribution:
    """Per-voxel point masses on a regular grid filling the box volume.

    Instances hash by identity so derived quantities can be cached per object.
    """

    grid_dims: tuple          # (N_l, N_w, N_h)
    voxel_size: tuple         # meters per axis
    box_dims: tuple           # (l, w, h) meters
    voxel_mass: np.ndarray    # kg, shape grid_dims
    total_mass: float         # kg

    def __post_init__(self):
        if self.voxel_mass.shape != tuple(self.grid_dims):
            raise ValueError("voxel_mass shape does not match grid_dims")
        floor = mass_floor_for(self.grid_dims)
        if np.any(self.voxel_mass < floor - 1e-12):
            raise ValueError("voxel mass below the per-voxel floor")
        if not np.isclose(self.voxel_mass.sum(), self.total_mass, rtol=1e-9, atol=0.0):
            raise ValueError("total_mass inconsistent with voxel masses")
        for n, s, d in zip(self.grid_dims, self.voxel_size, self.box_dims):
            if abs(n * s - d) > s:
                raise ValueError("grid_dims * voxel_size does not reconstruct box_dims")
        self.voxel_mass.setflags(write=False)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def mass_floor(self) -> float:
        return mass_floor_for(self.grid_dims)

    def voxel_centers(self) -> np.ndarray:
        return voxel_centers(self.grid_dims, self.box_dims)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Soft or binary occupancy values in [0,1] on the voxel grid."""

    grid_dims: tuple
    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.clip(np.asarray(self.occupancy, dtype=float), 0.0, 1.0)
        if occ.shape != tuple(self.grid_dims):
            raise ValueError("occupancy shape does not match grid_dims")
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)


@dataclass(frozen=True)
class HazardReport:
    """Outcome of the quarter-slab mass-concentration check."""

    hazardous: bool
    triggering_volume: str | None     # "U1".."U4" when hazardous
    mass_fraction_in_volume: float    # largest slab fraction observed


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def make_distribution(voxel_mass, box_dims=DEFAULT_BOX_DIMS) -> MassDistribution:
    """Build a validated MassDistribution from a 3-d voxel-mass array."""
    voxel_mass = np.ascontiguousarray(voxel_mass, dtype=float)
    if voxel_mass.ndim != 3:
        raise ValueError("voxel_mass must be a 3-d array")
    grid_dims = voxel_mass.shape
    voxel_size = tuple(d / n for n, d in zip(grid_dims, box_dims))
    return MassDistribution(
        grid_dims=grid_dims,
        voxel_size=voxel_size,
        box_dims=tuple(float(d) for d in box_dims),
        voxel_mass=voxel_mass,
        total_mass=float(voxel_mass.sum()),
    )


def distribution_from_occupancy(occupied, payload_mass,
                                box_dims=DEFAULT_BOX_DIMS) -> MassDistribution:
    """Spread payload_mass equally over occupied voxels, floor everywhere."""
    occupied = np.asarray(occupied, dtype=bool)
    n_occ = int(occupied.sum())
    if n_occ == 0:
        raise EmptyDistributionError("empty distribution")
    mass = np.full(occupied.shape, mass_floor_for(occupied.shape))
    mass[occupied] += payload_mass / n_occ
    return make_distribution(mass, box_dims)


def uniform_distribution(total_mass, grid_dims=DEFAULT_GRID_DIMS,
                         box_dims=DEFAULT_BOX_DIMS) -> MassDistribution:
    """Exactly uniform distribution with the given total mass."""
    mass = np.full(tuple(grid_dims), total_mass / np.prod(grid_dims))
    return make_distribution(mass, box_dims)


def occupancy_from_gaussian(mean, cov, grid_dims=DEFAULT_GRID_DIMS,
                            box_dims=DEFAULT_BOX_DIMS) -> np.ndarray:
    """Boolean occupancy: voxel centers whose Gaussian density reaches half the
    grid maximum.  `mean` is in the centered box frame."""
    centers = voxel_centers(grid_dims, box_dims).reshape(-1, 3)
    delta = centers - np.asarray(mean, dtype=float)
    density = np.exp(-0.5 * np.einsum("ij,ij->i", delta,
                                      np.linalg.solve(cov, delta.T).T))
    occupied = density >= 0.5 * density.max()
    return occupied.reshape(tuple(grid_dims))


def sample_gaussian_distribution(seed, grid_dims=DEFAULT_GRID_DIMS,
                                 box_dims=DEFAULT_BOX_DIMS,
                                 mass_range=DEFAULT_MASS_RANGE) -> MassDistribution:
    """Random blob distribution: threshold one dense-covariance 3-d Gaussian.

    Deterministic in its arguments.  The density mean is drawn uniformly in the
    box interior (margin _MEAN_MARGIN per face); the covariance is Q diag(s^2) Q^T
    with Q a random orthogonal matrix and per-axis sigmas drawn from
    _SIGMA_RANGE times the cube root of the box volume.  Voxels whose center
    density reaches half the grid maximum are occupied; the payload mass (drawn
    uniformly from mass_range) is split equally among them and the mass floor
    is added to every voxel.
    """
    lo, hi = mass_range
    if lo <= 0 or hi < lo:
        raise ValueError("mass_range must be positive and ordered")
    if any(n < 2 for n in grid_dims):
        raise ValueError("grid_dims must each be >= 2")

    rng = np.random.default_rng(seed)
    box = np.asarray(box_dims, dtype=float)
    payload = rng.uniform(lo, hi)
    sigma_scale = float(np.cbrt(np.prod(box)))

    for _ in range(64):
        mean = (rng.uniform(_MEAN_MARGIN, 1.0 - _MEAN_MARGIN, size=3) - 0.5) * box
        sigma = rng.uniform(*_SIGMA_RANGE, size=3) * sigma_scale
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q = q * np.sign(np.diag(r))
        cov = (q * sigma**2) @ q.T
        cov = 0.5 * (cov + cov.T)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            continue
        if np.linalg.cond(cov) > _MAX_COV_COND:
            continue
        break
    else:  # pragma: no cover - construction is SPD by design
        raise RuntimeError("failed to sample an SPD covariance")

    occupied = occupancy_from_gaussian(mean, cov, grid_dims, box_dims)
    return distribution_from_occupancy(occupied, payload, box_dims)


def sample_slab_distribution(seed, grid_dims=DEFAULT_GRID_DIMS,
                             box_dims=DEFAULT_BOX_DIMS,
                             mass_range=DEFAULT_MASS_RANGE) -> MassDistribution:
    """Random edge-slab distribution: the whole payload pressed against one
    x or y face, within at most a quarter of that edge.

    Deterministic in its arguments.  The slab depth is drawn between one
    eighth and one quarter of the edge length, so every sample lies inside one
    of the four hazard volumes and classifies as hazardous.  These shapes are
    deliberately outside the Gaussian sampler's family: estimators must see
    hard-edged concentrated boxes in training to recognize them at run time.
    """
    lo, hi = mass_range
    if lo <= 0 or hi < lo:
        raise ValueError("mass_range must be positive and ordered")
    rng = np.random.default_rng(seed)
    payload = rng.uniform(lo, hi)
    axis = int(rng.integers(2))             # 0: x slab, 1: y slab
    low_side = bool(rng.integers(2))
    edge = box_dims[axis]
    depth = rng.uniform(edge / 8.0, edge / 4.0)
    coord = voxel_centers(grid_dims, box_dims)[..., axis] + edge / 2.0
    occupied = coord <= depth if low_side else coord >= edge - depth
    if not occupied.any():      # depth below the first voxel-center layer
        occupied = coord <= coord.min() if low_side \
            else coord >= coord.max()
    return distribution_from_occupancy(occupied, payload, box_dims)


def occupancy_from_distribution(dist: MassDistribution) -> OccupancyGrid:
    """Binary occupancy: voxels carrying payload mass above the floor."""
    occ = dist.voxel_mass > dist.mass_floor * (1.0 + 1e-9)
    return OccupancyGrid(grid_dims=dist.grid_dims, occupancy=occ.astype(float))


# ---------------------------------------------------------------------------
# inertial quantities
# ---------------------------------------------------------------------------

def center_of_mass(dist: MassDistribution) -> np.ndarray:
    """Mass-weighted mean of voxel centers, box frame (meters)."""
    if dist.total_mass <= 0.0:
        raise EmptyDistributionError("empty distribution")
    m = dist.voxel_mass.reshape(-1)
    centers = dist.voxel_centers().reshape(-1, 3)
    return m @ centers / dist.total_mass


def inertia_tensor(dist: MassDistribution, about) -> np.ndarray:
    """Particle-system inertia tensor about `about` (box frame), kg m^2."""
    if dist.total_mass <= 0.0:
        raise EmptyDistributionError("empty distribution")
    m = dist.voxel_mass.reshape(-1)
    r = dist.voxel_centers().reshape(-1, 3) - np.asarray(about, dtype=float)
    r2 = np.einsum("ij,ij->i", r, r)
    tensor = np.eye(3) * (m @ r2) - (r * m[:, None]).T @ r
    return 0.5 * (tensor + tensor.T)


# ---------------------------------------------------------------------------
# hazard classification and occupancy overlap
# ---------------------------------------------------------------------------

def classify_hazard(dist: MassDistribution,
                    hazard_fraction=HAZARD_FRACTION) -> HazardReport:
    """Flag distributions whose payload mass concentrates in one quarter slab.

    Fractions are computed on voxel masses with the uniform floor removed
    (subtracting the per-voxel minimum, which equals the floor for generated
    distributions and keeps the result invariant to uniform mass scaling).  A
    distribution with no residual above the floor -- e.g. exactly uniform --
    falls back to raw mass fractions, where each slab holds about a quarter.
    """
    m = dist.voxel_mass
    residual = m - m.min()
    residual_total = residual.sum()
    if residual_total > 1e-12 * max(dist.total_mass, 1.0):
        weights = residual / residual_total
    else:
        weights = m / dist.total_mass

    l, w, _ = dist.box_dims
    centers = dist.voxel_centers()
    x = centers[..., 0] + l / 2.0   # corner-anchored coordinates
    y = centers[..., 1] + w / 2.0
    slabs = (
        ("U1", x <= l / 4.0),
        ("U2", x >= 3.0 * l / 4.0),
        ("U3", y <= w / 4.0),
        ("U4", y >= 3.0 * w / 4.0),
    )
    best_name, best_frac = None, -1.0
    for name, mask in slabs:
        frac = float(weights[mask].sum())
        if frac > best_frac:
            best_name, best_frac = name, frac
    hazardous = best_frac >= hazard_fraction
    return HazardReport(
        hazardous=hazardous,
        triggering_volume=best_name if hazardous else None,
        mass_fraction_in_volume=best_frac,
    )


def iou(predicted: OccupancyGrid, truth: OccupancyGrid, threshold=0.5) -> float:
    """Intersection over union of the thresholded grids; empty/empty -> 1."""
    if tuple(predicted.grid_dims) != tuple(truth.grid_dims):
        raise ValueError("grid_dims mismatch")
    a = predicted.occupancy >= threshold
    b = truth.occupancy >= threshold
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------------------
# serialization: versioned flat binary, little-endian
# ---------------------------------------------------------------------------
# Layout: 8-byte magic, uint32 version, 3x uint32 grid_dims, 3x float64
# box_dims, then row-major voxel masses as float64.

_HEADER = struct.Struct("<8sI3I3d")


def save_distribution(path, dist: MassDistribution) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_FILE_MAGIC, _FILE_VERSION,
                              *dist.grid_dims, *dist.box_dims))
        fh.write(np.ascontiguousarray(dist.voxel_mass, dtype="<f8").tobytes())


def load_distribution(path) -> MassDistribution:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError("truncated distribution file")
        magic, version, n_l, n_w, n_h, l, w, h = _HEADER.unpack(header)
        if magic != _FILE_MAGIC:
            raise ValueError("not a distribution file (bad magic)")
        if version != _FILE_VERSION:
            raise ValueError(f"unsupported distribution file version {version}")
        grid_dims = (n_l, n_w, n_h)
        count = int(np.prod(grid_dims))
        payload = fh.read(count * 8)
        if len(payload) != count * 8:
            raise ValueError("truncated distribution file")
        mass = np.frombuffer(payload, dtype="<f8").astype(float).reshape(grid_dims)
    return make_distribution(mass, (l, w, h))
