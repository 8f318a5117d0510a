"""Vector-matrix factorized feature volume and the alpha occupancy mask."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from . import gradtensor as gt
from .gradtensor import Tensor

# (vector axis, (plane axis a, plane axis b)) per mode
AXES = ((0, (1, 2)), (1, (0, 2)), (2, (0, 1)))


class OutOfBoundsError(ValueError):
    """A query point lies outside the grid's bounding box."""


@dataclass
class FactorSet:
    """Per-axis vector stacks ``(R_m, N_m)`` and plane stacks ``(R_m, N_a, N_b)``."""

    vectors: list[Tensor]
    matrices: list[Tensor]

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(v.shape[0] for v in self.vectors)

    @property
    def width(self) -> int:
        return sum(self.ranks)

    def tensors(self) -> list[Tensor]:
        return [*self.vectors, *self.matrices]


def _init_factors(ranks, resolution, rng, std, prefix) -> FactorSet:
    vectors, matrices = [], []
    for m, (ax, (a, b)) in enumerate(AXES):
        r = ranks[m]
        vectors.append(gt.parameter(std * rng.standard_normal((r, resolution[ax])), f"{prefix}.vec{m}"))
        matrices.append(gt.parameter(
            std * rng.standard_normal((r, resolution[a], resolution[b])), f"{prefix}.mat{m}"))
    return FactorSet(vectors, matrices)


@dataclass
class VMGrid:
    resolution: tuple[int, int, int]
    bounds: np.ndarray  # (2, 3): min corner, max corner
    density: FactorSet
    appearance: FactorSet

    @classmethod
    def create(cls, resolution=(48, 48, 48), bounds=((-1.5,) * 3, (1.5,) * 3),
               density_ranks=(16, 16, 16), appearance_ranks=(48, 48, 48),
               init_std: float = 0.1, seed: int | np.random.Generator = 0) -> "VMGrid":
        if isinstance(resolution, int):
            resolution = (resolution,) * 3
        resolution = tuple(int(n) for n in resolution)
        if min(resolution) < 2:
            raise ValueError("grid resolution must be at least 2 per axis")
        bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        if np.any(bounds[1] <= bounds[0]):
            raise ValueError("bounds max corner must exceed min corner")
        rng = np.random.default_rng(seed)
        return cls(resolution, bounds,
                   _init_factors(density_ranks, resolution, rng, init_std, "density"),
                   _init_factors(appearance_ranks, resolution, rng, init_std, "appearance"))

    def factors(self, which: str) -> FactorSet:
        if which == "density":
            return self.density
        if which == "appearance":
            return self.appearance
        raise ValueError(f"unknown feature kind {which!r}")

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (*self.density.tensors(), *self.appearance.tensors())}

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / (np.asarray(self.resolution) - 1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return np.all((points >= self.bounds[0]) & (points <= self.bounds[1]), axis=-1)

    def to_grid(self, points: np.ndarray) -> np.ndarray:
        """Continuous node coordinates: node ``i`` sits at ``bounds[0] + i * voxel_size``."""
        return (np.asarray(points, dtype=np.float64) - self.bounds[0]) / self.voxel_size

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Map the bounding box to ``[-1, 1]^3``."""
        return 2.0 * (np.asarray(points) - self.bounds[0]) / (self.bounds[1] - self.bounds[0]) - 1.0


def _linear_weights(u: np.ndarray, n: int):
    i0 = np.clip(np.floor(u).astype(np.int64), 0, n - 2)
    f = u - i0
    return i0, f


def interpolation_matrices(grid: VMGrid, points: np.ndarray):
    """Sparse linear maps from factor entries to interpolated values at ``points``.

    Returns, per mode, ``(line, plane)`` with shapes ``(P, N_m)`` and
    ``(P, N_a * N_b)``: linear weights along the vector axis and bilinear
    weights over the complementary plane.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.all(grid.contains(points)):
        bad = points[~grid.contains(points)][0]
        raise OutOfBoundsError(f"point {bad.tolist()} outside bounds {grid.bounds.tolist()}")
    u = grid.to_grid(points)
    p = len(points)
    idx, frac = [], []
    for ax in range(3):
        i0, f = _linear_weights(u[:, ax], grid.resolution[ax])
        idx.append(i0)
        frac.append(f)
    out = []
    for ax, (a, b) in AXES:
        # every row has exactly 2 (line) or 4 (plane) entries with ascending columns
        n = grid.resolution[ax]
        line = sp.csr_matrix(
            (np.stack([1 - frac[ax], frac[ax]], axis=1).ravel(),
             np.stack([idx[ax], idx[ax] + 1], axis=1).ravel(), np.arange(0, 2 * p + 1, 2)),
            shape=(p, n))
        nb = grid.resolution[b]
        ia, ib, fa, fb = idx[a], idx[b], frac[a], frac[b]
        cols = [ia * nb + ib, ia * nb + ib + 1, (ia + 1) * nb + ib, (ia + 1) * nb + ib + 1]
        vals = [(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb]
        plane = sp.csr_matrix(
            (np.stack(vals, axis=1).ravel(), np.stack(cols, axis=1).ravel(), np.arange(0, 4 * p + 1, 4)),
            shape=(p, grid.resolution[a] * nb))
        out.append((line, plane))
    return out


def query_features(grid: VMGrid, points, which: str = "density", interp=None) -> Tensor:
    """Per-axis rank components at ``points``, concatenated: shape ``(P, R_1 + R_2 + R_3)``.

    Component ``(m, r)`` is the interpolated vector value along axis ``m``
    times the interpolated plane value over the other two axes.
    """
    fs = grid.factors(which)
    if interp is None:
        interp = interpolation_matrices(grid, points)
    parts = []
    for (line, plane), vec, mat in zip(interp, fs.vectors, fs.matrices):
        r = vec.shape[0]
        v = gt.sparse_matmul(line, gt.transpose(vec))
        m = gt.sparse_matmul(plane, gt.transpose(gt.reshape(mat, (r, -1))))
        parts.append(v * m)
    return gt.concat(parts, axis=1)


def density_from_features(features: Tensor) -> Tensor:
    return gt.relu(gt.reduce(features, "sum", axis=1))


def density_at(grid: VMGrid, points, interp=None) -> Tensor:
    """Volume density ``ReLU(sum of density features)``, shape ``(P,)``."""
    return density_from_features(query_features(grid, points, "density", interp))


@dataclass
class AlphaMask:
    resolution: tuple[int, int, int]
    bounds: np.ndarray
    occupancy: np.ndarray = dc_field(default=None)
    threshold: float = 0.01

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if self.occupancy is None:
            self.occupancy = np.ones(self.resolution, dtype=bool)

    @classmethod
    def for_grid(cls, grid: VMGrid, threshold: float = 0.01, resolution=None) -> "AlphaMask":
        return cls(resolution or grid.resolution, grid.bounds.copy(), threshold=threshold)

    def voxel_centers(self) -> np.ndarray:
        size = (self.bounds[1] - self.bounds[0]) / np.asarray(self.resolution)
        axes = [self.bounds[0, i] + (np.arange(n) + 0.5) * size[i] for i, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        res = np.asarray(self.resolution)
        u = (np.asarray(points) - self.bounds[0]) / (self.bounds[1] - self.bounds[0]) * res
        return np.clip(np.floor(u).astype(np.int64), 0, res - 1)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Occupancy at ``points``; points outside the box count as empty."""
        points = np.asarray(points, dtype=np.float64)
        inside = np.all((points >= self.bounds[0]) & (points <= self.bounds[1]), axis=-1)
        i = self.voxel_index(points)
        return inside & self.occupancy[i[..., 0], i[..., 1], i[..., 2]]


def update_alpha_mask(grid: VMGrid, mask: AlphaMask, step: float, chunk: int = 65536) -> AlphaMask:
    """Mark a voxel occupied iff ``1 - exp(-sigma * step)`` at its center reaches the threshold."""
    centers = mask.voxel_centers().reshape(-1, 3)
    centers = np.clip(centers, grid.bounds[0], grid.bounds[1])
    sigma = np.empty(len(centers))
    with gt.no_grad():
        for lo in range(0, len(centers), chunk):
            sigma[lo:lo + chunk] = density_at(grid, centers[lo:lo + chunk]).values
    alpha = 1.0 - np.exp(-sigma * step)
    return AlphaMask(mask.resolution, mask.bounds.copy(),
                     (alpha >= mask.threshold).reshape(mask.resolution), mask.threshold)
