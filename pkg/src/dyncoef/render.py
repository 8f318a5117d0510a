"""Pinhole cameras, ray sampling and differentiable alpha compositing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradtensor as gt
from .gradtensor import Tensor


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    pose: np.ndarray  # 4x4 camera-to-world, OpenGL axes (x right, y up, camera looks down -z)
    near: float = 2.0
    far: float = 6.0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        rot = self.pose[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("camera pose rotation block is not orthonormal")

    @classmethod
    def from_fov(cls, width, height, camera_angle_x, pose, near=2.0, far=6.0) -> "Camera":
        return cls(width, height, focal_from_fov(width, camera_angle_x), pose, near, far)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]


def focal_from_fov(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / np.tan(0.5 * camera_angle_x)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass
class RenderConfig:
    samples_per_ray: int = 96
    stratified_jitter: bool = False
    background: tuple = (1.0, 1.0, 1.0)
    # radiance is only evaluated where the compositing weight exceeds this
    weight_threshold: float = 1e-4
    chunk: int = 2048

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be at least 2")


@dataclass
class SampleSet:
    """Samples for a batch of rays on a dense ``(B, N)`` layout.

    Dropped samples carry ``valid = False`` and ``deltas = 0``. Densities,
    transmittances and weights are filled in by the model renderer.
    """

    t: np.ndarray
    positions: np.ndarray
    deltas: np.ndarray
    valid: np.ndarray
    densities: np.ndarray | None = None
    transmittances: np.ndarray | None = None
    weights: np.ndarray | None = None

    def ray(self, i: int) -> dict:
        keep = self.valid[i]
        out = {"positions": self.positions[i][keep], "deltas": self.deltas[i][keep]}
        for name in ("densities", "transmittances", "weights"):
            arr = getattr(self, name)
            if arr is not None:
                out[name] = arr[i][keep]
        return out


def pixel_grid(cam: Camera) -> np.ndarray:
    """All ``(u, v)`` pixel indices in row-major order."""
    v, u = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def generate_rays(cam: Camera, pixels=None) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions through pixel centers; ``pixels`` is ``(P, 2)`` of ``(u, v)``."""
    pixels = pixel_grid(cam) if pixels is None else np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    u = pixels[:, 0] + 0.5
    v = pixels[:, 1] + 0.5
    dirs_cam = np.stack([(u - 0.5 * cam.width) / cam.focal,
                         -(v - 0.5 * cam.height) / cam.focal,
                         -np.ones_like(u)], axis=-1)
    dirs = dirs_cam @ cam.pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    return origins, dirs


def ray_box_interval(origins, dirs, bounds) -> tuple[np.ndarray, np.ndarray]:
    """Slab-test entry/exit distances; ``t_in > t_out`` marks a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bounds[0] - origins) * inv
        t1 = (bounds[1] - origins) * inv
    lo = np.nanmax(np.minimum(t0, t1), axis=-1)
    hi = np.nanmin(np.maximum(t0, t1), axis=-1)
    return lo, hi


def sample_rays(origins, dirs, cfg: RenderConfig, bounds, near=2.0, far=6.0, mask=None,
                rng: np.random.Generator | None = None) -> SampleSet:
    """Uniform samples over ``[near, far]`` clipped to ``bounds``.

    Sample ``i`` sits at ``t_near + i * step`` (plus a per-bin jitter when
    ``cfg.stratified_jitter`` and ``rng`` are given) and owns the interval up
    to the next sample; the last sample owns nothing. Samples in empty mask
    voxels are dropped and their interval is merged into the previous kept
    sample.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    if not near < far:
        raise ValueError("near must be smaller than far")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    n = cfg.samples_per_ray
    t_in, t_out = ray_box_interval(origins, dirs, bounds)
    t_near = np.maximum(t_in, near)
    t_far = np.minimum(t_out, far)
    hit = t_far > t_near
    t_near = np.where(hit, t_near, near)
    t_far = np.where(hit, t_far, near + 1.0)
    step = (t_far - t_near) / n
    offs = np.arange(n, dtype=np.float64)[None, :]
    if cfg.stratified_jitter and rng is not None:
        offs = offs + rng.uniform(0.0, 1.0, (len(origins), n))
    t = t_near[:, None] + offs * step[:, None]
    deltas = np.zeros_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    positions = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    positions = np.clip(positions, bounds[0], bounds[1])
    valid = np.broadcast_to(hit[:, None], t.shape).copy()
    if mask is not None:
        valid &= mask.lookup(positions)
        deltas = _merge_dropped(deltas, valid)
    deltas = np.where(valid, deltas, 0.0)
    return SampleSet(t, positions, deltas, valid)


def _merge_dropped(deltas: np.ndarray, valid: np.ndarray) -> np.ndarray:
    b, n = deltas.shape
    idx = np.where(valid, np.arange(n)[None, :], -1)
    owner = np.maximum.accumulate(idx, axis=1)
    rows = np.broadcast_to(np.arange(b)[:, None], (b, n))
    keep = owner >= 0
    flat_owner = (rows * n + owner)[keep]
    merged = np.bincount(flat_owner, weights=deltas[keep], minlength=b * n).reshape(b, n)
    return np.where(valid, merged, 0.0)


def compositing_weights(sigma, deltas) -> tuple[Tensor, Tensor, Tensor]:
    """Transmittance ``T``, opacity ``alpha`` and weights ``T * alpha`` along the last axis."""
    sigma = gt.as_tensor(sigma)
    tau = sigma * np.asarray(deltas, dtype=np.float64)
    # exclusive prefix sum, so T is monotone to the last bit
    head = gt.Tensor(np.zeros(tau.shape[:-1] + (1,)))
    before = gt.concat([head, gt.cumsum(tau[..., :-1], axis=-1)], axis=-1)
    trans = gt.exp(gt.neg(before))
    alpha = 1.0 - gt.exp(gt.neg(tau))
    return trans, alpha, trans * alpha


def integrate(sigma, deltas, radiance, background=(1.0, 1.0, 1.0)) -> Tensor:
    """``C = sum_x w_x L_x + (1 - sum_x w_x) * background`` for ``(B, N)`` samples.

    ``radiance`` is ``(B, N, 3)``; 1-D ``sigma``/``deltas`` describe one ray.
    """
    sigma = gt.as_tensor(sigma)
    radiance = gt.as_tensor(radiance)
    single = sigma.ndim == 1
    if single:
        sigma = gt.reshape(sigma, (1, -1))
        radiance = gt.reshape(radiance, (1, -1, 3))
        deltas = np.reshape(deltas, (1, -1))
    _, _, w = compositing_weights(sigma, deltas)
    color = gt.reduce(gt.reshape(w, w.shape + (1,)) * radiance, "sum", axis=1)
    acc = gt.reduce(w, "sum", axis=1, keepdims=True)
    out = color + (1.0 - acc) * np.asarray(background, dtype=np.float64)
    return gt.reshape(out, (3,)) if single else out


def residual_transmittance(sigma, deltas) -> np.ndarray:
    tau = np.asarray(sigma) * np.asarray(deltas)
    return np.exp(-tau.sum(axis=-1))
