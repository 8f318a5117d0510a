"""Analytic sphere scenes ray-traced with Lambertian + Blinn-Phong shading.

These serve as ground truth: the outgoing radiance is evaluated in closed
form for directional/point lights (no shadows, no interreflection).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Frame, SceneDataset
from .render import Camera, focal_from_fov, generate_rays, pixel_grid

_SPLIT_STREAM = {"train": 0, "test": 1, "val": 2}


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.8
    albedo: tuple = (0.55, 0.25, 0.2)
    specular: float = 0.8
    shininess: float = 64.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


@dataclass
class Light:
    direction: tuple | None = (0.3, -0.4, 0.87)  # towards the light
    position: tuple | None = None
    intensity: tuple = (0.8, 0.8, 0.8)

    def __post_init__(self):
        if (self.direction is None) == (self.position is None):
            raise ValueError("a light needs exactly one of direction or position")
        if np.any(np.asarray(self.intensity) < 0):
            raise ValueError("light intensity must be non-negative")

    def incoming(self, points: np.ndarray) -> np.ndarray:
        """Unit vectors from surface points towards the light."""
        if self.direction is not None:
            w = np.asarray(self.direction, dtype=np.float64)
            return np.broadcast_to(w / np.linalg.norm(w), points.shape)
        w = np.asarray(self.position, dtype=np.float64) - points
        return w / np.linalg.norm(w, axis=-1, keepdims=True)


@dataclass
class SyntheticSceneSpec:
    spheres: list = field(default_factory=lambda: [Sphere()])
    lights: list = field(default_factory=lambda: [Light()])
    ambient: tuple = (0.15, 0.15, 0.15)
    background: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    camera_distance: float = 4.0
    camera_angle_x: float = 0.6911112070083618
    elevation_range: tuple = (10.0, 70.0)  # degrees above the horizon
    multi_illumination: bool = False
    near: float = 2.0
    far: float = 6.0
    supersample: int = 1  # k x k rays per pixel, box-filtered; 1 = pixel centers only

    def __post_init__(self):
        if self.supersample < 1:
            raise ValueError("supersample must be at least 1")

    @property
    def num_illuminations(self) -> int:
        return len(self.lights) if self.multi_illumination else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        spheres = [Sphere(**s) for s in d.pop("spheres", [asdict(Sphere())])]
        lights = [Light(**l) for l in d.pop("lights", [asdict(Light())])]
        return cls(spheres=spheres, lights=lights, **d)


def glossy_sphere_spec(shininess: float = 64.0, specular: float = 0.8, n_lights: int = 1,
                       seed: int = 0, supersample: int = 1) -> SyntheticSceneSpec:
    """The single glossy sphere used for desk-scale experiments."""
    lights = [Light(direction=(0.3, -0.4, 0.87), intensity=(0.8, 0.8, 0.8))]
    if n_lights > 1:
        lights.append(Light(direction=(-0.7, 0.5, 0.5), intensity=(0.9, 0.8, 0.6)))
    for i in range(2, n_lights):
        a = 2 * np.pi * i / n_lights
        lights.append(Light(direction=(np.cos(a), np.sin(a), 0.6), intensity=(0.8, 0.8, 0.8)))
    return SyntheticSceneSpec(spheres=[Sphere(shininess=shininess, specular=specular)], lights=lights,
                              seed=seed, multi_illumination=n_lights > 1, supersample=supersample)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix with columns (right, up, backward, eye)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, cam_up, -fwd, eye
    return pose


def hemisphere_positions(spec: SyntheticSceneSpec, n_views: int, split: str = "train") -> np.ndarray:
    rng = np.random.default_rng([spec.seed, _SPLIT_STREAM.get(split, 3)])
    azim = rng.uniform(0.0, 2 * np.pi, n_views)
    lo, hi = np.radians(spec.elevation_range)
    # uniform in solid angle over the elevation band
    elev = np.arcsin(rng.uniform(np.sin(lo), np.sin(hi), n_views))
    r = spec.camera_distance
    return np.stack([r * np.cos(elev) * np.cos(azim), r * np.cos(elev) * np.sin(azim), r * np.sin(elev)], -1)


def intersect(spec: SyntheticSceneSpec, origins, dirs):
    """Nearest positive hit per ray: distance (inf on miss) and sphere index (-1 on miss)."""
    best = np.full(len(origins), np.inf)
    which = np.full(len(origins), -1)
    for i, s in enumerate(spec.spheres):
        oc = origins - np.asarray(s.center)
        b = np.sum(oc * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - s.radius**2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = np.where(-b - sq > 1e-9, -b - sq, -b + sq)
        hit &= t > 1e-9
        closer = hit & (t < best)
        best = np.where(closer, t, best)
        which = np.where(closer, i, which)
    return best, which


def shade(spec: SyntheticSceneSpec, origins, dirs, lights=None) -> np.ndarray:
    """Unclamped outgoing radiance along each ray (background on a miss)."""
    lights = spec.lights if lights is None else lights
    t, which = intersect(spec, origins, dirs)
    out = np.broadcast_to(np.asarray(spec.background, dtype=np.float64), origins.shape).copy()
    hit = which >= 0
    if not hit.any():
        return out
    p = origins[hit] + t[hit, None] * dirs[hit]
    idx = which[hit]
    centers = np.array([s.center for s in spec.spheres], dtype=np.float64)[idx]
    n = (p - centers) / np.array([s.radius for s in spec.spheres])[idx, None]
    v = -dirs[hit]
    albedo = np.array([s.albedo for s in spec.spheres], dtype=np.float64)[idx]
    ks = np.array([s.specular for s in spec.spheres])[idx, None]
    shin = np.array([s.shininess for s in spec.spheres])[idx, None]
    color = np.asarray(spec.ambient) * albedo
    for light in lights:
        w = light.incoming(p)
        h = w + v
        h /= np.linalg.norm(h, axis=-1, keepdims=True)
        ndw = np.maximum(0.0, np.sum(n * w, axis=-1, keepdims=True))
        ndh = np.maximum(0.0, np.sum(n * h, axis=-1, keepdims=True))
        color = color + (albedo * ndw + ks * ndh**shin) * np.asarray(light.intensity)
    out[hit] = color
    return out


def render_view(spec: SyntheticSceneSpec, cam: Camera, illumination: int = 0) -> np.ndarray:
    """Clamped ``(H, W, 3)`` oracle image.

    With ``spec.supersample = k > 1`` each pixel averages the radiance of a
    regular k x k grid of sub-pixel rays before clamping.
    """
    lights = [spec.lights[illumination]] if spec.multi_illumination else spec.lights
    k = spec.supersample
    pixels = pixel_grid(cam).astype(np.float64)
    offsets = (np.arange(k) + 0.5) / k - 0.5
    total = 0.0
    for dv in offsets:
        for du in offsets:
            origins, dirs = generate_rays(cam, pixels + [du, dv])
            total = total + shade(spec, origins, dirs, lights)
    return np.clip(total / (k * k), 0.0, 1.0).reshape(cam.height, cam.width, 3)


def scene_cameras(spec: SyntheticSceneSpec, n_views: int, resolution, split: str = "train") -> list[Camera]:
    w, h = (resolution, resolution) if isinstance(resolution, int) else resolution
    focal = focal_from_fov(w, spec.camera_angle_x)
    return [Camera(w, h, focal, look_at(eye), spec.near, spec.far)
            for eye in hemisphere_positions(spec, n_views, split)]


def generate_scene(spec: SyntheticSceneSpec, n_views: int, resolution=64, split: str = "train") -> SceneDataset:
    if n_views < 1:
        raise ValueError("n_views must be at least 1")
    frames = []
    s = spec.num_illuminations
    for i, cam in enumerate(scene_cameras(spec, n_views, resolution, split)):
        illum = i % s
        frames.append(Frame(render_view(spec, cam, illum), cam, illum, f"{split}_{i}"))
    return SceneDataset(frames, split, s, spec.camera_angle_x, {"generator": "synthetic"})
