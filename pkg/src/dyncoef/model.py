"""Radiance field model: factorized grid + appearance head + occupancy mask."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import gradtensor as gt
from .appearance import AppearanceConfig, AppearanceModel
from .field import AlphaMask, VMGrid, density_at, interpolation_matrices, query_features
from .gradtensor import Tensor
from .render import Camera, RenderConfig, SampleSet, compositing_weights, generate_rays, sample_rays


@dataclass
class FieldConfig:
    resolution: tuple = (48, 48, 48)
    bounds: tuple = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
    density_ranks: tuple = (16, 16, 16)
    appearance_ranks: tuple = (48, 48, 48)
    init_std: float = 0.1
    mask_threshold: float = 0.01
    near: float = 2.0
    far: float = 6.0
    appearance: AppearanceConfig = field(default_factory=AppearanceConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["bounds"] = [list(b) for b in self.bounds]
        d["density_ranks"] = list(self.density_ranks)
        d["appearance_ranks"] = list(self.appearance_ranks)
        d["render"]["background"] = list(self.render.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown field config keys: {sorted(unknown)}")
        app = AppearanceConfig(**d.pop("appearance", {}))
        rd = dict(d.pop("render", {}))
        if "background" in rd:
            rd["background"] = tuple(rd["background"])
        ren = RenderConfig(**rd)
        for key in ("resolution", "density_ranks", "appearance_ranks"):
            if key in d:
                d[key] = tuple(d[key]) if not isinstance(d[key], int) else (d[key],) * 3
        if "bounds" in d:
            d["bounds"] = tuple(tuple(b) for b in d["bounds"])
        return cls(appearance=app, render=ren, **d)


class RadianceField:
    def __init__(self, config: FieldConfig | None = None, seed: int = 0):
        self.config = config = config or FieldConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.grid = VMGrid.create(config.resolution, config.bounds, config.density_ranks,
                                  config.appearance_ranks, config.init_std, rng)
        self.appearance = AppearanceModel(config.appearance, self.grid.appearance.width,
                                          rng.integers(2**32))
        self.mask: AlphaMask | None = None

    def parameters(self) -> dict[str, Tensor]:
        return {**self.grid.parameters(), **self.appearance.parameters()}

    def grid_parameter_names(self) -> set[str]:
        return set(self.grid.parameters())

    @property
    def step_size(self) -> float:
        """Reference sample spacing used for mask refreshes: half a voxel."""
        return 0.5 * float(np.mean(self.grid.voxel_size))

    def refresh_mask(self) -> AlphaMask:
        from .field import update_alpha_mask

        base = self.mask or AlphaMask.for_grid(self.grid, self.config.mask_threshold)
        self.mask = update_alpha_mask(self.grid, base, self.step_size)
        return self.mask

    # ------------------------------------------------------------------
    def radiance_at(self, points, dirs, illum=None) -> Tensor:
        """Outgoing RGB at world points for unit view directions."""
        points = np.atleast_2d(points)
        feats = query_features(self.grid, points, "appearance")
        return self.appearance(feats, self.grid.normalize(points), np.atleast_2d(dirs), illum)

    def render_rays(self, origins, dirs, illum=None, cfg: RenderConfig | None = None,
                    rng: np.random.Generator | None = None, use_mask: bool = True):
        """Composite colors ``(B, 3)`` and the filled :class:`SampleSet`."""
        cfg = cfg or self.config.render
        origins = np.atleast_2d(origins)
        dirs = np.atleast_2d(dirs)
        b = len(origins)
        samples = sample_rays(origins, dirs, cfg, self.grid.bounds, self.config.near, self.config.far,
                              self.mask if use_mask else None, rng)
        n = samples.t.shape[1]
        flat_valid = np.flatnonzero(samples.valid)
        pos = samples.positions.reshape(-1, 3)[flat_valid]
        bg = np.asarray(cfg.background, dtype=np.float64)

        interp = interpolation_matrices(self.grid, pos) if len(pos) else None
        if len(pos):
            sigma_valid = density_at(self.grid, pos, interp)
            sigma = gt.reshape(gt.scatter_rows(sigma_valid, flat_valid, b * n), (b, n))
        else:
            sigma = gt.Tensor(np.zeros((b, n)))
        trans, _, w = compositing_weights(sigma, samples.deltas)

        wv = w.values.reshape(-1)[flat_valid]
        keep = wv > cfg.weight_threshold if cfg.weight_threshold > 0 else np.ones(len(wv), bool)
        sel_local = np.flatnonzero(keep)
        if len(sel_local):
            sel = flat_valid[sel_local]
            sub = interp if len(sel_local) == len(wv) else [(line[sel_local], plane[sel_local])
                                                            for line, plane in interp]
            feats = query_features(self.grid, None, "appearance", sub)
            ray_of = sel // n
            il = None if illum is None else np.broadcast_to(np.asarray(illum), (b,))[ray_of]
            rgb_sel = self.appearance(feats, self.grid.normalize(pos[sel_local]), dirs[ray_of], il)
            rgb = gt.reshape(gt.scatter_rows(rgb_sel, sel, b * n), (b, n, 3))
            color = gt.reduce(gt.reshape(w, (b, n, 1)) * rgb, "sum", axis=1)
        else:
            color = gt.Tensor(np.zeros((b, 3)))
        acc = gt.reduce(w, "sum", axis=1, keepdims=True)
        out = color + (1.0 - acc) * bg

        samples.densities = sigma.values
        samples.transmittances = trans.values
        samples.weights = w.values
        return out, samples

    def render_batch(self, origins, dirs, illum=None, cfg: RenderConfig | None = None) -> np.ndarray:
        """``(R, 3)`` colors clamped to ``[0, 1]``, rendered in chunks without a tape."""
        cfg = cfg or self.config.render
        if cfg.stratified_jitter:
            cfg = RenderConfig(**{**asdict(cfg), "stratified_jitter": False})
        if illum is None and self.appearance.codes.active:
            illum = 0
        per_ray = np.ndim(illum) > 0
        out = np.empty((len(origins), 3))
        with gt.no_grad():
            for lo in range(0, len(origins), cfg.chunk):
                hi = lo + cfg.chunk
                rgb, _ = self.render_rays(origins[lo:hi], dirs[lo:hi], illum[lo:hi] if per_ray else illum, cfg)
                out[lo:hi] = rgb.values
        return np.clip(out, 0.0, 1.0)

    def render_image(self, cam: Camera, illum: int | None = None, cfg: RenderConfig | None = None) -> np.ndarray:
        """``(H, W, 3)`` image clamped to ``[0, 1]``; deterministic without jitter."""
        origins, dirs = generate_rays(cam)
        return self.render_batch(origins, dirs, illum, cfg).reshape(cam.height, cam.width, 3)

def radiance(model: RadianceField, x, d, illum=None) -> Tensor:
    return model.radiance_at(x, d, illum)


def render_image(model: RadianceField, cam: Camera, cfg: RenderConfig | None = None,
                 illum: int | None = None) -> np.ndarray:
    return model.render_image(cam, illum, cfg)
