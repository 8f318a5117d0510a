"""Run configuration documents (YAML) and named presets."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .appearance import VARIANTS, AppearanceConfig
from .model import FieldConfig
from .render import RenderConfig
from .synthetic import SyntheticSceneSpec, glossy_sphere_spec
from .train import TrainConfig

OUT_ENV = "DYNCOEF_OUT"

VARIANT_LETTERS = {
    "full": "full",
    "a": "no_decomposition",
    "b": "linear_blend",
    "c": "concat_conditioning",
    "d": "raw_features",
}


class ConfigError(ValueError):
    """A configuration document has unknown keys or invalid values."""


def _check_keys(section: str, data: dict, allowed) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")


@dataclass
class SceneConfig:
    """Synthetic scene plus how many views to render per split."""

    spec: SyntheticSceneSpec = field(default_factory=glossy_sphere_spec)
    n_train: int = 20
    n_test: int = 5
    resolution: int = 64

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "n_train": self.n_train, "n_test": self.n_test,
                "resolution": self.resolution}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        _check_keys("scene", d, {"spec", "n_train", "n_test", "resolution"})
        d = dict(d)
        spec = d.pop("spec", None)
        if spec is not None:
            spec_keys = {f.name for f in fields(SyntheticSceneSpec)}
            _check_keys("scene.spec", spec, spec_keys)
            spec = SyntheticSceneSpec.from_dict(spec)
        else:
            spec = glossy_sphere_spec()
        return cls(spec=spec, **d)


@dataclass
class RunConfig:
    field: FieldConfig = None  # type: ignore[assignment]
    train: TrainConfig = None  # type: ignore[assignment]
    scene: SceneConfig = None  # type: ignore[assignment]
    variant: str = "full"
    dataset: str | None = None
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        self.field = self.field or FieldConfig()
        self.train = self.train or TrainConfig()
        self.scene = self.scene or SceneConfig()
        self.variant = VARIANT_LETTERS.get(self.variant, self.variant)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; use one of {sorted(VARIANT_LETTERS)}")
        self.field.appearance.variant = self.variant

    def to_dict(self) -> dict:
        d = {"field": self.field.to_dict(), "train": asdict(self.train), "scene": self.scene.to_dict(),
             "variant": self.variant, "dataset": self.dataset, "out": self.out, "seed": self.seed}
        return json.loads(json.dumps(d))  # tuples -> lists, so the YAML stays plain

    @classmethod
    def from_dict(cls, d: dict | None, base: "RunConfig | None" = None) -> "RunConfig":
        """Overlay ``d`` on ``base`` (default: stock defaults); unknown keys raise."""
        d = dict(d or {})
        preset = d.pop("preset", None)
        if base is None:
            base = preset_config(preset) if preset else cls()
        _check_keys("run config", d, {f.name for f in fields(cls)})
        merged = base.to_dict()
        for key, value in d.items():
            if key in ("field", "train", "scene") and isinstance(value, dict):
                merged[key] = _deep_merge(merged[key], value, key)
            else:
                merged[key] = value
        try:
            return cls(field=FieldConfig.from_dict(merged["field"]),
                       train=_train_from_dict(merged["train"]),
                       scene=SceneConfig.from_dict(merged["scene"]),
                       variant=merged["variant"], dataset=merged["dataset"], out=merged["out"],
                       seed=int(merged["seed"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _deep_merge(base: dict, over: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in out:
            raise ConfigError(f"unknown key in {path}: {key}")
        if isinstance(value, dict) and isinstance(out[key], dict):
            out[key] = _deep_merge(out[key], value, f"{path}.{key}")
        else:
            out[key] = value
    return out


def _train_from_dict(d: dict) -> TrainConfig:
    _check_keys("train", d, {f.name for f in fields(TrainConfig)})
    d = dict(d)
    if "grid_lr_groups" in d:
        d["grid_lr_groups"] = tuple(d["grid_lr_groups"])
    return TrainConfig(**d)


def toy_config() -> RunConfig:
    """Desk-scale preset: 48^3 grid, 64x64 glossy sphere, 3000 iterations.

    Grid ranks, basis count, FiLM width and network depths keep their full
    values; the MLP widths, ray batch and samples per ray are reduced so a
    run fits a single CPU core in well under half an hour.

    Ground truth is antialiased with 4x4 sub-pixel rays. At 64 px a hard
    silhouette is otherwise the largest error source by far, and it would
    swamp the appearance differences the preset exists to compare.
    """
    app = AppearanceConfig(trunk_width=64, integrator_width=64)
    fc = FieldConfig(resolution=(48, 48, 48), bounds=((-1.0,) * 3, (1.0,) * 3), appearance=app,
                     render=RenderConfig(samples_per_ray=64))
    tc = TrainConfig(iterations=3000, batch_rays=512, mask_update_iters=(1000, 2000), log_every=100)
    return RunConfig(field=fc, train=tc, scene=SceneConfig(spec=glossy_sphere_spec(supersample=4)),
                     out="runs/toy")


def smoke_config() -> RunConfig:
    """Seconds-scale preset for plumbing checks."""
    app = AppearanceConfig(n_basis=4, film_width=4, illum_dim=4, trunk_depth=2, trunk_width=8,
                           integrator_width=8)
    fc = FieldConfig(resolution=(8, 8, 8), bounds=((-1.0,) * 3, (1.0,) * 3), density_ranks=(2, 2, 2),
                     appearance_ranks=(3, 3, 3), appearance=app, render=RenderConfig(samples_per_ray=12))
    tc = TrainConfig(iterations=10, batch_rays=64, mask_update_iters=(5,), log_every=5)
    return RunConfig(field=fc, train=tc, scene=SceneConfig(n_train=3, n_test=2, resolution=12),
                     out="runs/smoke")


PRESETS = {"default": RunConfig, "toy": toy_config, "smoke": smoke_config}


def preset_config(name: str) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_config(path=None, preset: str | None = None) -> RunConfig:
    """Read a YAML run config; a ``preset`` key (or argument) picks the base values."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if preset is not None:
        data.setdefault("preset", preset)
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
