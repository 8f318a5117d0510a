"""Photometric + total-variation training loop."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradtensor as gt
from .dataset import SceneDataset
from .field import VMGrid
from .gradtensor import ContractError, DimensionError, Tensor
from .metrics import psnr, psnr_from_mse
from .model import RadianceField
from .render import RenderConfig

logger = logging.getLogger(__name__)

DEFAULT_MASK_ITERS = (1000, 2000, 3000, 4000, 5000, 6000, 7000)


@dataclass
class TrainConfig:
    iterations: int = 100_000
    batch_rays: int = 5000
    lr_init: float = 0.02
    lr_network: float = 1e-3
    lr_decay_factor: float = 0.1
    decay_span: int | None = None  # iterations over which lr reaches lr_decay_factor; None = run length
    tv_weight: float = 1.0
    tv_vector_weight: float = 0.01
    tv_matrix_weight: float = 0.01
    mask_update_iters: tuple = DEFAULT_MASK_ITERS
    log_every: int = 100
    seed: int = 0
    threads: int = 1
    deterministic: bool = True
    # parameters not listed here get lr_network
    grid_lr_groups: tuple = ("density.", "appearance.")

    def __post_init__(self):
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")
        if self.lr_init < 0 or self.lr_network < 0:
            raise ValueError("learning rates must be non-negative")
        if min(self.tv_weight, self.tv_vector_weight, self.tv_matrix_weight) < 0:
            raise ValueError("TV weights must be non-negative")
        self.mask_update_iters = tuple(int(i) for i in self.mask_update_iters)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


# ---------------------------------------------------------------------------
# losses


def photometric_loss(pred, target) -> Tensor:
    """Mean squared error over rays and RGB channels."""
    pred = gt.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    return gt.reduce(gt.square(pred - target), "mean")


def _tv_term(t: Tensor, axis: int, eps: float) -> Tensor:
    n = t.shape[axis]
    hi = [slice(None)] * t.ndim
    lo = [slice(None)] * t.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    d = t[tuple(hi)] - t[tuple(lo)]
    return gt.reduce(gt.sqrt(gt.square(d) + eps), "sum")


def tv_loss(grid: VMGrid, vector_weight: float = 0.01, matrix_weight: float = 0.01,
            eps: float = 1e-8) -> Tensor:
    """``(1/P) * sum(l1 * sqrt(dV^2) + l2 * sqrt(dM^2))`` over all density and appearance factors.

    ``P`` is the total factor parameter count; ``eps`` inside each square root
    keeps the gradient finite at zero difference.
    """
    total = None
    count = 0
    for fs in (grid.density, grid.appearance):
        for v in fs.vectors:
            count += v.size
            term = _tv_term(v, 1, eps) * vector_weight
            total = term if total is None else total + term
        for m in fs.matrices:
            count += m.size
            term = (_tv_term(m, 1, eps) + _tv_term(m, 2, eps)) * matrix_weight
            total = total + term
    return total * (1.0 / count)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray | None], lr) -> None:
        """Update ``params`` in place; ``lr`` is a float or a name -> float mapping."""
        for name in params:
            if grads.get(name) is None:
                raise ContractError(f"missing gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.values)
                self.v[name] = np.zeros_like(p.values)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            rate = lr[name] if isinstance(lr, dict) else lr
            if rate == 0.0:
                continue
            p.values = p.values - rate * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def meta(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "Adam":
        opt = cls(meta["beta1"], meta["beta2"], meta["eps"])
        opt.t = meta["t"]
        for k, arr in arrays.items():
            kind, name = k.split("/", 1)
            (opt.m if kind == "m" else opt.v)[name] = arr.copy()
        return opt


def step(params, grads, opt: Adam, lr):
    opt.step(params, grads, lr)
    return params


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: RadianceField
    log: list = field(default_factory=list)
    optimizer: Adam | None = None
    seconds: float = 0.0


def _lr_scale(cfg: TrainConfig, it: int) -> float:
    span = cfg.decay_span or cfg.iterations
    return cfg.lr_decay_factor ** (min(it, span) / max(span, 1))


def _batch_grads(model, params, names, origins, dirs, colors, illum, rcfg, rngs, ordered=True):
    """Loss and gradients for one batch; ``rngs`` has one generator per shard.

    With ``ordered`` the shard results are summed in shard order, which makes
    the floating-point result independent of thread scheduling.
    """
    shards = np.array_split(np.arange(len(origins)), len(rngs))
    total = len(origins)

    def run(k):
        idx = shards[k]
        with gt.Tape() as tape:
            rgb, _ = model.render_rays(origins[idx], dirs[idx], None if illum is None else illum[idx],
                                       rcfg, rngs[k])
            sq = gt.reduce(gt.square(rgb - colors[idx]), "sum")
            part = sq * (1.0 / (3 * total))
        return part.item(), tape.gradients(part, [params[n] for n in names])

    if len(rngs) == 1:
        results = [run(0)]
    elif ordered:
        with ThreadPoolExecutor(len(rngs)) as pool:
            results = list(pool.map(run, range(len(rngs))))
    else:
        with ThreadPoolExecutor(len(rngs)) as pool:
            futures = [pool.submit(run, k) for k in range(len(rngs))]
            results = [f.result() for f in as_completed(futures)]
    loss = 0.0
    grads = [np.zeros_like(params[n].values) for n in names]
    for part, gs in results:
        loss += part
        for i, g in enumerate(gs):
            grads[i] += g
    return loss, grads


def train(model: RadianceField, dataset: SceneDataset, cfg: TrainConfig,
          render_cfg: RenderConfig | None = None, log_path=None, callback=None) -> TrainResult:
    """Optimize ``model`` in place on ``dataset``; returns the model and its metrics log."""
    if len(dataset) == 0:
        raise ValueError("dataset has no frames")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    base = render_cfg or model.config.render
    rcfg = RenderConfig(**{**asdict(base), "stratified_jitter": True})
    origins, dirs, colors, illum = dataset.rays()
    if not model.appearance.codes.active:
        illum = None
    params = model.parameters()
    names = list(params)
    grid_names = {n for n in names if n.startswith(cfg.grid_lr_groups)}
    opt = Adam()
    log: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    mask_iters = set(cfg.mask_update_iters)
    try:
        for it in range(1, cfg.iterations + 1):
            idx = rng.integers(0, len(origins), cfg.batch_rays)
            shard_rngs = rng.spawn(max(1, cfg.threads))
            photo, grads = _batch_grads(model, params, names, origins[idx], dirs[idx], colors[idx],
                                        None if illum is None else illum[idx], rcfg, shard_rngs,
                                        cfg.deterministic)
            loss = photo
            if cfg.tv_weight > 0:
                with gt.Tape() as tape:
                    reg = tv_loss(model.grid, cfg.tv_vector_weight, cfg.tv_matrix_weight) * cfg.tv_weight
                loss += reg.item()
                for i, g in enumerate(tape.gradients(reg, [params[n] for n in names])):
                    grads[i] += g
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                snapshot = {"iteration": it, "loss": loss, "batch_index": idx,
                            "params": {n: p.values.copy() for n, p in params.items()}}
                raise TrainingDiverged(f"non-finite loss or gradient at iteration {it}", snapshot)
            scale = _lr_scale(cfg, it - 1)
            lrs = {n: (cfg.lr_init if n in grid_names else cfg.lr_network) * scale for n in names}
            opt.step(params, dict(zip(names, grads)), lrs)
            if it in mask_iters:
                model.refresh_mask()
            if it % cfg.log_every == 0 or it == cfg.iterations:
                rec = {"iteration": it, "loss": float(loss), "psnr": float(psnr_from_mse(photo))}
                log.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                logger.info("iter %d loss %.6f psnr %.2f", it, rec["loss"], rec["psnr"])
            if callback is not None:
                callback(it, model, loss)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model, log, opt, time.perf_counter() - start)


def evaluate(model: RadianceField, dataset: SceneDataset, with_ssim: bool = True) -> dict:
    """Per-frame and mean PSNR/SSIM of renders against the dataset images."""
    from .metrics import ssim

    rows = []
    for i, f in enumerate(dataset.frames):
        illum = f.illumination if model.appearance.codes.active else None
        pred = model.render_image(f.camera, illum)
        row = {"frame": i, "illumination": f.illumination, "psnr": psnr(pred, f.image)}
        if with_ssim:
            row["ssim"] = ssim(pred, f.image)
        rows.append(row)
    out = {"frames": rows, "psnr": float(np.mean([r["psnr"] for r in rows]))}
    if with_ssim:
        out["ssim"] = float(np.mean([r["ssim"] for r in rows]))
    return out
