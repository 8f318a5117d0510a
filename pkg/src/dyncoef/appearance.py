"""Neural basis, FiLM coefficient network and the radiance integrator.

Outgoing radiance at a point is ``G(k, H)`` where ``H = W^T T_c`` projects
appearance features onto ``N_p`` learned bases and ``k = W_x d + b_x`` is an
affine map of the view direction whose parameters the coefficient trunk
predicts from position, basis and illumination code.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import gradtensor as gt
from .gradtensor import ContractError, DimensionError, Tensor

VARIANTS = ("full", "no_decomposition", "linear_blend", "concat_conditioning", "raw_features")


@dataclass
class PosEncConfig:
    num_frequencies: int = 2
    include_input: bool = True

    def encoded_size(self, d: int) -> int:
        return d * (int(self.include_input) + 2 * self.num_frequencies)


def posenc(v, num_frequencies: int = 2, include_input: bool = True) -> Tensor:
    """``[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]``.

    Works row-wise on ``(P, d)`` input; a 1-D vector is encoded as a single row
    and returned 1-D.
    """
    v = gt.as_tensor(v)
    flat = v.ndim == 1
    if flat:
        v = gt.reshape(v, (1, -1))
    parts = [v] if include_input else []
    for level in range(num_frequencies):
        scaled = v * (2.0 ** level * np.pi)
        parts += [gt.sin(scaled), gt.cos(scaled)]
    out = gt.concat(parts, axis=1)
    return gt.reshape(out, (-1,)) if flat else out


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str,
                 bound: float | None = None, std: float | None = None):
        if std is not None:
            w = std * rng.standard_normal((n_in, n_out))
        else:
            if bound is None:
                bound = np.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, (n_in, n_out))
        self.weight = gt.parameter(w, f"{name}.weight")
        self.bias = gt.parameter(np.zeros(n_out), f"{name}.bias")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"linear layer expects width {self.weight.shape[0]}, got {x.shape[-1]}")
        return gt.linear(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """Linear layers with an activation after every layer except (optionally) the last."""

    def __init__(self, widths, rng, name, activation="leaky_relu", alpha=0.01,
                 activate_last=True, last_bound=None):
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            bound = last_bound if last and not activate_last else None
            self.layers.append(Linear(a, b, rng, f"{name}.{i}", bound=bound))
        self.activation = activation
        self.alpha = alpha
        self.activate_last = activate_last

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1 or self.activate_last:
                x = gt.elementwise(x, self.activation, self.alpha)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class BasisProjection:
    def __init__(self, feature_width: int, n_basis: int, rng, name="basis"):
        self.W = gt.parameter(rng.uniform(-1, 1, (feature_width, n_basis)) * np.sqrt(3.0 / feature_width),
                              f"{name}.W")

    @property
    def n_basis(self) -> int:
        return self.W.shape[1]

    def __call__(self, features: Tensor) -> Tensor:
        return project_basis(self.W, features)

    def parameters(self) -> list[Tensor]:
        return [self.W]


def project_basis(W, features) -> Tensor:
    """``H = W^T T_c`` per point; ``features`` is ``(F,)`` or ``(P, F)``."""
    W, features = gt.as_tensor(W), gt.as_tensor(features)
    if features.shape[-1] != W.shape[0]:
        raise DimensionError(f"feature width {features.shape[-1]} does not match W rows {W.shape[0]}")
    if features.ndim == 1:
        return gt.reshape(gt.matmul(gt.reshape(features, (1, -1)), W), (-1,))
    return gt.matmul(features, W)


class IlluminationCodes:
    def __init__(self, count: int, dim: int, rng, active: bool | None = None):
        self.Z = gt.parameter(rng.standard_normal((count, dim)), "illumination.Z")
        self.active = count > 1 if active is None else bool(active)

    @property
    def dim(self) -> int:
        return self.Z.shape[1]

    def __call__(self, index) -> Tensor | None:
        if not self.active:
            return None
        index = np.asarray(index, dtype=np.int64)
        if index.min() < 0 or index.max() >= self.Z.shape[0]:
            raise IndexError(f"illumination index out of range [0, {self.Z.shape[0]})")
        return gt.take(self.Z, index)

    def parameters(self) -> list[Tensor]:
        return [self.Z]


class CoefficientNet:
    """Trunk MLP whose head emits the FiLM map ``(W_x, b_x)`` applied to ``d``.

    With ``film=False`` the head emits ``k`` directly (concatenation ablation).
    """

    def __init__(self, in_width, n_coef, rng, depth=8, width=256, alpha=0.01,
                 film=True, film_init_std=1e-2, name="coef"):
        self.trunk = MLP([in_width] + [width] * depth, rng, f"{name}.trunk", "leaky_relu", alpha)
        self.film = film
        self.n_coef = n_coef
        out = n_coef * 4 if film else n_coef
        if film:
            self.head = Linear(width, out, rng, f"{name}.film", std=film_init_std)
        else:
            self.head = Linear(width, out, rng, f"{name}.head", bound=np.sqrt(1.0 / width))

    @property
    def in_width(self) -> int:
        return self.trunk.layers[0].weight.shape[0]

    def film_params(self, context: Tensor) -> tuple[Tensor, Tensor]:
        """Per-point ``W_x`` of shape ``(P, N_w, 3)`` and ``b_x`` of shape ``(P, N_w)``."""
        if not self.film:
            raise ContractError("film_params on a network built without FiLM")
        out = self.head(self.trunk(context))
        n = self.n_coef
        w = gt.reshape(out[:, : 3 * n], (-1, n, 3))
        return w, out[:, 3 * n:]

    def __call__(self, context: Tensor, d: np.ndarray | None = None) -> Tensor:
        if not self.film:
            return self.head(self.trunk(context))
        w, b = self.film_params(context)
        return film_modulate(w, b, d)

    def parameters(self) -> list[Tensor]:
        return self.trunk.parameters() + self.head.parameters()


def film_modulate(w: Tensor, b: Tensor, d) -> Tensor:
    """Row-wise ``k[i] = sum_j W_x[i, j] d[j] + b_x[i]``."""
    d = gt.as_tensor(d)
    dd = gt.reshape(d, (d.shape[0], 1, 3))
    return gt.reduce(w * dd, "sum", axis=2) + b


class IntegratorNet:
    """``sigmoid(W3 relu(W2 relu(W1 [k; H] + b1) + b2) + b3)``."""

    def __init__(self, in_width, rng, width=128, n_layers=3, name="integrator"):
        widths = [in_width] + [width] * (n_layers - 1) + [3]
        self.mlp = MLP(widths, rng, name, "relu", activate_last=False,
                       last_bound=np.sqrt(1.0 / width))

    @property
    def in_width(self) -> int:
        return self.mlp.layers[0].weight.shape[0]

    def __call__(self, k: Tensor, H: Tensor) -> Tensor:
        return integrate_radiance(self, k, H)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()


def integrate_radiance(net: IntegratorNet, k, H) -> Tensor:
    k, H = gt.as_tensor(k), gt.as_tensor(H)
    if k.shape[-1] + H.shape[-1] != net.in_width:
        raise DimensionError(f"integrator expects width {net.in_width}, got {k.shape[-1]} + {H.shape[-1]}")
    return gt.sigmoid(net.mlp(gt.concat([k, H], axis=-1)))


@dataclass
class AppearanceConfig:
    n_basis: int = 16
    film_width: int = 32
    illum_dim: int = 32
    n_illuminations: int = 1
    use_illumination: bool = True
    posenc_frequencies: int = 2
    trunk_depth: int = 8
    trunk_width: int = 256
    integrator_width: int = 128
    integrator_layers: int = 3
    leaky_alpha: float = 0.01
    film_init_std: float = 1e-2
    trunk_view_input: bool = False
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def to_dict(self) -> dict:
        return asdict(self)


class AppearanceModel:
    """Radiance head for one of the ablation variants."""

    def __init__(self, config: AppearanceConfig, feature_width: int, seed=0):
        self.config = c = config
        self.feature_width = feature_width
        rng = np.random.default_rng(seed)
        self.pe = PosEncConfig(c.posenc_frequencies)
        self.codes = IlluminationCodes(c.n_illuminations, c.illum_dim, rng,
                                       active=c.n_illuminations > 1 and c.use_illumination)
        z_width = c.illum_dim if self.codes.active else 0
        pe3 = self.pe.encoded_size(3)
        self.basis = self.coef = self.integrator = self.head = None

        if c.variant == "no_decomposition":
            self.head = MLP([feature_width + pe3 + z_width] + [c.trunk_width] * c.trunk_depth + [3],
                            rng, "head", "leaky_relu", c.leaky_alpha, activate_last=False,
                            last_bound=np.sqrt(1.0 / c.trunk_width))
            return

        if c.variant == "raw_features":
            basis_width = feature_width
        else:
            self.basis = BasisProjection(feature_width, c.n_basis, rng)
            basis_width = c.n_basis
        view_in_trunk = c.variant == "concat_conditioning" or c.trunk_view_input
        trunk_in = pe3 + basis_width + z_width + (pe3 if view_in_trunk else 0)
        n_coef = 3 * c.n_basis if c.variant == "linear_blend" else c.film_width
        self.coef = CoefficientNet(trunk_in, n_coef, rng, c.trunk_depth, c.trunk_width, c.leaky_alpha,
                                   film=c.variant != "concat_conditioning",
                                   film_init_std=c.film_init_std)
        if c.variant != "linear_blend":
            self.integrator = IntegratorNet(n_coef + basis_width, rng, c.integrator_width,
                                            c.integrator_layers)

    @property
    def variant(self) -> str:
        return self.config.variant

    def parameters(self) -> dict[str, Tensor]:
        parts = []
        for comp in (self.basis, self.coef, self.integrator, self.head, self.codes):
            if comp is not None:
                parts += comp.parameters()
        return {p.name: p for p in parts}

    def basis_of(self, features: Tensor) -> Tensor:
        return features if self.basis is None else self.basis(features)

    def context(self, x_norm, d, H: Tensor, illum) -> Tensor:
        parts = [posenc(x_norm, self.pe.num_frequencies)]
        if self.variant == "concat_conditioning" or self.config.trunk_view_input:
            parts.append(posenc(d, self.pe.num_frequencies))
        z = self.codes(illum) if illum is not None else None
        if z is not None:
            parts.append(z)
        parts.append(H)
        return gt.concat(parts, axis=1)

    def __call__(self, features: Tensor, x_norm, d, illum=None) -> Tensor:
        """RGB in ``(0, 1)`` for ``P`` points: features ``(P, F)``, positions in ``[-1, 1]``, unit ``d``."""
        d = np.asarray(d, dtype=np.float64)
        check_unit(d)
        n = features.shape[0]
        if illum is None and self.codes.active:
            raise ContractError("illumination index required when illumination codes are active")
        if illum is not None:
            illum = np.broadcast_to(np.asarray(illum, dtype=np.int64), (n,))

        if self.variant == "no_decomposition":
            parts = [features, posenc(d, self.pe.num_frequencies)]
            z = self.codes(illum) if illum is not None else None
            if z is not None:
                parts.append(z)
            return gt.sigmoid(self.head(gt.concat(parts, axis=1)))

        H = self.basis_of(features)
        k = self.coef(self.context(x_norm, d, H, illum), d)
        if self.variant == "linear_blend":
            kk = gt.reshape(k, (n, 3, self.config.n_basis))
            return gt.sigmoid(gt.reduce(kk * gt.reshape(H, (n, 1, -1)), "sum", axis=2))
        return self.integrator(k, H)


def check_unit(d: np.ndarray, tol: float = 1e-6) -> None:
    norms = np.linalg.norm(np.atleast_2d(d), axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError("view directions must be unit length")


def coefficients(model: AppearanceModel, x_norm, d, H, illum=None) -> Tensor:
    """Coefficient vector(s) ``k`` for the FiLM-based variants."""
    if model.coef is None:
        raise ContractError(f"variant {model.variant!r} has no coefficient network")
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    check_unit(d)
    H = gt.as_tensor(H)
    if H.ndim == 1:
        H = gt.reshape(H, (1, -1))
    x_norm = np.atleast_2d(x_norm)
    if illum is not None:
        illum = np.broadcast_to(np.asarray(illum, dtype=np.int64), (len(d),))
    return model.coef(model.context(x_norm, d, H, illum), d)
