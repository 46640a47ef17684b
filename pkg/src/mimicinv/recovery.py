"""Alternating estimation of a corruption surrogate and latent codes.

Given only corrupted observations and a frozen generative prior, the loop
alternates two phases per outer step: fit the surrogate's parameters so
that surrogate(G(z)) explains the observations, then descend the latents z
under the current surrogate, projecting back into [-1, 1]^K after every
step.  Plain projected gradient descent on the prior is the degenerate
case where the surrogate is frozen to the identity.

The composite objective is

    L = L_obs + lambda_adv * L_adv + lambda_identity * L_identity

with L_obs the L1 mismatch between observations and surrogate predictions,
L_adv the generator-style score sum(log(1 - D(G(z)))), and L_identity a
pull toward surrogate == identity that helps whenever part of the
observation reproduces the clean image.  Both inner phases take RMSProp
steps; optimizer state persists across outer iterations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import NonFiniteError, Tape, Var
from .metrics import batch_psnr
from .priors import (DiscriminatorPrior, GeneratorLike, discriminate,
                     generate, mean_init)

_LOG_GUARD = 1e-7
MAX_SURROGATE_DEPTH = 3  # deeper surrogates overfit and stall the inversion


class ConfigError(Exception):
    """A recovery configuration field is invalid."""


class DivergenceError(Exception):
    """The loss went non-finite; `result` carries the partial traces."""

    def __init__(self, message: str, result: "RecoveryResult"):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# surrogate specification


@dataclass(frozen=True)
class SurrogateSpec:
    """Shallow convolutional corruption model: stacked 5x5 convs, an
    optional learned mask, and an optional gated residual of the raw input."""

    conv_layers: int = 3
    filters: int = 16
    kernel: int = 5
    final_activation: str = "relu"
    mask: bool = True
    input_residual: bool = False

    def validate(self) -> None:
        if not 0 <= self.conv_layers <= MAX_SURROGATE_DEPTH:
            raise ConfigError(f"surrogate.conv_layers: must be in [0, {MAX_SURROGATE_DEPTH}]")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("surrogate.kernel: must be odd and positive")
        if self.final_activation not in ("relu", "tanh"):
            raise ConfigError("surrogate.final_activation: must be 'relu' or 'tanh'")
        if self.filters < 1:
            raise ConfigError("surrogate.filters: must be >= 1")

    def build(self, input_shape: tuple[int, ...], out_channels: int | None = None) -> nn.Network:
        """Network mapping clean images to observations of `out_channels`."""
        self.validate()
        h, w, cin = input_shape
        dims = cin if out_channels is None else out_channels
        layers: list = []
        ch = cin
        for i in range(self.conv_layers):
            last = i == self.conv_layers - 1
            cout = dims if last else self.filters
            layers.append(nn.Conv(self.kernel, self.kernel, ch, cout))
            layers.append(nn.Tanh() if last and self.final_activation == "tanh" else nn.ReLU())
            ch = cout
        if ch != dims:
            raise ConfigError("surrogate: without conv layers, observation channels must match input")
        if self.mask:
            layers.append(nn.MaskMultiply((h, w, dims)))
        if self.input_residual:
            if (h, w, dims) != tuple(input_shape):
                raise ConfigError("surrogate.input_residual: needs observation shape == input shape")
            layers.append(nn.InputResidual((h, w, dims)))
        if not layers:
            raise ConfigError("surrogate: empty (no conv layers, no mask, no residual)")
        return nn.build_network(layers, input_shape)

    def to_json(self) -> dict:
        return {"conv_layers": self.conv_layers, "filters": self.filters,
                "kernel": self.kernel, "final_activation": self.final_activation,
                "mask": self.mask, "input_residual": self.input_residual}

    @classmethod
    def from_json(cls, d: dict) -> "SurrogateSpec":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FrozenSurrogate:
    """Fixed, non-trainable corruption model: identity or an elementwise mask."""

    mask: np.ndarray | None = None

    @staticmethod
    def identity() -> "FrozenSurrogate":
        return FrozenSurrogate(None)


SurrogateLike = Union[SurrogateSpec, FrozenSurrogate]


# ---------------------------------------------------------------------------
# configuration and results


@dataclass
class RecoveryConfig:
    lambda_identity: float = 0.0
    lambda_adv: float = 0.0
    lr_surrogate: float = 1e-3
    lr_latent: float = 1e-3
    outer_steps: int = 50
    surrogate_steps: int = 5
    inversion_steps: int = 10
    observations: int = 25
    clip_lo: float = -1.0
    clip_hi: float = 1.0
    init_samples: int = 1000
    seed: int = 0

    def validate(self, frozen_surrogate: bool = False) -> None:
        if self.lambda_identity < 0:
            raise ConfigError("lambda_identity: must be >= 0")
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv: must be >= 0")
        if self.lr_surrogate <= 0:
            raise ConfigError("lr_surrogate: must be > 0")
        if self.lr_latent <= 0:
            raise ConfigError("lr_latent: must be > 0")
        if self.outer_steps < 1:
            raise ConfigError("outer_steps: must be >= 1")
        if self.inversion_steps < 1:
            raise ConfigError("inversion_steps: must be >= 1")
        if self.surrogate_steps < 1 and not frozen_surrogate:
            raise ConfigError("surrogate_steps: must be >= 1 unless the surrogate is frozen")
        if self.surrogate_steps < 0:
            raise ConfigError("surrogate_steps: must be >= 0")
        if self.observations < 1:
            raise ConfigError("observations: must be >= 1")
        if not self.clip_lo < self.clip_hi:
            raise ConfigError("clip_lo/clip_hi: empty interval")
        if self.init_samples < 1:
            raise ConfigError("init_samples: must be >= 1")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, d: dict) -> "RecoveryConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown recovery field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class RecoveryResult:
    z_hat: np.ndarray                       # [N, K]
    x_hat: np.ndarray                       # [N, ...] = G(z_hat)
    surrogate_params: dict | None           # None when the surrogate was frozen
    traces: list[dict]                      # one row per outer step
    initial_losses: dict                    # losses before the first update
    z_trace: list[np.ndarray] = field(default_factory=list)
    psnr: list[float] | None = None

    def trace_rows(self) -> list[dict]:
        """Initial losses at t=0 followed by one row per outer step."""
        rows = [{"t": 0, **self.initial_losses}]
        rows += [{"t": t + 1, **r} for t, r in enumerate(self.traces)]
        return rows


TRACE_COLUMNS = ("t", "loss_obs", "loss_adv", "loss_identity", "total")


# ---------------------------------------------------------------------------
# losses (standalone forms used by tests and by the engine's trace rows)


def project_z(z: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Clamp latents back onto the box; idempotent."""
    return np.clip(z, lo, hi)


def _l1(a: Var, b) -> Var:
    return abs(a - b).sum()


def loss_obs(y_obs: np.ndarray, surrogate_fn: Callable[[Var], Var],
             prior: GeneratorLike, z: np.ndarray) -> float:
    """Sum over observations of the L1 mismatch |Y - surrogate(G(z))|."""
    tape = Tape()
    pred = surrogate_fn(generate(prior, tape.const(z), tape))
    if pred.data.shape != y_obs.shape:
        raise ad.ShapeError(f"prediction {pred.data.shape} vs observations {y_obs.shape}")
    return float(_l1(pred, y_obs).data)


def loss_adv(disc: DiscriminatorPrior, prior: GeneratorLike, z: np.ndarray) -> float:
    """Generator-style realism score: sum(log(1 - D(G(z))))."""
    tape = Tape()
    p = discriminate(disc, generate(prior, tape.const(z), tape), tape)
    return float(_guard_log_one_minus(p).sum().data)


def loss_identity(y_obs: np.ndarray, surrogate_fn: Callable[[Var], Var],
                  prior: GeneratorLike, z: np.ndarray) -> float:
    """Identity pull: sum |Y - G(z)| + |surrogate(G(z)) - G(z)| (both L1)."""
    tape = Tape()
    x = generate(prior, tape.const(z), tape)
    if x.data.shape != y_obs.shape:
        raise ad.ShapeError(f"images {x.data.shape} vs observations {y_obs.shape}")
    pred = surrogate_fn(x)
    return float((_l1(x, y_obs) + _l1(pred, x)).data)


def total_loss(y_obs: np.ndarray, surrogate_fn: Callable[[Var], Var],
               prior: GeneratorLike, disc: DiscriminatorPrior | None,
               z: np.ndarray, config: RecoveryConfig) -> float:
    total = loss_obs(y_obs, surrogate_fn, prior, z)
    if config.lambda_adv > 0:
        if disc is None:
            raise ConfigError("lambda_adv > 0 requires a discriminator")
        total += config.lambda_adv * loss_adv(disc, prior, z)
    if config.lambda_identity > 0:
        total += config.lambda_identity * loss_identity(y_obs, surrogate_fn, prior, z)
    return total


def identity_fn(x: Var) -> Var:
    return x


def _guard_log_one_minus(p: Var) -> Var:
    return (1.0 - p).clip(_LOG_GUARD, 1.0 - _LOG_GUARD).log()


# ---------------------------------------------------------------------------
# the engine


class _Surrogate:
    """Runtime surrogate: trainable network or frozen op, one interface."""

    def __init__(self, surrogate: SurrogateLike, image_shape: tuple[int, ...],
                 obs_shape: tuple[int, ...], rng: np.random.Generator):
        self.trainable = isinstance(surrogate, SurrogateSpec)
        if self.trainable:
            self.net = surrogate.build(image_shape, out_channels=obs_shape[-1])
            if self.net.output_shape != tuple(obs_shape):
                raise ConfigError(
                    f"surrogate output {self.net.output_shape} != observation shape {tuple(obs_shape)}")
            self.params = nn.init_params(self.net, rng)
            self.trainable_names = nn.trainable_names(self.net)
        else:
            if surrogate.mask is not None and tuple(surrogate.mask.shape) != tuple(obs_shape):
                raise ConfigError(
                    f"frozen mask shape {surrogate.mask.shape} != observation shape {tuple(obs_shape)}")
            self.frozen_mask = surrogate.mask
            self.params = None

    def apply(self, tape: Tape, x: Var, train: bool) -> Var:
        if self.trainable:
            pv = nn.lift_params(tape, self.params, self.trainable_names if train else ())
            if train:
                self._pvars = pv
            return nn.apply_vars(self.net, pv, x)
        if self.frozen_mask is None:
            return x
        return x * tape.const(self.frozen_mask)

    def grads(self, grads: ad.Grads) -> dict[str, np.ndarray]:
        return {k: grads.wrt(self._pvars[k]) for k in self.trainable_names}

    def fn(self) -> Callable[[Var], Var]:
        """Closure over the current parameters, for the standalone losses."""
        return lambda x: self.apply(x.tape, x, train=False)


def run_mimic(y_obs: np.ndarray, prior: GeneratorLike,
              disc: DiscriminatorPrior | None, surrogate: SurrogateLike,
              config: RecoveryConfig, ground_truth: np.ndarray | None = None,
              ) -> RecoveryResult:
    """Blind recovery by alternating surrogate fitting and latent inversion.

    `y_obs` is [N, ...]; the prior and discriminator stay frozen
    throughout.  Returns latents, recovered images G(z), the fitted
    surrogate parameters, per-outer-step loss traces and (when
    `ground_truth` is given) per-image PSNR.
    """
    y_obs = np.asarray(y_obs, dtype=np.float64)
    frozen = isinstance(surrogate, FrozenSurrogate)
    config.validate(frozen_surrogate=frozen)
    n = y_obs.shape[0]
    if n != config.observations:
        raise ConfigError(f"observations: config says {config.observations}, got {n} rows")
    if n == 1:
        warnings.warn("single-observation recovery degenerates toward memorization",
                      stacklevel=2)
    if config.lambda_adv > 0 and disc is None:
        raise ConfigError("lambda_adv: > 0 requires a discriminator")

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(seeds[0])
    surr_rng = np.random.default_rng(seeds[1])

    k = prior.latent_dim
    z0 = mean_init(k, init_rng, config.init_samples)
    z = np.tile(z0, (n, 1))
    image_shape = tuple(prior.output_shape)
    surr = _Surrogate(surrogate, image_shape, y_obs.shape[1:], surr_rng)
    identity_ok = image_shape == tuple(y_obs.shape[1:])
    if config.lambda_identity > 0 and not identity_ok:
        raise ConfigError("lambda_identity: > 0 needs observation shape == image shape")

    surr_state = (nn.rmsprop_init({name: surr.params[name] for name in surr.trainable_names})
                  if surr.trainable else None)
    z_acc = np.zeros_like(z)

    def eval_losses(z_now: np.ndarray) -> dict:
        tape = Tape()
        x = generate(prior, tape.const(z_now), tape)
        pred = surr.apply(tape, x, train=False)
        l_obs = float(_l1(pred, y_obs).data)
        l_adv = (float(_guard_log_one_minus(discriminate(disc, x, tape)).sum().data)
                 if disc is not None else 0.0)
        l_id = (float((_l1(x, y_obs) + _l1(pred, x)).data) if identity_ok else 0.0)
        total = l_obs + config.lambda_adv * l_adv + config.lambda_identity * l_id
        return {"loss_obs": l_obs, "loss_adv": l_adv, "loss_identity": l_id, "total": total}

    traces: list[dict] = []
    z_trace = [z.copy()]
    initial = eval_losses(z)

    def partial() -> RecoveryResult:
        return RecoveryResult(z, generate(prior, z).data, surr.params, traces,
                              initial, z_trace, None)

    try:
        for _ in range(config.outer_steps):
            if surr.trainable and config.surrogate_steps > 0:
                x_now = generate(prior, z).data  # z is fixed in this phase
                for _ in range(config.surrogate_steps):
                    tape = Tape()
                    pred = surr.apply(tape, tape.const(x_now), train=True)
                    loss = _l1(pred, y_obs)
                    if config.lambda_identity > 0:
                        loss = loss + config.lambda_identity * _l1(pred, x_now)
                    grads = surr.grads(ad.backward(loss))
                    surr.params, surr_state = nn.rmsprop_step(
                        surr.params, grads, surr_state, config.lr_surrogate)

            for _ in range(config.inversion_steps):
                tape = Tape()
                zv = tape.leaf(z)
                x = generate(prior, zv, tape)
                pred = surr.apply(tape, x, train=False)
                loss = _l1(pred, y_obs)
                if config.lambda_adv > 0:
                    loss = loss + config.lambda_adv * _guard_log_one_minus(
                        discriminate(disc, x, tape)).sum()
                if config.lambda_identity > 0:
                    loss = loss + config.lambda_identity * (_l1(x, y_obs) + _l1(pred, x))
                dz = ad.backward(loss).wrt(zv)
                z, z_acc = nn.rmsprop_update(z, dz, z_acc, 0.9, 1e-8, config.lr_latent)
                z = project_z(z, config.clip_lo, config.clip_hi)

            traces.append(eval_losses(z))
            z_trace.append(z.copy())
    except NonFiniteError as exc:
        raise DivergenceError(f"recovery diverged: {exc}", partial()) from exc

    x_hat = generate(prior, z).data
    scores = batch_psnr(np.asarray(ground_truth, dtype=np.float64), x_hat) \
        if ground_truth is not None else None
    return RecoveryResult(z, x_hat, surr.params, traces, initial, z_trace, scores)


def run_pgd(y_obs: np.ndarray, prior: GeneratorLike,
            disc: DiscriminatorPrior | None, config: RecoveryConfig,
            ground_truth: np.ndarray | None = None) -> RecoveryResult:
    """Projected gradient descent on the prior alone: the identity-surrogate
    special case (no surrogate updates, no identity loss).  With
    lambda_adv = 1e-3 this is the adversarial-loss flavor of the baseline."""
    cfg = replace(config, lambda_identity=0.0, surrogate_steps=0)
    return run_mimic(y_obs, prior, disc, FrozenSurrogate.identity(), cfg, ground_truth)


COWBOY_LAMBDA_ADV = 1e-3


def run_cowboy(y_obs: np.ndarray, prior: GeneratorLike, disc: DiscriminatorPrior,
               config: RecoveryConfig, ground_truth: np.ndarray | None = None) -> RecoveryResult:
    """PGD baseline plus the adversarial loss at its published weight."""
    if disc is None:
        raise ConfigError("cowboy baseline requires a discriminator")
    return run_pgd(y_obs, prior, disc, replace(config, lambda_adv=COWBOY_LAMBDA_ADV),
                   ground_truth)
