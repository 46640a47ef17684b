"""Frozen generative priors and the desk-scale GAN trainer.

A prior maps latents z in [-1,1]^K onto the image manifold.  Network priors
come out of :func:`gan_train`; the analytic generators (affine map, ring)
have closed-form Jacobians and anchor the oracle tests.  Priors stay frozen
during recovery: their parameters enter every tape as constants, so no
gradient can ever reach them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import NonFiniteError, Tape, Var
from .nn import Network

GAN_LR = 2e-4
_LOG_GUARD = 1e-7  # discriminator outputs are clamped to [guard, 1-guard] before log


class TrainingDiverged(Exception):
    """A GAN loss went non-finite; partial traces are attached."""

    def __init__(self, message: str, traces: dict):
        super().__init__(message)
        self.traces = traces


@dataclass
class GeneratorPrior:
    net: Network
    params: dict[str, np.ndarray]
    latent_dim: int
    output_shape: tuple[int, ...]


@dataclass
class DiscriminatorPrior:
    net: Network
    params: dict[str, np.ndarray]


@dataclass(frozen=True)
class LinearGenerator:
    """G(z) = A z + b, reshaped onto `output_shape`; Jacobian is exactly A."""

    matrix: np.ndarray   # (M, K)
    offset: np.ndarray   # (M,)
    output_shape: tuple[int, ...]

    @property
    def latent_dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class RingGenerator:
    """One-dimensional latent onto a circle of `radius` in the first two
    ambient coordinates; the rest are zero."""

    radius: float
    ambient: int

    latent_dim = 1

    @property
    def output_shape(self) -> tuple[int, ...]:
        return (self.ambient,)


AnalyticGenerator = Union[LinearGenerator, RingGenerator]
GeneratorLike = Union[GeneratorPrior, LinearGenerator, RingGenerator]


def as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_z(latent_dim: int, count: int, rng) -> np.ndarray:
    """count i.i.d. latents, uniform on [-1, 1]^latent_dim."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return as_rng(rng).uniform(-1.0, 1.0, size=(count, latent_dim))


def mean_init(latent_dim: int, rng, n_samples: int = 1000) -> np.ndarray:
    """Shared starting latent: the average of `n_samples` uniform draws.

    Every observation starts the inversion from this one point, which lands
    near the latent-space centroid and stabilizes early iterations.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return sample_z(latent_dim, n_samples, rng).mean(axis=0)


def generate(prior: GeneratorLike, z, tape: Tape | None = None) -> Var:
    """Differentiable G(z) for a batch of latents [B, K]; params stay frozen."""
    if tape is None:
        tape = Tape()
    zv = z if isinstance(z, Var) else tape.leaf(np.asarray(z, dtype=np.float64))
    if zv.data.ndim != 2:
        raise ad.ShapeError("generate expects z with shape [B, K]")
    if zv.data.shape[1] != prior.latent_dim:
        raise ad.ShapeError(
            f"latent dim mismatch: prior wants {prior.latent_dim}, got {zv.data.shape[1]}")
    if isinstance(prior, LinearGenerator):
        out = ad.matmul(zv, tape.const(prior.matrix.T)) + tape.const(prior.offset)
        return out.reshape((zv.data.shape[0],) + tuple(prior.output_shape))
    if isinstance(prior, RingGenerator):
        angle = zv * np.pi
        x = ad.cos(angle) * prior.radius
        y = ad.sin(angle) * prior.radius
        # embed [cos, sin, 0, ...] into the ambient space via fixed basis rows
        ex = np.zeros((1, prior.ambient)); ex[0, 0] = 1.0
        ey = np.zeros((1, prior.ambient)); ey[0, 1] = 1.0
        return ad.matmul(x, tape.const(ex)) + ad.matmul(y, tape.const(ey))
    pvars = nn.lift_params(tape, prior.params)  # constants: frozen by construction
    return nn.apply_vars(prior.net, pvars, zv)


def generate_images(prior: GeneratorLike, z) -> np.ndarray:
    """Convenience wrapper returning plain arrays."""
    return generate(prior, np.asarray(z, dtype=np.float64)).data


def discriminate(disc: DiscriminatorPrior, x, tape: Tape | None = None) -> Var:
    """Differentiable D(x) in (0,1); parameters frozen."""
    if tape is None:
        tape = Tape()
    xv = x if isinstance(x, Var) else tape.const(np.asarray(x, dtype=np.float64))
    pvars = nn.lift_params(tape, disc.params)
    return nn.apply_vars(disc.net, pvars, xv)


def _guarded_log(p: Var) -> Var:
    return p.clip(_LOG_GUARD, 1.0 - _LOG_GUARD).log()


def gan_train(data: np.ndarray, gen_net: Network, disc_net: Network, steps: int, rng, *,
              latent_dim: int | None = None, batch_size: int = 64,
              lr: float = GAN_LR, d_lr: float | None = None,
              ) -> tuple[GeneratorPrior, DiscriminatorPrior, dict]:
    """Alternating minimax training of the prior on `data` (values in [-1,1]).

    Each step takes one discriminator update on log D(x) + log(1 - D(G(z)))
    and one generator update on log(1 - D(G(z))).  BatchNorm layers run on
    batch statistics here and their running statistics are folded in after
    every step; recovery later uses only the frozen running statistics.
    """
    rng = as_rng(rng)
    if d_lr is None:
        d_lr = lr
    if latent_dim is None:
        latent_dim = gen_net.input_shape[0]
    g_params = nn.init_params(gen_net, rng)
    d_params = nn.init_params(disc_net, rng)
    g_state = nn.rmsprop_init({k: g_params[k] for k in nn.trainable_names(gen_net)})
    d_state = nn.rmsprop_init({k: d_params[k] for k in nn.trainable_names(disc_net)})
    traces = {"d_loss": [], "g_loss": []}

    try:
        for _ in range(steps):
            real = data[rng.integers(0, data.shape[0], size=batch_size)]
            z = sample_z(latent_dim, batch_size, rng)

            # discriminator ascent on log D(x) + log(1 - D(G(z))); real and
            # fake share one forward pass so BatchNorm cannot normalize away
            # the statistics that tell them apart
            tape = Tape()
            dv = nn.lift_params(tape, d_params, trainable=nn.trainable_names(disc_net))
            gv = nn.lift_params(tape, g_params)
            d_stats: dict = {}
            fake = nn.apply_vars(gen_net, gv, tape.const(z), train=True)
            both = np.concatenate([real, fake.data], axis=0)
            p = nn.apply_vars(disc_net, dv, tape.const(both), train=True, batch_stats=d_stats)
            is_real = np.concatenate([np.ones((batch_size, 1)), np.zeros((batch_size, 1))])
            d_gain = (_guarded_log(p) * tape.const(is_real)).sum() / batch_size \
                + (_guarded_log(1.0 - p) * tape.const(1.0 - is_real)).sum() / batch_size
            d_loss = -d_gain
            grads = ad.backward(d_loss)
            d_grads = {k: grads.wrt(dv[k]) for k in nn.trainable_names(disc_net)}
            d_params, d_state = nn.rmsprop_step(d_params, d_grads, d_state, d_lr)
            d_params = nn.update_running_stats(d_params, d_stats)

            # generator descent on log(1 - D(G(z))); D judged through its
            # frozen running statistics so both phases see the same function
            tape = Tape()
            gv = nn.lift_params(tape, g_params, trainable=nn.trainable_names(gen_net))
            dv = nn.lift_params(tape, d_params)
            g_stats: dict = {}
            z = sample_z(latent_dim, batch_size, rng)
            fake = nn.apply_vars(gen_net, gv, tape.const(z), train=True, batch_stats=g_stats)
            p_fake = nn.apply_vars(disc_net, dv, fake, train=False)
            g_loss = _guarded_log(1.0 - p_fake).mean()
            grads = ad.backward(g_loss)
            g_grads = {k: grads.wrt(gv[k]) for k in nn.trainable_names(gen_net)}
            g_params, g_state = nn.rmsprop_step(g_params, g_grads, g_state, lr)
            g_params = nn.update_running_stats(g_params, g_stats)

            traces["d_loss"].append(float(d_loss.data))
            traces["g_loss"].append(float(g_loss.data))
    except NonFiniteError as exc:
        raise TrainingDiverged(f"GAN training diverged: {exc}", traces) from exc

    prior = GeneratorPrior(gen_net, g_params, latent_dim, gen_net.output_shape)
    return prior, DiscriminatorPrior(disc_net, d_params), traces


def discriminator_accuracy(disc: DiscriminatorPrior, real: np.ndarray, fake: np.ndarray) -> float:
    """Fraction of correct real/fake calls at the 0.5 threshold."""
    p_real = discriminate(disc, real).data
    p_fake = discriminate(disc, fake).data
    return float((np.sum(p_real > 0.5) + np.sum(p_fake <= 0.5)) / (p_real.size + p_fake.size))


# ---------------------------------------------------------------------------
# persistence: weight file + JSON sidecar


def save_prior(prior: GeneratorPrior, weights_path, meta_path) -> None:
    nn.save_params(prior.params, weights_path)
    meta = {
        "latent_dim": prior.latent_dim,
        "output_shape": list(prior.output_shape),
        "input_shape": list(prior.net.input_shape),
        "layers": [nn.layer_to_json(l) for l in prior.net.layers],
    }
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_prior(weights_path, meta_path) -> GeneratorPrior:
    with open(meta_path) as f:
        meta = json.load(f)
    net = nn.build_network([nn.layer_from_json(d) for d in meta["layers"]],
                           tuple(meta["input_shape"]))
    return GeneratorPrior(net, nn.load_params(weights_path),
                          int(meta["latent_dim"]), tuple(meta["output_shape"]))


def save_discriminator(disc: DiscriminatorPrior, weights_path, meta_path) -> None:
    nn.save_params(disc.params, weights_path)
    meta = {
        "input_shape": list(disc.net.input_shape),
        "layers": [nn.layer_to_json(l) for l in disc.net.layers],
    }
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_discriminator(weights_path, meta_path) -> DiscriminatorPrior:
    with open(meta_path) as f:
        meta = json.load(f)
    net = nn.build_network([nn.layer_from_json(d) for d in meta["layers"]],
                           tuple(meta["input_shape"]))
    return DiscriminatorPrior(net, nn.load_params(weights_path))


def fit_linear_prior(data: np.ndarray, latent_dim: int) -> LinearGenerator:
    """Affine prior from the top principal components of `data`.

    Column k of the map is scaled so that every training sample projects
    into [-1, 1]^K; G(z) = mean + A z then spans the data's principal
    subspace exactly over the latent box.
    """
    flat = data.reshape(data.shape[0], -1)
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:latent_dim]                      # [K, M]
    coords = centered @ comps.T                  # [N, K]
    scale = np.abs(coords).max(axis=0)
    scale[scale == 0] = 1.0
    return LinearGenerator((comps * scale[:, None]).T, mean, tuple(data.shape[1:]))


# ---------------------------------------------------------------------------
# stock desk-scale architectures (14x14 single channel, latent 100)


def small_image_generator(latent_dim: int = 100, channels: int = 16) -> Network:
    return nn.build_network([
        nn.Dense(latent_dim, 128), nn.ReLU(), nn.BatchNorm(128),
        nn.Dense(128, 7 * 7 * channels), nn.ReLU(), nn.BatchNorm(7 * 7 * channels),
        nn.Reshape((7, 7, channels)),
        nn.ConvTranspose(4, 4, 1, channels, stride=2), nn.Tanh(),
    ], (latent_dim,))


def small_image_discriminator(channels: int = 16) -> Network:
    return nn.build_network([
        nn.Conv(4, 4, 1, channels, stride=2), nn.BatchNorm(channels), nn.LeakyReLU(0.2),
        nn.Reshape((7 * 7 * channels,)),
        nn.Dense(7 * 7 * channels, 64), nn.LeakyReLU(0.2), nn.BatchNorm(64),
        nn.Dense(64, 1), nn.Sigmoid(),
    ], (14, 14, 1))


def point_generator(latent_dim: int = 2, hidden: int = 32) -> Network:
    """2-D toy generator for point clouds."""
    return nn.build_network([
        nn.Dense(latent_dim, hidden), nn.ReLU(),
        nn.Dense(hidden, hidden), nn.ReLU(),
        nn.Dense(hidden, 2), nn.Tanh(),
    ], (latent_dim,))


def point_discriminator(hidden: int = 32) -> Network:
    return nn.build_network([
        nn.Dense(2, hidden), nn.LeakyReLU(0.2),
        nn.Dense(hidden, hidden), nn.LeakyReLU(0.2),
        nn.Dense(hidden, 1), nn.Sigmoid(),
    ], (2,))
