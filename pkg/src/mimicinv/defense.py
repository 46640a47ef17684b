"""Classifier, sign-gradient attacks, and recovery-as-preprocessing defense.

Attacks operate in the [-1, 1] pixel range under an L-infinity budget.  The
universal perturbation follows the published formula nu = sum(X_i - adv_i)/N,
which points AWAY from the adversarial direction; `sign_corrected=True`
flips it.  Either way the attack strength is swept through the scale alpha,
so both conventions are exercised by sweeping alpha over both signs.

The defense never reads labels: it runs blind recovery on the incoming
batch and classifies the recovered images.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import NonFiniteError, Tape, Var
from .priors import DiscriminatorPrior, GeneratorLike, as_rng
from .recovery import RecoveryConfig, SurrogateLike, run_mimic


class TrainingDiverged(Exception):
    """Classifier training produced a non-finite loss."""


@dataclass
class Classifier:
    net: nn.Network
    params: dict[str, np.ndarray]
    classes: int


@dataclass(frozen=True)
class AttackSpec:
    """One attack family: fgsm, bim, or universal."""

    kind: str
    epsilon: float = 0.3
    steps: int = 10               # bim only
    step_size: float = 0.05      # bim only
    alpha: float = 1.0            # universal only
    source_count: int = 15        # universal only
    sign_corrected: bool = False  # universal only

    def __post_init__(self):
        if self.kind not in ("fgsm", "bim", "universal"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.source_count < 1:
            raise ValueError("source_count must be >= 1")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, d: dict) -> "AttackSpec":
        return cls(**d)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax; rows sum to 1 to float64 precision."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def small_image_classifier(size: int = 14, classes: int = 4, channels: int = 8) -> nn.Network:
    half = size // 2
    return nn.build_network([
        nn.Conv(4, 4, 1, channels, stride=2), nn.LeakyReLU(0.2),
        nn.Reshape((half * half * channels,)),
        nn.Dense(half * half * channels, 64), nn.LeakyReLU(0.2),
        nn.Dense(64, classes),
    ], (size, size, 1))


def point_classifier(classes: int = 2, hidden: int = 16) -> nn.Network:
    return nn.build_network([
        nn.Dense(2, hidden), nn.LeakyReLU(0.2),
        nn.Dense(hidden, classes),
    ], (2,))


def _cross_entropy(logits: Var, labels: np.ndarray, classes: int) -> Var:
    """Mean cross-entropy; the max shift is a constant, so the gradient is
    exactly softmax - onehot."""
    tape = logits.tape
    shift = logits - np.max(logits.data, axis=1, keepdims=True)
    lse = shift.exp().sum(axis=1, keepdims=True).log()
    logp = shift - lse
    onehot = np.zeros((labels.shape[0], classes))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return -(logp * tape.const(onehot)).sum() * (1.0 / labels.shape[0])


def train_classifier(data: np.ndarray, labels: np.ndarray, net: nn.Network, steps: int,
                     rng, *, classes: int | None = None, batch_size: int = 64,
                     lr: float = 1e-3) -> tuple[Classifier, list[float]]:
    """RMSProp cross-entropy training; returns the model and an accuracy trace."""
    rng = as_rng(rng)
    labels = np.asarray(labels, dtype=np.int64)
    if classes is None:
        classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError("labels out of range")
    params = nn.init_params(net, rng)
    names = nn.trainable_names(net)
    state = nn.rmsprop_init({k: params[k] for k in names})
    acc_trace: list[float] = []
    try:
        for step in range(steps):
            pick = rng.integers(0, data.shape[0], size=batch_size)
            tape = Tape()
            pv = nn.lift_params(tape, params, trainable=names)
            logits = nn.apply_vars(net, pv, tape.const(data[pick]))
            loss = _cross_entropy(logits, labels[pick], classes)
            grads = ad.backward(loss)
            params, state = nn.rmsprop_step(
                params, {k: grads.wrt(pv[k]) for k in names}, state, lr)
            if (step + 1) % 50 == 0 or step == steps - 1:
                acc_trace.append(accuracy(Classifier(net, params, classes), data, labels))
    except NonFiniteError as exc:
        raise TrainingDiverged(str(exc)) from exc
    return Classifier(net, params, classes), acc_trace


def predict_logits(clf: Classifier, x: np.ndarray) -> np.ndarray:
    return nn.apply(clf.net, clf.params, np.asarray(x, dtype=np.float64))


def predict(clf: Classifier, x: np.ndarray) -> np.ndarray:
    return predict_logits(clf, x).argmax(axis=1)


def accuracy(clf: Classifier, x: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(clf, x) == np.asarray(labels)))


def _input_gradient(clf: Classifier, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy wrt the input batch."""
    tape = Tape()
    xv = tape.leaf(x)
    pv = nn.lift_params(tape, clf.params)
    logits = nn.apply_vars(clf.net, pv, xv)
    loss = _cross_entropy(logits, np.asarray(labels, dtype=np.int64), clf.classes)
    return ad.backward(loss).wrt(xv)


def fgsm(clf: Classifier, x: np.ndarray, labels: np.ndarray, epsilon: float) -> np.ndarray:
    """One signed gradient step, clipped back to [-1, 1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if epsilon == 0:
        return np.asarray(x, dtype=np.float64).copy()
    g = _input_gradient(clf, np.asarray(x, dtype=np.float64), labels)
    return np.clip(x + epsilon * np.sign(g), -1.0, 1.0)


def bim(clf: Classifier, x: np.ndarray, labels: np.ndarray, epsilon: float,
        steps: int = 10, step_size: float | None = None) -> np.ndarray:
    """Iterated FGSM, re-projected onto the epsilon ball and [-1, 1] each step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if step_size is None:
        step_size = epsilon / steps
    adv = x.copy()
    for _ in range(steps):
        g = _input_gradient(clf, adv, labels)
        adv = adv + step_size * np.sign(g)
        adv = np.clip(adv, x - epsilon, x + epsilon)
        adv = np.clip(adv, -1.0, 1.0)
    return adv


def universal_perturbation(clf: Classifier, x: np.ndarray, labels: np.ndarray,
                           epsilon: float, sign_corrected: bool = False) -> np.ndarray:
    """Image-agnostic perturbation: the mean of per-image FGSM displacements,
    nu = sum(X_i - adv_i)/N (or its negation when sign_corrected)."""
    x = np.asarray(x, dtype=np.float64)
    adv = fgsm(clf, x, labels, epsilon)
    nu = (x - adv).mean(axis=0)
    return -nu if sign_corrected else nu


def apply_universal(x: np.ndarray, nu: np.ndarray, alpha: float) -> np.ndarray:
    """Scaled universal attack X + alpha * nu, clipped to [-1, 1]."""
    return np.clip(np.asarray(x, dtype=np.float64) + alpha * nu, -1.0, 1.0)


def clean_and_predict(y: np.ndarray, prior: GeneratorLike,
                      disc: DiscriminatorPrior | None, surrogate: SurrogateLike,
                      config: RecoveryConfig, clf: Classifier) -> np.ndarray:
    """Unsupervised cleanup then classify: recover each batch of observations
    through the prior and label the recovered images.  Never sees labels."""
    y = np.asarray(y, dtype=np.float64)
    out = np.empty(y.shape[0], dtype=np.int64)
    step = config.observations
    for lo in range(0, y.shape[0], step):
        chunk = y[lo:lo + step]
        cfg = replace(config, observations=chunk.shape[0])
        res = run_mimic(chunk, prior, disc, surrogate, cfg)
        out[lo:lo + step] = predict(clf, res.x_hat)
    return out
