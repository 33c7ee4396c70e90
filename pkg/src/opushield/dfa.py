"""Training for the defended classifier head.

The readout W3 sits above the optical projection, so its gradient is exact
and local. W1 sits below the projection, whose parameters are sealed, so it
cannot receive a backpropagated signal; instead the output error e = p - y is
projected straight down through a fixed random matrix B (direct feedback
alignment) and gated by tanh' at the binarization, the same surrogate the
attack backward uses. A backprop trainer over the unsealed matrix is provided
for the no-DFA ablation (requires the test capability and the binarization
removed, since sign has no usable derivative).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import opu as opu_mod
from .errors import (
    CapabilityDisabledError,
    DimensionError,
    InvalidArgumentError,
    TrainingDivergedError,
)
from .model import (
    AblationFlags,
    ClassifierParams,
    ForwardTrace,
    classifier_forward,
    loss_and_logit_grad,
    wirtinger_code_gradient,
)
from .optim import Adam
from .rng import keyed_generator

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    train_biases: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidArgumentError("lr must be > 0")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")

    def make_optimizer(self) -> Adam:
        return Adam(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps_adam)


@dataclass
class TrainResult:
    params: ClassifierParams
    history: list[dict] = field(default_factory=list)
    # per epoch, per step: cosine(raw DFA W1 grad, raw BP W1 grad)
    alignment: list[list[float]] = field(default_factory=list)


def _scaled_error(trace: ForwardTrace, labels: np.ndarray) -> np.ndarray:
    """(probs - onehot)/n — the exact mean-CE gradient at the logits."""
    n = trace.probs.shape[0]
    e = trace.probs.copy()
    e[np.arange(n), labels] -= 1.0
    e /= n
    return e


def dfa_gradients(
    trace: ForwardTrace,
    labels: np.ndarray,
    B: np.ndarray,
    binarize: bool = True,
) -> dict[str, np.ndarray]:
    """Raw DFA gradients for one batch (mean-loss scaling, no optimizer).

    W3/b3 carry their exact gradient; W1/b1 receive the feedback-projected
    error gated by tanh'(a1) when a binarization stage is present.
    """
    e = _scaled_error(trace, labels)
    s = e @ B.T
    if binarize:
        s = s * (1.0 - np.tanh(trace.a1) ** 2)
    return {
        "W3": e.T @ trace.y_opu,
        "b3": e.sum(axis=0),
        "W1": s.T @ trace.x,
        "b1": s.sum(axis=0),
    }


def bp_gradients(
    p: ClassifierParams,
    opu: opu_mod.OpuHandle,
    trace: ForwardTrace,
    labels: np.ndarray,
    binarize: bool = False,
) -> dict[str, np.ndarray]:
    """Exact gradients through the unsealed projection (test capability).

    With binarize=True the sign step is bridged by tanh', which is the
    standard comparator for feedback-alignment diagnostics; with
    binarize=False (the backprop ablation's forward) the chain is exact.
    """
    U = opu_mod.unseal_for_test(opu).entries
    e = _scaled_error(trace, labels)
    g_y = e @ p.W3
    g_h = wirtinger_code_gradient(U, trace.h, g_y, square=True)
    g_a1 = g_h * (1.0 - np.tanh(trace.a1) ** 2) if binarize else g_h
    return {
        "W3": e.T @ trace.y_opu,
        "b3": e.sum(axis=0),
        "W1": g_a1.T @ trace.x,
        "b1": g_a1.sum(axis=0),
    }


def _apply(
    p: ClassifierParams, grads: dict[str, np.ndarray], opt: Adam, train_biases: bool
) -> None:
    if not train_biases:
        grads = {k: v for k, v in grads.items() if not k.startswith("b")}
    opt.step(p.trainable(), grads)
    for name, arr in p.trainable().items():
        if not np.all(np.isfinite(arr)):
            raise TrainingDivergedError(f"parameter {name} became non-finite")


def _batch_loss(trace: ForwardTrace, labels: np.ndarray) -> float:
    values, _ = loss_and_logit_grad(trace.logits, labels, "ce")
    return float(values.mean())


def dfa_step(
    p: ClassifierParams,
    opu: opu_mod.OpuHandle,
    batch: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    flags: AblationFlags = AblationFlags(),
    optimizer: Adam | None = None,
) -> tuple[ClassifierParams, float]:
    """One DFA update on a (features, labels) batch; returns mean CE loss.

    Mutates `p` in place (and the optimizer state when one is threaded
    through by the caller, as `train` does).
    """
    if not flags.train_with_dfa:
        raise InvalidArgumentError("dfa_step called with train_with_dfa=False")
    x, labels = batch
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != labels.shape[0]:
        raise DimensionError("features/labels length mismatch")
    trace = classifier_forward(p, opu, x, flags)
    loss = _batch_loss(trace, labels)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"batch loss is {loss}")
    grads = dfa_gradients(trace, labels, p.B, binarize=flags.binarize)
    _apply(p, grads, optimizer or cfg.make_optimizer(), cfg.train_biases)
    return p, loss


def bp_step(
    p: ClassifierParams,
    opu: opu_mod.OpuHandle,
    batch: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    flags: AblationFlags,
    optimizer: Adam | None = None,
) -> tuple[ClassifierParams, float]:
    """One exact-backprop update (no-DFA ablation; smooth forward only)."""
    if flags.obfuscated:
        raise CapabilityDisabledError("backprop training requires obfuscated=False")
    if flags.train_with_dfa or flags.binarize:
        raise InvalidArgumentError(
            "bp_step needs train_with_dfa=False and binarize=False"
        )
    x, labels = batch
    labels = np.asarray(labels, dtype=np.int64)
    trace = classifier_forward(p, opu, x, flags)
    loss = _batch_loss(trace, labels)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"batch loss is {loss}")
    grads = bp_gradients(p, opu, trace, labels, binarize=False)
    _apply(p, grads, optimizer or cfg.make_optimizer(), cfg.train_biases)
    return p, loss


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.vdot(a, b).real / (na * nb))


def train(
    p: ClassifierParams,
    opu: opu_mod.OpuHandle,
    dataset: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    flags: AblationFlags = AblationFlags(),
    eval_set: tuple[np.ndarray, np.ndarray] | None = None,
    on_metrics=None,
    track_alignment: bool = False,
) -> TrainResult:
    """Epoch/batch loop with seeded shuffling.

    `track_alignment` records, per step, the cosine between the raw DFA W1
    gradient and the raw backprop W1 gradient on the same batch and state
    (needs the test capability; diagnostic only, does not affect training).
    """
    x, labels = dataset
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise InvalidArgumentError("empty training dataset")

    optimizer = cfg.make_optimizer()
    result = TrainResult(params=p)
    step_fn = dfa_step if flags.train_with_dfa else bp_step

    for epoch in range(cfg.epochs):
        perm = keyed_generator(cfg.seed, epoch).permutation(n)
        losses: list[float] = []
        cosines: list[float] = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            bx, by = x[idx], labels[idx]
            if track_alignment and flags.train_with_dfa:
                trace = classifier_forward(p, opu, bx, flags)
                g_dfa = dfa_gradients(trace, by, p.B, binarize=flags.binarize)
                g_bp = bp_gradients(p, opu, trace, by, binarize=flags.binarize)
                cosines.append(_cosine(g_dfa["W1"], g_bp["W1"]))
            _, loss = step_fn(p, opu, (bx, by), cfg, flags, optimizer)
            losses.append(loss * len(idx))
        record = {
            "epoch": epoch,
            "split": "train",
            "loss": float(np.sum(losses) / n),
            "accuracy": _eval_accuracy(p, opu, x, labels, flags),
        }
        result.history.append(record)
        if on_metrics:
            on_metrics(record)
        if eval_set is not None:
            ev = {
                "epoch": epoch,
                "split": "eval",
                "loss": None,
                "accuracy": _eval_accuracy(p, opu, eval_set[0], eval_set[1], flags),
            }
            result.history.append(ev)
            if on_metrics:
                on_metrics(ev)
        if track_alignment:
            result.alignment.append(cosines)

    final_acc = result.history[-1]["accuracy"]
    majority = float(np.bincount(labels).max()) / n
    if flags.train_with_dfa and final_acc <= majority:
        logger.warning(
            "final accuracy %.3f does not beat the majority baseline %.3f",
            final_acc,
            majority,
        )
    return result


def _eval_accuracy(p, opu, x, labels, flags) -> float:
    trace = classifier_forward(p, opu, x, flags)
    return float(np.mean(np.argmax(trace.probs, axis=1) == labels))
