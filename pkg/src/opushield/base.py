"""Robust base model: MLP feature extractor + linear classifier.

Stands in for large pretrained robust networks at desk scale. The feature
stack (input -> 256 -> feature_dim, ReLU) is trained with PGD adversarial
training and then frozen; the defended classifier consumes its features as
an opaque vector, exactly as it would consume a convolutional stack.

All gradients are hand-derived; ReLU'(0) := 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidArgumentError, TrainingDivergedError
from .model import loss_and_logit_grad, softmax
from .optim import Adam
from .rng import keyed_generator

__all__ = [
    "BaseNet",
    "AdvTrainConfig",
    "init_base",
    "base_logits",
    "base_loss_grad",
    "adv_train",
    "pgd_robust_accuracy",
    "extract_features",
    "freeze",
    "FrozenFeatureMap",
    "LinearHead",
    "retrain_plain_classifier",
    "head_logits",
]


@dataclass
class BaseNet:
    Wa: np.ndarray  # (hidden, input)
    ba: np.ndarray
    Wb: np.ndarray  # (feature, hidden)
    bb: np.ndarray
    Wc: np.ndarray  # (classes, feature)
    bc: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.Wa.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.Wb.shape[0]

    @property
    def num_classes(self) -> int:
        return self.Wc.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {
            "Wa": self.Wa, "ba": self.ba,
            "Wb": self.Wb, "bb": self.bb,
            "Wc": self.Wc, "bc": self.bc,
        }

    def copy(self) -> "BaseNet":
        return BaseNet(**{k: v.copy() for k, v in self.trainable().items()})


@dataclass
class AdvTrainConfig:
    eps: float = 0.1
    pgd_steps: int = 10
    pgd_step_size: float = 0.025
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise InvalidArgumentError("eps must be >= 0")
        if self.pgd_steps < 1:
            raise InvalidArgumentError("pgd_steps must be >= 1")
        if self.eps > 0 and not (0 < self.pgd_step_size <= self.eps):
            raise InvalidArgumentError("need 0 < pgd_step_size <= eps")


def init_base(input_dim: int, hidden: int, feature_dim: int, classes: int, seed: int) -> BaseNet:
    gen = keyed_generator(seed, 3)
    return BaseNet(
        Wa=gen.standard_normal((hidden, input_dim)) * np.sqrt(2.0 / input_dim),
        ba=np.zeros(hidden),
        Wb=gen.standard_normal((feature_dim, hidden)) * np.sqrt(2.0 / hidden),
        bb=np.zeros(feature_dim),
        Wc=gen.standard_normal((classes, feature_dim)) * np.sqrt(1.0 / feature_dim),
        bc=np.zeros(classes),
    )


def _forward(net: BaseNet, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != net.input_dim:
        raise DimensionError(f"input dim {x.shape[1]} != expected {net.input_dim}")
    z1 = x @ net.Wa.T + net.ba
    r1 = np.maximum(z1, 0.0)
    z2 = r1 @ net.Wb.T + net.bb
    feats = np.maximum(z2, 0.0)
    logits = feats @ net.Wc.T + net.bc
    return x, z1, r1, z2, feats, logits


def base_logits(net: BaseNet, x: np.ndarray) -> np.ndarray:
    return _forward(net, x)[5]


def base_loss_grad(
    net: BaseNet,
    x: np.ndarray,
    y: np.ndarray,
    loss: str = "ce",
    targets: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample loss values, exact input gradients, and the logits."""
    x, z1, r1, z2, feats, logits = _forward(net, x)
    y = np.asarray(y, dtype=np.int64)
    values, g_logits = loss_and_logit_grad(logits, y, loss, targets)
    g_feats = g_logits @ net.Wc
    g_z2 = g_feats * (z2 > 0)
    g_r1 = g_z2 @ net.Wb
    g_z1 = g_r1 * (z1 > 0)
    return values, g_z1 @ net.Wa, logits


def _param_gradients(net: BaseNet, x: np.ndarray, y: np.ndarray):
    """Mean-CE parameter gradients plus the mean loss."""
    x, z1, r1, z2, feats, logits = _forward(net, x)
    n = x.shape[0]
    values, g_logits = loss_and_logit_grad(logits, y, "ce")
    e = g_logits / n
    g_feats = e @ net.Wc
    g_z2 = g_feats * (z2 > 0)
    g_r1 = g_z2 @ net.Wb
    g_z1 = g_r1 * (z1 > 0)
    grads = {
        "Wc": e.T @ feats, "bc": e.sum(axis=0),
        "Wb": g_z2.T @ r1, "bb": g_z2.sum(axis=0),
        "Wa": g_z1.T @ x, "ba": g_z1.sum(axis=0),
    }
    return grads, float(values.mean())


def _pgd_examples(
    net: BaseNet,
    x: np.ndarray,
    y: np.ndarray,
    eps: float,
    steps: int,
    step_size: float,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """Training-time PGD with random start; eps=0 short-circuits to x."""
    if eps == 0.0:
        return x
    if rng is not None:
        x_adv = np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    else:
        x_adv = x.copy()
    for _ in range(steps):
        _, g, _ = base_loss_grad(net, x_adv, y)
        x_adv = x + np.clip(x_adv + step_size * np.sign(g) - x, -eps, eps)
        x_adv = np.clip(x_adv, 0.0, 1.0)
    return x_adv


def adv_train(
    net: BaseNet,
    dataset: tuple[np.ndarray, np.ndarray],
    cfg: AdvTrainConfig,
    on_metrics=None,
) -> BaseNet:
    """PGD adversarial training; eps=0 is exactly natural training."""
    x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise InvalidArgumentError("empty training dataset")
    opt = Adam(lr=cfg.lr)
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    for epoch in range(cfg.epochs):
        perm = keyed_generator(cfg.seed, epoch).permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            bx, by = x[idx], y[idx]
            rng = keyed_generator(cfg.seed, (epoch + 1) * n_batches + b)
            bx_adv = _pgd_examples(
                net, bx, by, cfg.eps, cfg.pgd_steps, cfg.pgd_step_size, rng
            )
            grads, loss = _param_gradients(net, bx_adv, by)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"epoch {epoch}: loss is {loss}")
            opt.step(net.trainable(), grads)
            losses.append(loss * len(idx))
        if on_metrics:
            on_metrics(
                {
                    "epoch": epoch,
                    "split": "train",
                    "loss": float(np.sum(losses) / n),
                    "accuracy": base_accuracy(net, x, y),
                }
            )
    return net


def base_accuracy(net: BaseNet, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(base_logits(net, x), axis=1) == np.asarray(y)))


def pgd_robust_accuracy(
    net: BaseNet,
    x: np.ndarray,
    y: np.ndarray,
    eps: float,
    steps: int = 40,
    step_size: float | None = None,
    seed: int = 0,
) -> float:
    """Accuracy under an evaluation PGD (random start, kept last iterate)."""
    if step_size is None:
        step_size = 2.5 * eps / steps if steps > 0 else eps
    rng = keyed_generator(seed, 4)
    x_adv = _pgd_examples(net, np.asarray(x, dtype=np.float64), y, eps, steps, step_size, rng)
    return base_accuracy(net, x_adv, y)


def extract_features(net: BaseNet, x: np.ndarray) -> np.ndarray:
    """Deterministic map through the two frozen-able feature layers."""
    return _forward(net, x)[4]


class FrozenFeatureMap:
    """Read-only copy of the feature stack: forward plus exact VJP.

    Attacks on the defended model differentiate through this stack exactly
    (it is not obfuscated); only the projection above it is sealed.
    """

    def __init__(self, net: BaseNet):
        self.Wa = net.Wa.copy()
        self.ba = net.ba.copy()
        self.Wb = net.Wb.copy()
        self.bb = net.bb.copy()
        for arr in (self.Wa, self.ba, self.Wb, self.bb):
            arr.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.Wa.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.Wb.shape[0]

    def forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        z1 = x @ self.Wa.T + self.ba
        r1 = np.maximum(z1, 0.0)
        z2 = r1 @ self.Wb.T + self.bb
        feats = np.maximum(z2, 0.0)
        return feats, (z1, z2)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def vjp(self, cache, g_feats: np.ndarray) -> np.ndarray:
        z1, z2 = cache
        g_z2 = g_feats * (z2 > 0)
        g_z1 = (g_z2 @ self.Wb) * (z1 > 0)
        return g_z1 @ self.Wa


def freeze(net: BaseNet) -> FrozenFeatureMap:
    return FrozenFeatureMap(net)


@dataclass
class LinearHead:
    W: np.ndarray  # (classes, feature)
    b: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.W.T + self.b


def head_logits(frozen: FrozenFeatureMap, head: LinearHead, x: np.ndarray) -> np.ndarray:
    return head.logits(frozen(x))


def retrain_plain_classifier(
    frozen: FrozenFeatureMap,
    dataset: tuple[np.ndarray, np.ndarray],
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 0.001,
    seed: int = 0,
) -> LinearHead:
    """Fresh linear classifier over frozen features, natural data only."""
    x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    feats = frozen(x)
    classes = int(y.max()) + 1
    gen = keyed_generator(seed, 5)
    head = LinearHead(
        W=gen.standard_normal((classes, frozen.feature_dim)) / np.sqrt(frozen.feature_dim),
        b=np.zeros(classes),
    )
    opt = Adam(lr=lr)
    for epoch in range(epochs):
        perm = keyed_generator(seed, 100 + epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            bf, by = feats[idx], y[idx]
            logits = head.logits(bf)
            probs = softmax(logits)
            e = probs.copy()
            e[np.arange(len(idx)), by] -= 1.0
            e /= len(idx)
            opt.step(
                {"W": head.W, "b": head.b},
                {"W": e.T @ bf, "b": e.sum(axis=0)},
            )
    return head
