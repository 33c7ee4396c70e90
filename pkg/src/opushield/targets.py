"""Adapters exposing each model as an attack target.

A target provides ``logits(X)`` over raw inputs and
``loss_grad(X, y, loss, targets) -> (values, input_grads, logits)``. The
gradient is exact for the base model and the retrained plain head, and the
relaxed BPDA chain (or a retrieval surrogate) for the defended model.
"""

from __future__ import annotations

import numpy as np

from .base import BaseNet, FrozenFeatureMap, LinearHead, base_logits, base_loss_grad
from .model import (
    AblationFlags,
    ClassifierParams,
    bpda_input_gradient,
    classifier_forward,
    loss_and_logit_grad,
)
from .opu import OpuHandle

__all__ = ["BaseTarget", "DefendedTarget", "HeadTarget", "ConstantTarget"]


class BaseTarget:
    def __init__(self, net: BaseNet):
        self.net = net

    def logits(self, x: np.ndarray) -> np.ndarray:
        return base_logits(self.net, x)

    def loss_grad(self, x, y, loss="ce", targets=None):
        return base_loss_grad(self.net, x, y, loss, targets)


class DefendedTarget:
    """Frozen feature stack + defended classifier head.

    The backward composes the head's BPDA (or retrieval-surrogate) input
    gradient with the exact VJP of the frozen features; only the projection
    inside the head is obfuscated.
    """

    def __init__(
        self,
        frozen: FrozenFeatureMap,
        params: ClassifierParams,
        opu: OpuHandle,
        flags: AblationFlags = AblationFlags(),
        surrogate_matrix: np.ndarray | None = None,
    ):
        self.frozen = frozen
        self.params = params
        self.opu = opu
        self.flags = flags
        self.surrogate_matrix = surrogate_matrix

    def logits(self, x: np.ndarray) -> np.ndarray:
        feats = self.frozen(x)
        return classifier_forward(self.params, self.opu, feats, self.flags).logits

    def loss_grad(self, x, y, loss="ce", targets=None):
        feats, cache = self.frozen.forward_cached(x)
        trace = classifier_forward(self.params, self.opu, feats, self.flags)
        values, _ = loss_and_logit_grad(trace.logits, y, loss, targets)
        g_feats = bpda_input_gradient(
            self.params,
            self.opu,
            trace,
            y,
            loss,
            self.flags,
            targets,
            self.surrogate_matrix,
        )
        return values, self.frozen.vjp(cache, g_feats), trace.logits


class HeadTarget:
    """Frozen features + plain retrained linear head (defense-free row)."""

    def __init__(self, frozen: FrozenFeatureMap, head: LinearHead):
        self.frozen = frozen
        self.head = head

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.head.logits(self.frozen(x))

    def loss_grad(self, x, y, loss="ce", targets=None):
        feats, cache = self.frozen.forward_cached(x)
        logits = self.head.logits(feats)
        values, g_logits = loss_and_logit_grad(logits, y, loss, targets)
        g_feats = g_logits @ self.head.W
        return values, self.frozen.vjp(cache, g_feats), logits


class ConstantTarget:
    """Always predicts one class; zero gradients (test plumbing)."""

    def __init__(self, num_classes: int, winner: int = 0):
        self.num_classes = num_classes
        self.winner = winner

    def logits(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((len(x), self.num_classes))
        out[:, self.winner] = 1.0
        return out

    def loss_grad(self, x, y, loss="ce", targets=None):
        logits = self.logits(x)
        values, _ = loss_and_logit_grad(logits, np.asarray(y, dtype=np.int64), loss, targets)
        return values, np.zeros_like(np.asarray(x, dtype=np.float64)), logits
