"""Defended classifier head: FC layer, binarization, OPU projection, FC readout.

Forward map (full defense):

    probs = softmax(W3 |U sign(W1 x + b1)|^2 + b3)

with sign mapping to {0,1} and sign(0) := 1. The matrix U lives inside the
sealed OPU handle; the backward pass used to attack the model substitutes a
fixed random matrix R for U^T and relaxes sign to tanh (a backward-pass
differentiable approximation). Ablation flags expose the single-component
removals studied by the benchmark harness:

  * binarize=False       — skip sign, feed real activations to a
                           non-quantizing projection (simulation only);
  * square_nonlinearity=False — replace |.|^2 by Re(Ux) (simulation only);
  * obfuscated=False     — the backward uses the true U^H (exact Wirtinger
                           chain) instead of R;
  * train_with_dfa=False — train by backprop instead of feedback alignment
                           (legal only with obfuscated=False).

The simulation-only forward paths need the unsealed matrix and therefore the
test capability; in release mode they raise CapabilityDisabledError.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import opu as opu_mod
from .errors import DimensionError, InvalidArgumentError, StateError
from .rng import keyed_generator

__all__ = [
    "ClassifierParams",
    "AblationFlags",
    "ForwardTrace",
    "init_params",
    "classifier_forward",
    "loss_and_logit_grad",
    "bpda_input_gradient",
    "predict",
    "accuracy",
    "softmax",
]

DENOM_GUARD = 1e-12  # DLR denominator floor for degenerate equal-logit cases


@dataclass(frozen=True)
class AblationFlags:
    binarize: bool = True
    square_nonlinearity: bool = True
    obfuscated: bool = True
    train_with_dfa: bool = True

    def __post_init__(self):
        if not self.train_with_dfa and self.obfuscated:
            raise InvalidArgumentError(
                "backprop training needs the unsealed matrix: "
                "train_with_dfa=False requires obfuscated=False"
            )

    def tag(self) -> str:
        """Stable short form used in report labels."""
        if self == AblationFlags():
            return "full"
        off = [
            name
            for name, on in (
                ("binarize", self.binarize),
                ("square", self.square_nonlinearity),
                ("obfuscation", self.obfuscated),
                ("dfa", self.train_with_dfa),
            )
            if not on
        ]
        return "no-" + "+no-".join(off)


@dataclass
class ClassifierParams:
    """Trainable weights plus the fixed surrogate/feedback matrices.

    R (backward surrogate for U^T) and B (feedback projection of the output
    error) are regenerated from their seeds and never trained or persisted
    as raw arrays.
    """

    W1: np.ndarray  # (opu_in, feature)
    b1: np.ndarray  # (opu_in,)
    W3: np.ndarray  # (classes, opu_out)
    b3: np.ndarray  # (classes,)
    R: np.ndarray  # (opu_in, opu_out), fixed
    B: np.ndarray  # (opu_in, classes), fixed
    r_seed: int
    b_seed: int

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def opu_input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def opu_output_dim(self) -> int:
        return self.W3.shape[1]

    @property
    def num_classes(self) -> int:
        return self.W3.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W3": self.W3, "b3": self.b3}

    def copy(self) -> "ClassifierParams":
        return replace(
            self,
            W1=self.W1.copy(),
            b1=self.b1.copy(),
            W3=self.W3.copy(),
            b3=self.b3.copy(),
        )


@dataclass
class ForwardTrace:
    """Every intermediate stage of one forward evaluation (batched)."""

    x: np.ndarray  # (n, feature)
    a1: np.ndarray  # (n, opu_in) pre-binarization activations
    h: np.ndarray  # (n, opu_in) binary codes (or a1 when binarize is off)
    y_opu: np.ndarray  # (n, opu_out)
    logits: np.ndarray  # (n, classes)
    probs: np.ndarray  # (n, classes)


def fixed_surrogate(opu_input_dim: int, opu_output_dim: int, r_seed: int) -> np.ndarray:
    """Backward surrogate R for U^T, scaled like the true matrix entries."""
    gen = keyed_generator(r_seed, 0)
    return gen.standard_normal((opu_input_dim, opu_output_dim)) / np.sqrt(opu_input_dim)


def fixed_feedback(opu_input_dim: int, num_classes: int, b_seed: int) -> np.ndarray:
    """DFA feedback matrix B; std 1/sqrt(classes) keeps the projected error
    comparable in magnitude to the error itself."""
    gen = keyed_generator(b_seed, 1)
    return gen.standard_normal((opu_input_dim, num_classes)) / np.sqrt(num_classes)


def init_params(
    feature_dim: int,
    opu_input_dim: int,
    opu_output_dim: int,
    num_classes: int,
    init_seed: int,
    r_seed: int,
    b_seed: int,
) -> ClassifierParams:
    gen = keyed_generator(init_seed, 2)
    # sign() is scale-free, so W1's init scale only shapes training: 1/feature
    # keeps pre-binarization activations inside tanh's responsive range for
    # O(1)-scale features.
    W1 = gen.standard_normal((opu_input_dim, feature_dim)) / feature_dim
    W3 = gen.standard_normal((num_classes, opu_output_dim)) / np.sqrt(opu_output_dim)
    return ClassifierParams(
        W1=W1,
        b1=np.zeros(opu_input_dim),
        W3=W3,
        b3=np.zeros(num_classes),
        R=fixed_surrogate(opu_input_dim, opu_output_dim, r_seed),
        B=fixed_feedback(opu_input_dim, num_classes, b_seed),
        r_seed=r_seed,
        b_seed=b_seed,
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise DimensionError(f"expected vector or batch, got ndim={x.ndim}")
    return x, False


def classifier_forward(
    p: ClassifierParams,
    opu: opu_mod.OpuHandle,
    x: np.ndarray,
    flags: AblationFlags = AblationFlags(),
) -> ForwardTrace:
    """Run the (possibly ablated) forward pass and record every stage.

    Single vectors are promoted to a batch of one; all trace fields are
    batched. Ablation paths that bypass the sealed OPU interface
    (binarize=False, square_nonlinearity=False) require the test capability.
    """
    x, _ = _as_batch(x)
    if x.shape[1] != p.feature_dim:
        raise DimensionError(f"feature dim {x.shape[1]} != expected {p.feature_dim}")
    if p.opu_input_dim != opu.input_dim or p.opu_output_dim != opu.output_dim:
        raise DimensionError("classifier params do not match OPU dims")

    a1 = x @ p.W1.T + p.b1
    if flags.binarize:
        h = (a1 >= 0.0).astype(np.float64)  # sign(0) := +1 -> code 1
    else:
        h = a1

    if flags.square_nonlinearity:
        if flags.binarize:
            y_opu = opu.forward(h)
        else:
            # Real-valued activations cannot enter the 1-bit interface; this
            # simulation-only path projects them directly, unquantized.
            U = opu_mod.unseal_for_test(opu).entries
            y_opu = np.abs(h @ U.T) ** 2
    else:
        U = opu_mod.unseal_for_test(opu).entries
        y_opu = (h @ U.T).real

    logits = y_opu @ p.W3.T + p.b3
    probs = softmax(logits)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-9
    return ForwardTrace(x=x, a1=a1, h=h, y_opu=y_opu, logits=logits, probs=probs)


def _descending_order(logits: np.ndarray) -> np.ndarray:
    # Stable tie handling: equal logits keep ascending class order.
    return np.argsort(-logits, axis=1, kind="stable")


def loss_and_logit_grad(
    logits: np.ndarray,
    labels: np.ndarray,
    loss: str = "ce",
    targets: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss values and gradients w.r.t. the logits.

    Supported losses: "ce" (cross-entropy), "dlr" (difference-of-logits
    ratio), "dlr-targeted". Sort indices are treated as constants, and the
    DLR denominator is floored at DENOM_GUARD with its gradient path dropped
    when the floor engages.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(n)

    if loss == "ce":
        zmax = logits.max(axis=1)
        lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
        values = lse - logits[rows, labels]
        grad = softmax(logits)
        grad[rows, labels] -= 1.0
        return values, grad

    if loss == "dlr":
        if c < 3:
            raise InvalidArgumentError("DLR loss needs at least 3 classes; use CE instead")
        order = _descending_order(logits)
        pi1, pi2, pi3 = order[:, 0], order[:, 1], order[:, 2]
        z_y = logits[rows, labels]
        # max over i != y: the top logit unless that is y itself
        top_is_y = pi1 == labels
        j_star = np.where(top_is_y, pi2, pi1)
        num = z_y - logits[rows, j_star]
        d_raw = logits[rows, pi1] - logits[rows, pi3]
        floored = d_raw < DENOM_GUARD
        d = np.where(floored, DENOM_GUARD, d_raw)
        values = -num / d
        grad = np.zeros_like(logits)
        grad[rows, labels] -= 1.0 / d
        grad[rows, j_star] += 1.0 / d
        coef = np.where(floored, 0.0, num / (d * d))
        grad[rows, pi1] += coef
        grad[rows, pi3] -= coef
        return values, grad

    if loss == "dlr-targeted":
        if c < 4:
            raise InvalidArgumentError("targeted DLR needs at least 4 classes")
        if targets is None:
            raise InvalidArgumentError("targeted DLR requires target classes")
        targets = np.asarray(targets, dtype=np.int64)
        order = _descending_order(logits)
        pi1, pi3, pi4 = order[:, 0], order[:, 2], order[:, 3]
        num = logits[rows, labels] - logits[rows, targets]
        d_raw = logits[rows, pi1] - 0.5 * (logits[rows, pi3] + logits[rows, pi4])
        floored = d_raw < DENOM_GUARD
        d = np.where(floored, DENOM_GUARD, d_raw)
        values = -num / d
        grad = np.zeros_like(logits)
        grad[rows, labels] -= 1.0 / d
        grad[rows, targets] += 1.0 / d
        coef = np.where(floored, 0.0, num / (d * d))
        grad[rows, pi1] += coef
        grad[rows, pi3] -= 0.5 * coef
        grad[rows, pi4] -= 0.5 * coef
        return values, grad

    raise InvalidArgumentError(f"unknown loss tag: {loss!r}")


def wirtinger_code_gradient(
    matrix: np.ndarray, h: np.ndarray, g_y: np.ndarray, square: bool = True
) -> np.ndarray:
    """Exact input gradient of |Mh|^2 (or Re(Mh) when square=False).

    Shared by the de-obfuscated backward and the retrieval attack, so the
    two are bit-identical when handed the same matrix.
    """
    if square:
        z = h.astype(np.complex128) @ matrix.T
        return ((2.0 * z * g_y) @ matrix.conj()).real
    return g_y @ matrix.real


def bpda_input_gradient(
    p: ClassifierParams,
    opu: opu_mod.OpuHandle,
    trace: ForwardTrace,
    labels: np.ndarray,
    loss: str = "ce",
    flags: AblationFlags = AblationFlags(),
    targets: np.ndarray | None = None,
    surrogate_matrix: np.ndarray | None = None,
) -> np.ndarray:
    """Input gradient through the relaxed backward chain.

    Obfuscated: the projection backward is R @ (2 sqrt(y) * g_y) — the
    surrogate matrix replaces U^T and the modulus factor is reconstructed
    from the observed outputs. De-obfuscated: exact Wirtinger chain through
    the unsealed U. `surrogate_matrix` overrides U with an attacker-supplied
    reconstruction (retrieval attacks). The sign step always backpropagates
    as tanh'; the 8-bit quantizer is treated as identity.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    _, g_logits = loss_and_logit_grad(trace.logits, labels, loss, targets)
    g_y = g_logits @ p.W3  # (n, opu_out)

    use_exact = (not flags.obfuscated) or surrogate_matrix is not None
    if use_exact:
        matrix = (
            surrogate_matrix
            if surrogate_matrix is not None
            else opu_mod.unseal_for_test(opu).entries
        )
        g_h = wirtinger_code_gradient(matrix, trace.h, g_y, square=flags.square_nonlinearity)
    else:
        if not opu.calibrated:
            raise StateError("BPDA against the production model needs a calibrated OPU")
        if flags.square_nonlinearity:
            g_h = (2.0 * np.sqrt(trace.y_opu) * g_y) @ p.R.T
        else:
            g_h = g_y @ p.R.T

    g_a1 = g_h * (1.0 - np.tanh(trace.a1) ** 2) if flags.binarize else g_h
    return g_a1 @ p.W1  # (n, feature)


def predict(
    p: ClassifierParams,
    opu: opu_mod.OpuHandle,
    x: np.ndarray,
    flags: AblationFlags = AblationFlags(),
) -> np.ndarray:
    """Argmax class per sample; ties resolve to the smaller class index."""
    x, _ = _as_batch(x)
    if x.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    trace = classifier_forward(p, opu, x, flags)
    return np.argmax(trace.probs, axis=1)


def accuracy(
    p: ClassifierParams,
    opu: opu_mod.OpuHandle,
    x: np.ndarray,
    labels: np.ndarray,
    flags: AblationFlags = AblationFlags(),
) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidArgumentError("empty batch")
    return float(np.mean(predict(p, opu, x, flags) == labels))
