"""Evaluation attack suite: FGSM, PGD, APGD-CE/-T, Square, and the cascade.

Attacks are generic over a target object:

  * white-box attacks need ``logits(X)`` and
    ``loss_grad(X, y, loss, targets) -> (values, input_grads, logits)``;
  * the Square attack accepts an object exposing ``logits(X)`` only — it is
    handed a stripped wrapper so a gradient method cannot even be reached.

Every attack returns inputs inside the L-inf ball of radius eps intersected
with the [0,1] box, for failed samples too. Randomness comes from Philox
streams keyed on (seed, sample id), so results do not depend on batch
composition of the surviving set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError
from .model import loss_and_logit_grad
from .rng import keyed_generator, mix_seed

__all__ = [
    "AttackConfig",
    "AttackOutcome",
    "LogitsOnly",
    "fgsm",
    "pgd",
    "apgd",
    "apgd_targeted",
    "square_attack",
    "auto_cascade",
    "CascadeResult",
    "transfer_attack",
]

SQUARE_HALVING_POINTS = (10, 50, 200, 1000, 2000, 4000, 6000, 8000)  # per 10^4 iters


@dataclass
class AttackConfig:
    eps: float
    n_iter: int = 100
    norm: str = "linf"
    n_restarts: int = 1
    seed: int = 0
    pgd_step_size: float | None = None  # default eps/4
    apgd_momentum: float = 0.75
    apgd_rho: float = 0.75
    n_target_classes: int = 9
    square_p_init: float = 0.8
    square_n_iter: int | None = None  # default n_iter

    def __post_init__(self):
        if self.norm != "linf":
            raise InvalidArgumentError(f"unsupported norm {self.norm!r} (l2 reserved)")
        if self.eps <= 0:
            raise InvalidArgumentError("eps must be > 0")
        if self.n_iter < 0:
            raise InvalidArgumentError("n_iter must be >= 0")
        if self.n_restarts < 1:
            raise InvalidArgumentError("n_restarts must be >= 1")


@dataclass
class AttackOutcome:
    x_adv: np.ndarray  # (n, d), always inside ball and box
    success: np.ndarray  # (n,) bool, misclassified after attack
    iterations: np.ndarray  # (n,) iterations/queries consumed
    final_loss: np.ndarray  # (n,) objective at the returned point


class LogitsOnly:
    """Black-box view of a target: the prediction surface and nothing else."""

    def __init__(self, target):
        self._logits = target.logits

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._logits(x)


def _project(x0: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def _random_start(x: np.ndarray, eps: float, seed: int, sample_ids: np.ndarray) -> np.ndarray:
    start = np.empty_like(x)
    for i, sid in enumerate(sample_ids):
        start[i] = x[i] + keyed_generator(seed, int(sid)).uniform(-eps, eps, size=x.shape[1])
    return np.clip(start, 0.0, 1.0)


def _loss_values(logits: np.ndarray, y: np.ndarray, loss: str, targets=None) -> np.ndarray:
    return loss_and_logit_grad(logits, y, loss, targets)[0]


def fgsm(model, x: np.ndarray, y: np.ndarray, eps: float) -> AttackOutcome:
    """Single sign-gradient step on cross-entropy."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _, g, _ = model.loss_grad(x, y, "ce", None)
    x_adv = np.clip(x + eps * np.sign(g), 0.0, 1.0)
    logits = model.logits(x_adv)
    return AttackOutcome(
        x_adv=x_adv,
        success=np.argmax(logits, axis=1) != y,
        iterations=np.ones(len(x), dtype=np.int64),
        final_loss=_loss_values(logits, y, "ce"),
    )


def pgd(
    model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    sample_ids: np.ndarray | None = None,
) -> AttackOutcome:
    """Projected sign-gradient ascent on cross-entropy.

    Restart 0 starts at the clean point; further restarts start uniformly in
    the ball. Each restart's candidate is its final iterate; the kept result
    per sample is a misclassifying candidate if one exists, else the
    candidate with the highest loss.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if sample_ids is None:
        sample_ids = np.arange(n)
    step = cfg.pgd_step_size if cfg.pgd_step_size is not None else cfg.eps / 4.0

    best_x = x.copy()
    best_loss = np.full(n, -np.inf)
    best_success = np.zeros(n, dtype=bool)
    for r in range(cfg.n_restarts):
        if r == 0:
            x_adv = x.copy()
        else:
            x_adv = _random_start(x, cfg.eps, mix_seed(cfg.seed, r), sample_ids)
        for _ in range(cfg.n_iter):
            _, g, _ = model.loss_grad(x_adv, y, "ce", None)
            x_adv = x + np.clip(x_adv + step * np.sign(g) - x, -cfg.eps, cfg.eps)
            x_adv = np.clip(x_adv, 0.0, 1.0)
        logits = model.logits(x_adv)
        loss = _loss_values(logits, y, "ce")
        success = np.argmax(logits, axis=1) != y
        better = (success & ~best_success) | ((success == best_success) & (loss > best_loss))
        best_x[better] = x_adv[better]
        best_loss[better] = loss[better]
        best_success |= success
    return AttackOutcome(
        x_adv=best_x,
        success=best_success,
        iterations=np.full(n, cfg.n_iter * cfg.n_restarts, dtype=np.int64),
        final_loss=best_loss,
    )


def _apgd_single_run(
    model, x, y, cfg: AttackConfig, loss: str, targets, x_init, trend_model
):
    """One APGD run: momentum sign steps with loss-trend step halving.

    At checkpoints (first after ceil(0.22 n) iterations, gaps shrinking by
    0.03 n down to 0.06 n) the step is halved per sample when either the
    fraction of loss-improving iterations since the previous checkpoint is
    below rho, or the step was not halved last time and the best loss has
    not improved; after halving the iterate restarts from the best point.
    """
    n, d = x.shape
    n_iter = cfg.n_iter
    alpha = cfg.apgd_momentum

    x_adv = x_init.copy()
    loss_vals, grad, logits = model.loss_grad(x_adv, y, loss, targets)
    track_vals = (
        _loss_values(trend_model.logits(x_adv), y, "ce") if trend_model else loss_vals
    )
    x_best = x_adv.copy()
    loss_best = loss_vals.copy()
    grad_best = grad.copy()
    success = np.argmax(logits, axis=1) != y
    x_succ = np.where(success[:, None], x_adv, x)
    first_iter = np.where(success, 0, n_iter).astype(np.int64)

    # loss_hist[t+1] = trend loss after iteration t; slot 0 is the start point
    loss_hist = np.zeros((n_iter + 1, n))
    loss_hist[0] = track_vals
    step = np.full((n, 1), 2.0 * cfg.eps)
    x_prev = x_adv.copy()
    gap = max(int(math.ceil(0.22 * n_iter)), 1)
    min_gap = max(int(0.06 * n_iter), 1)
    gap_decr = max(int(0.03 * n_iter), 1)
    since_checkpoint = 0
    last_checkpoint = 0
    halved_last = np.ones(n, dtype=bool)  # first window: only the trend condition
    best_at_last_check = loss_best.copy()

    for i in range(n_iter):
        momentum = x_adv - x_prev
        x_prev = x_adv.copy()
        a = alpha if i > 0 else 1.0
        z = _project(x, x_adv + step * np.sign(grad), cfg.eps)
        x_adv = _project(x, x_adv + a * (z - x_adv) + (1.0 - a) * momentum, cfg.eps)

        loss_vals, grad, logits = model.loss_grad(x_adv, y, loss, targets)
        track_vals = (
            _loss_values(trend_model.logits(x_adv), y, "ce") if trend_model else loss_vals
        )
        loss_hist[i + 1] = track_vals

        newly = (np.argmax(logits, axis=1) != y) & ~success
        x_succ[newly] = x_adv[newly]
        first_iter[newly] = i + 1
        success |= newly

        improved = loss_vals > loss_best
        x_best[improved] = x_adv[improved]
        grad_best[improved] = grad[improved]
        loss_best[improved] = loss_vals[improved]

        since_checkpoint += 1
        if since_checkpoint == gap and i + 1 < n_iter:
            window = loss_hist[last_checkpoint + 1 : i + 2]
            prev = loss_hist[last_checkpoint : i + 1]
            improving = (window > prev).sum(axis=0)
            cond_trend = improving < cfg.apgd_rho * gap
            cond_stall = (~halved_last) & (loss_best <= best_at_last_check)
            halve = cond_trend | cond_stall
            step[halve] /= 2.0
            x_adv[halve] = x_best[halve]
            grad[halve] = grad_best[halve]
            x_prev[halve] = x_adv[halve]
            halved_last = halve
            best_at_last_check = loss_best.copy()
            last_checkpoint = i + 1
            since_checkpoint = 0
            gap = max(gap - gap_decr, min_gap)

    return x_best, loss_best, success, x_succ, first_iter


def apgd(
    model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    loss: str = "ce",
    targets: np.ndarray | None = None,
    sample_ids: np.ndarray | None = None,
    trend_model=None,
) -> AttackOutcome:
    """Auto-scheduled PGD. Returns a misclassifying iterate per sample when
    one was found, else the best-loss iterate."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        return AttackOutcome(
            x_adv=x.copy(),
            success=np.zeros(0, dtype=bool),
            iterations=np.zeros(0, dtype=np.int64),
            final_loss=np.zeros(0),
        )
    if sample_ids is None:
        sample_ids = np.arange(n)
    if loss not in ("ce", "dlr", "dlr-targeted"):
        raise InvalidArgumentError(f"unsupported APGD loss {loss!r}")

    out_x = x.copy()
    out_loss = np.full(n, -np.inf)
    out_success = np.zeros(n, dtype=bool)
    out_iter = np.full(n, cfg.n_iter, dtype=np.int64)
    for r in range(cfg.n_restarts):
        if r == 0:
            x_init = x.copy()
        else:
            x_init = _random_start(x, cfg.eps, mix_seed(cfg.seed, r), sample_ids)
        x_best, loss_best, success, x_succ, first_iter = _apgd_single_run(
            model, x, y, cfg, loss, targets, x_init, trend_model
        )
        cand_x = np.where(success[:, None], x_succ, x_best)
        better = (success & ~out_success) | ((success == out_success) & (loss_best > out_loss))
        out_x[better] = cand_x[better]
        out_loss[better] = loss_best[better]
        out_iter[better] = first_iter[better]
        out_success |= success
    return AttackOutcome(
        x_adv=out_x, success=out_success, iterations=out_iter, final_loss=out_loss
    )


def apgd_targeted(
    model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    sample_ids: np.ndarray | None = None,
) -> AttackOutcome:
    """APGD on the targeted DLR loss over the top-K most-likely wrong classes.

    K = min(n_target_classes, classes - 1); each target gets the full
    iteration budget; the first success per sample wins. Samples no target
    breaks keep their clean point.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if sample_ids is None:
        sample_ids = np.arange(n)
    clean_logits = model.logits(x)
    classes = clean_logits.shape[1]
    if classes < 4:
        raise InvalidArgumentError("targeted DLR needs at least 4 classes")
    order = np.argsort(-clean_logits, axis=1, kind="stable")
    k = min(cfg.n_target_classes, classes - 1)

    out_x = x.copy()
    out_success = np.zeros(n, dtype=bool)
    out_iter = np.zeros(n, dtype=np.int64)
    out_loss = _loss_values(clean_logits, y, "ce")
    for rank in range(1, k + 1):
        active = ~out_success
        if not active.any():
            break
        targets = order[active, rank]
        sub_cfg = replace(cfg, seed=mix_seed(cfg.seed, rank))
        res = apgd(
            model,
            x[active],
            y[active],
            sub_cfg,
            loss="dlr-targeted",
            targets=targets,
            sample_ids=sample_ids[active],
        )
        idx = np.flatnonzero(active)
        hit = idx[res.success]
        out_x[hit] = res.x_adv[res.success]
        out_iter[idx] += res.iterations
        out_loss[hit] = res.final_loss[res.success]
        out_success[hit] = True
    return AttackOutcome(
        x_adv=out_x, success=out_success, iterations=out_iter, final_loss=out_loss
    )


def _square_patch_fraction(p_init: float, it: int, n_iter: int) -> float:
    scaled = 10000 * it / max(n_iter, 1)
    halvings = sum(scaled > t for t in SQUARE_HALVING_POINTS)
    return p_init / (2.0**halvings)


def _margin(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    rows = np.arange(len(y))
    z_y = logits[rows, y]
    masked = logits.copy()
    masked[rows, y] = -np.inf
    return z_y - masked.max(axis=1)


def square_attack(
    model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    sample_ids: np.ndarray | None = None,
) -> AttackOutcome:
    """Gradient-free random search over square patches (L-inf).

    The model surface is logits-only (enforced by wrapping). Candidates set
    the perturbation on a random square (or a contiguous window when the
    input is not a square image) to +/-eps and are kept only when they
    strictly decrease the margin z_y - max_{i != y} z_i, so the recorded
    objective per sample never increases; init proposes stripe noise under
    the same accept rule.
    """
    box = LogitsOnly(model)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    if sample_ids is None:
        sample_ids = np.arange(n)
    n_iter = cfg.square_n_iter if cfg.square_n_iter is not None else cfg.n_iter
    eps = cfg.eps
    side = math.isqrt(d)
    is_image = side * side == d

    margins = _margin(box.logits(x), y)
    x_adv = x.copy()
    queries = np.ones(n, dtype=np.int64)
    rngs = [keyed_generator(mix_seed(cfg.seed, 17), int(sid)) for sid in sample_ids]

    def propose(i: int, it: int) -> np.ndarray:
        rng = rngs[i]
        delta = (x_adv[i] - x[i]).copy()
        if it < 0:  # stripe init
            if is_image:
                stripes = rng.choice([-eps, eps], size=side)
                delta = np.tile(stripes, (side, 1)).ravel()
            else:
                delta = rng.choice([-eps, eps], size=d)
        else:
            p = _square_patch_fraction(cfg.square_p_init, it, n_iter)
            if is_image:
                s = int(round(math.sqrt(p * d)))
                s = min(max(s, 1), side)
                r0 = int(rng.integers(0, side - s + 1))
                c0 = int(rng.integers(0, side - s + 1))
                val = float(rng.choice([-eps, eps]))
                patch = delta.reshape(side, side)
                patch[r0 : r0 + s, c0 : c0 + s] = val
                delta = patch.ravel()
            else:
                w = min(max(int(round(p * d)), 1), d)
                c0 = int(rng.integers(0, d - w + 1))
                val = float(rng.choice([-eps, eps]))
                delta[c0 : c0 + w] = val
        return np.clip(x[i] + delta, 0.0, 1.0)

    for it in range(-1, n_iter):
        if n_iter == 0:
            break
        active = np.flatnonzero(margins >= 0)
        if active.size == 0:
            break
        candidates = np.stack([propose(i, it) for i in active])
        cand_margins = _margin(box.logits(candidates), y[active])
        queries[active] += 1
        accept = cand_margins < margins[active]
        acc_idx = active[accept]
        x_adv[acc_idx] = candidates[accept]
        margins[acc_idx] = cand_margins[accept]

    logits = box.logits(x_adv)
    return AttackOutcome(
        x_adv=x_adv,
        success=np.argmax(logits, axis=1) != y,
        iterations=queries,
        final_loss=margins,
    )


@dataclass
class StageRecord:
    name: str
    attempted: int
    successes: int


@dataclass
class CascadeResult:
    x_adv: np.ndarray
    success: np.ndarray  # broken at any stage (incl. clean misclassification)
    robust_accuracy: float
    stages: list[StageRecord] = field(default_factory=list)
    per_sample: list[dict] = field(default_factory=list)


def auto_cascade(
    model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    stages: tuple[str, ...] = ("apgd-ce", "apgd-t", "square"),
    removal_model=None,
    trend_model=None,
) -> CascadeResult:
    """Sequential ensemble: each stage attacks only the samples every earlier
    stage failed on. Clean misclassifications count as stage-0 successes.

    `removal_model` (optional) decides survival instead of the attacked
    model; `trend_model` (optional) drives the APGD step schedule. Neither
    changes the attacked model's gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise InvalidArgumentError("empty evaluation batch")
    decider = removal_model if removal_model is not None else model
    sample_ids = np.arange(n)

    x_adv = x.copy()
    broken = np.argmax(decider.logits(x), axis=1) != y
    records = [StageRecord("clean", n, int(broken.sum()))]
    per_sample = [
        {"stage": "clean", "sample_id": int(i), "success": bool(broken[i])}
        for i in np.flatnonzero(broken)
    ]

    for si, stage in enumerate(stages):
        active = np.flatnonzero(~broken)
        if active.size == 0:
            records.append(StageRecord(stage, 0, 0))
            continue
        sub_cfg = replace(cfg, seed=mix_seed(cfg.seed, 101 + si))
        xs, ys, ids = x[active], y[active], sample_ids[active]
        if stage == "apgd-ce":
            res = apgd(model, xs, ys, sub_cfg, loss="ce", sample_ids=ids, trend_model=trend_model)
        elif stage == "apgd-t":
            res = apgd_targeted(model, xs, ys, sub_cfg, sample_ids=ids)
        elif stage == "square":
            res = square_attack(model, xs, ys, sub_cfg, sample_ids=ids)
        else:
            raise InvalidArgumentError(f"unknown cascade stage {stage!r}")
        # survival is judged by the decider on the returned points
        succ = np.argmax(decider.logits(res.x_adv), axis=1) != ys
        hit = active[succ]
        x_adv[hit] = res.x_adv[succ]
        broken[hit] = True
        records.append(StageRecord(stage, int(active.size), int(succ.sum())))
        per_sample.extend(
            {
                "stage": stage,
                "sample_id": int(ids[j]),
                "success": bool(succ[j]),
                "iterations": int(res.iterations[j]),
                "final_margin": float(
                    _margin(decider.logits(res.x_adv[j : j + 1]), ys[j : j + 1])[0]
                ),
            }
            for j in range(active.size)
        )

    return CascadeResult(
        x_adv=x_adv,
        success=broken,
        robust_accuracy=float(1.0 - broken.mean()),
        stages=records,
        per_sample=per_sample,
    )


@dataclass
class TransferResult:
    source_robust_accuracy: float
    transfer_accuracy: float
    x_adv: np.ndarray


def transfer_attack(
    source_model,
    target_model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    removal_model=None,
    trend_model=None,
) -> TransferResult:
    """Craft with the full cascade on the source, evaluate on the target.

    Samples the source cascade never broke carry their clean inputs, so with
    target == source the transfer accuracy reproduces the direct robust
    accuracy exactly.
    """
    cascade = auto_cascade(
        source_model, x, y, cfg, removal_model=removal_model, trend_model=trend_model
    )
    y = np.asarray(y, dtype=np.int64)
    preds = np.argmax(target_model.logits(cascade.x_adv), axis=1)
    return TransferResult(
        source_robust_accuracy=cascade.robust_accuracy,
        transfer_accuracy=float(np.mean(preds == y)),
        x_adv=cascade.x_adv,
    )
