"""Matrix-retrieval attack: how much does partial knowledge of U buy?

The attacker's reconstruction interpolates between the true matrix and an
independent decoy of the same law, column-masked:

    U' = alpha * (U . M) + (1 - alpha) * R'   on retrieved columns,
    U' = R'                                    on the others.

The attack backward then runs the exact Wirtinger chain through U' (an
attacker claiming knowledge of U' uses all of it, not the magnitude-only
surrogate). Sweeping (alpha, column fraction) maps the robustness landscape
between zero knowledge (standard surrogate attack) and full knowledge
(de-obfuscated white box). Needs the test capability throughout: the
interpolation is only constructible where ground truth exists, i.e. in
simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, apgd
from .base import FrozenFeatureMap
from .errors import InvalidArgumentError
from .model import AblationFlags, ClassifierParams, bpda_input_gradient
from .opu import OpuHandle, TransmissionMatrix, unseal_for_test
from .rng import keyed_generator, mix_seed
from .targets import DefendedTarget

__all__ = ["RetrievalModel", "SweepGrid", "build_retrieved", "retrieval_gradient", "sweep"]

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class RetrievalModel:
    alpha: float
    col_fraction: float
    mask: np.ndarray  # (cols,) bool: columns the attacker retrieved
    u_prime: np.ndarray  # (rows, cols) complex
    mask_seed: int
    decoy_seed: int


def build_retrieved(
    opu: OpuHandle,
    alpha: float,
    col_fraction: float,
    mask_seed: int,
    decoy_seed: int,
) -> RetrievalModel:
    """Assemble the attacker's matrix for one knowledge level.

    Retrieved columns are a seeded prefix of a column permutation, so larger
    fractions at the same mask seed contain smaller ones. The endpoints
    degenerate exactly: alpha=1 copies U on retrieved columns bitwise,
    alpha=0 is the decoy alone.
    """
    if not (0.0 <= alpha <= 1.0):
        raise InvalidArgumentError(f"alpha must be in [0,1], got {alpha}")
    if not (0.0 <= col_fraction <= 1.0):
        raise InvalidArgumentError(f"col_fraction must be in [0,1], got {col_fraction}")
    u = unseal_for_test(opu).entries
    rows, cols = u.shape
    decoy = TransmissionMatrix.generate(rows, cols, decoy_seed).entries

    n_masked = math.floor(col_fraction * cols)
    perm = keyed_generator(mask_seed, 6).permutation(cols)
    mask = np.zeros(cols, dtype=bool)
    mask[perm[:n_masked]] = True

    u_prime = decoy.copy()
    if alpha == 1.0:
        u_prime[:, mask] = u[:, mask]
    elif alpha > 0.0:
        u_prime[:, mask] = alpha * u[:, mask] + (1.0 - alpha) * decoy[:, mask]
    return RetrievalModel(
        alpha=alpha,
        col_fraction=col_fraction,
        mask=mask,
        u_prime=u_prime,
        mask_seed=mask_seed,
        decoy_seed=decoy_seed,
    )


def retrieval_gradient(
    p: ClassifierParams,
    opu: OpuHandle,
    rm: RetrievalModel,
    trace,
    labels,
    loss: str = "ce",
    flags: AblationFlags = AblationFlags(),
    targets=None,
) -> np.ndarray:
    """BPDA chain with the surrogate replaced by the exact backward through U'."""
    return bpda_input_gradient(
        p, opu, trace, labels, loss, flags, targets, surrogate_matrix=rm.u_prime
    )


@dataclass
class SweepGrid:
    alphas: list[float]
    fractions: list[float]
    accuracy: np.ndarray  # (len(alphas), len(fractions)) robust accuracy
    n_samples: int
    whitebox_accuracy: float  # de-obfuscated exact-U reference (seed of cell (1,1))
    bpda_accuracy: float  # standard surrogate-R reference
    cell_seeds: np.ndarray = field(default=None, repr=False)


def _cell_robust_accuracy(target, x, y, cfg: AttackConfig) -> float:
    res = apgd(target, x, y, cfg, loss="ce")
    return float(1.0 - res.success.mean())


def sweep(
    frozen: FrozenFeatureMap,
    params: ClassifierParams,
    opu: OpuHandle,
    x: np.ndarray,
    y: np.ndarray,
    attack_cfg: AttackConfig,
    alphas=DEFAULT_GRID,
    fractions=DEFAULT_GRID,
    mask_seed: int = 0,
    decoy_seed: int = 1,
    flags: AblationFlags = AblationFlags(),
) -> SweepGrid:
    """Robust accuracy under APGD-CE-with-retrieval at every grid point.

    One decoy and one column permutation are shared by the whole sweep so
    cells differ only in (alpha, fraction); each cell gets its own attack
    seed stream. Also computes the two references the endpoints are checked
    against: the de-obfuscated white box (same seed as the (1,1) cell) and
    the standard surrogate attack.
    """
    alphas = [float(a) for a in alphas]
    fractions = [float(f) for f in fractions]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    acc = np.zeros((len(alphas), len(fractions)))
    cell_seeds = np.zeros((len(alphas), len(fractions)), dtype=np.int64)

    for ai, alpha in enumerate(alphas):
        for fi, frac in enumerate(fractions):
            rm = build_retrieved(opu, alpha, frac, mask_seed, decoy_seed)
            cell_seed = mix_seed(attack_cfg.seed, 1000 + ai * len(fractions) + fi)
            cell_seeds[ai, fi] = cell_seed
            target = DefendedTarget(
                frozen, params, opu, flags, surrogate_matrix=rm.u_prime
            )
            acc[ai, fi] = _cell_robust_accuracy(
                target, x, y, replace(attack_cfg, seed=cell_seed)
            )

    # references: exact-U white box on the (1,1) cell's seed, plain BPDA
    wb_seed = (
        int(cell_seeds[alphas.index(1.0), fractions.index(1.0)])
        if 1.0 in alphas and 1.0 in fractions
        else mix_seed(attack_cfg.seed, 999)
    )
    whitebox = _cell_robust_accuracy(
        DefendedTarget(frozen, params, opu, replace(flags, obfuscated=False)),
        x,
        y,
        replace(attack_cfg, seed=wb_seed),
    )
    bpda = _cell_robust_accuracy(
        DefendedTarget(frozen, params, opu, flags),
        x,
        y,
        replace(attack_cfg, seed=mix_seed(attack_cfg.seed, 998)),
    )
    return SweepGrid(
        alphas=alphas,
        fractions=fractions,
        accuracy=acc,
        n_samples=len(x),
        whitebox_accuracy=whitebox,
        bpda_accuracy=bpda,
        cell_seeds=cell_seeds,
    )
