"""Software model of an Optical Processing Unit.

The device computes y = |Ux|^2 where U is a fixed complex Gaussian matrix,
takes 1-bit inputs (0/1) and returns 8-bit quantized intensities. The matrix
is sealed: the public surface of this module exposes only the forward map and
calibration. `unseal_for_test` exists for simulation-only experiments (exact
backward passes, retrieval sweeps) and raises unless the test capability has
been enabled for the process.

Conventions (the physical device documents neither):
  * entry law: real and imaginary parts i.i.d. N(0, 1/(2*cols)), so
    E|U_mn|^2 = 1/cols and E[y_m] = k/cols for a binary input with k ones;
  * generation is row-streamed from a counter-based RNG keyed on
    (seed, row) — the matrix never has to be materialized to be reproducible;
  * arithmetic is complex128 throughout, outputs float64.
"""

from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CalibrationError,
    CapabilityDisabledError,
    DimensionError,
    InvalidArgumentError,
)
from .rng import keyed_generator

__all__ = [
    "TransmissionMatrix",
    "QuantizationSpec",
    "OpuHandle",
    "opu_new",
    "unseal_for_test",
    "enable_test_unseal",
    "disable_test_unseal",
    "test_unseal_enabled",
]

_UNSEAL_ENV = "OPUSHIELD_TEST_UNSEAL"
_unseal_lock = threading.Lock()
_unseal_enabled = False


def enable_test_unseal() -> None:
    """Unlock matrix access for this process (simulation-only experiments)."""
    global _unseal_enabled
    with _unseal_lock:
        _unseal_enabled = True


def disable_test_unseal() -> None:
    global _unseal_enabled
    with _unseal_lock:
        _unseal_enabled = False


def test_unseal_enabled() -> bool:
    return _unseal_enabled or os.environ.get(_UNSEAL_ENV) == "1"


@dataclass(frozen=True)
class TransmissionMatrix:
    """Fixed complex Gaussian matrix, reproducible from its seed alone."""

    rows: int
    cols: int
    entries: np.ndarray  # complex128, shape (rows, cols)
    seed: int

    @staticmethod
    def generate(rows: int, cols: int, seed: int) -> "TransmissionMatrix":
        if rows < 1 or cols < 1:
            raise InvalidArgumentError(f"matrix dims must be >= 1, got {rows}x{cols}")
        std = math.sqrt(1.0 / (2.0 * cols))
        entries = np.empty((rows, cols), dtype=np.complex128)
        for r in range(rows):
            # One Philox stream per row: 2*cols normals, interleaved re/im.
            draws = keyed_generator(seed, r).standard_normal(2 * cols)
            entries[r] = std * (draws[0::2] + 1j * draws[1::2])
        return TransmissionMatrix(rows=rows, cols=cols, entries=entries, seed=seed)


@dataclass
class QuantizationSpec:
    """Output quantization: clip to [0, out_scale], then 2^out_bits levels."""

    out_bits: int = 8
    out_scale: float | None = None  # unset until calibration
    in_bits: int = 1

    @property
    def levels(self) -> int:
        return (1 << self.out_bits) - 1

    def apply(self, y: np.ndarray) -> np.ndarray:
        if self.out_scale is None:
            return y
        s = self.out_scale
        q = self.levels
        return np.round(np.clip(y, 0.0, s) * (q / s)) * (s / q)


class OpuHandle:
    """Immutable handle over a sealed transmission matrix plus quantization.

    Concurrent `forward` calls are safe once calibration (if any) is done;
    there is no mutable state beyond the one-shot `out_scale`.
    """

    def __init__(self, tm: TransmissionMatrix, quant: QuantizationSpec | None = None):
        self._tm = tm
        self.quant = quant if quant is not None else QuantizationSpec()

    @property
    def input_dim(self) -> int:
        return self._tm.cols

    @property
    def output_dim(self) -> int:
        return self._tm.rows

    @property
    def seed(self) -> int:
        return self._tm.seed

    @property
    def out_scale(self) -> float | None:
        return self.quant.out_scale

    @property
    def calibrated(self) -> bool:
        return self.quant.out_scale is not None

    def _check_binary(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self._tm.cols:
            raise DimensionError(
                f"input length {x.shape[-1]} != OPU input dim {self._tm.cols}"
            )
        if not np.all((x == 0.0) | (x == 1.0)):
            raise InvalidArgumentError(
                "OPU inputs must be binary 0/1; binarization is the caller's job"
            )
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """y = |Ux|^2, quantized once calibrated.

        Accepts a single vector (cols,) or a batch (n, cols); the batch form
        applies the map row-wise.
        """
        x = self._check_binary(x)
        z = x @ self._tm.entries.T  # (…, rows), ascending-column accumulation
        y = np.abs(z) ** 2
        return self.quant.apply(y)

    def calibrate(self, sample_inputs: np.ndarray) -> QuantizationSpec:
        """Set out_scale to the 99.5th percentile of unquantized outputs.

        The percentile uses the 'higher' order statistic, i.e. the smallest
        observed output with at least 99.5% of the calibration mass at or
        below it, so a strictly positive output distribution always yields a
        positive scale.
        """
        sample_inputs = np.atleast_2d(np.asarray(sample_inputs, dtype=np.float64))
        if sample_inputs.size == 0:
            raise InvalidArgumentError("calibration batch is empty")
        x = self._check_binary(sample_inputs)
        y = np.abs(x @ self._tm.entries.T) ** 2
        scale = float(np.quantile(y.ravel(), 0.995, method="higher"))
        if scale <= 0.0:
            raise CalibrationError(
                "99.5th percentile of calibration outputs is 0; "
                "calibration batch carries no signal"
            )
        self.quant.out_scale = scale
        return self.quant


def opu_new(input_dim: int, output_dim: int, seed: int) -> OpuHandle:
    """Fresh uncalibrated OPU with a seed-determined matrix."""
    if input_dim < 1 or output_dim < 1:
        raise InvalidArgumentError(
            f"OPU dims must be >= 1, got input={input_dim} output={output_dim}"
        )
    return OpuHandle(TransmissionMatrix.generate(output_dim, input_dim, seed))


def unseal_for_test(handle: OpuHandle) -> TransmissionMatrix:
    """Ground-truth matrix access; locked unless the test capability is on."""
    if not test_unseal_enabled():
        raise CapabilityDisabledError(
            "transmission-matrix access is disabled outside test/simulation mode"
        )
    return handle._tm


def handle_from_matrix_for_test(entries: np.ndarray, seed: int = 0) -> OpuHandle:
    """Build a handle around explicit matrix entries (oracle tests only)."""
    if not test_unseal_enabled():
        raise CapabilityDisabledError(
            "constructing an OPU from explicit entries requires test mode"
        )
    entries = np.asarray(entries, dtype=np.complex128)
    if entries.ndim != 2:
        raise DimensionError("matrix entries must be 2-D")
    tm = TransmissionMatrix(
        rows=entries.shape[0], cols=entries.shape[1], entries=entries, seed=seed
    )
    return OpuHandle(tm)
