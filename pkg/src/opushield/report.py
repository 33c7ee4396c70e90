"""Evaluation reports: versioned JSON tables plus CSV companions.

Report files contain no wall-clock data, so re-running a command with the
same config reproduces them byte for byte; timings go to stderr only.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ReportSchemaError

__all__ = [
    "EvalRow",
    "EvalTable",
    "save_report",
    "load_report",
    "write_stage_csv",
    "write_table_csv",
    "write_sweep_csv",
    "write_sweep_summary",
]

REPORT_SCHEMA_VERSION = 1


@dataclass
class EvalRow:
    """One model's line in the evaluation table."""

    tag: str  # "base" | "defended" | "defense-free" | "ablation:<tag>" | ...
    natural_accuracy: float
    robust_accuracy: float | None = None  # cascade survivors
    per_attack: list = field(default_factory=list)  # stage records of the cascade
    robust_accuracy_after_stage: dict = field(default_factory=dict)
    transfer_accuracy: float | None = None
    apgd_robust_accuracy: float | None = None  # standalone single attacks
    square_robust_accuracy: float | None = None
    pgd_robust_accuracy: float | None = None
    sweep_reference: str | None = None
    n_eval: int | None = None


@dataclass
class EvalTable:
    schema_version: int = REPORT_SCHEMA_VERSION
    command: str = ""
    rows: list = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)

    def row(self, tag: str) -> EvalRow:
        for r in self.rows:
            if r.tag == tag:
                return r
        raise KeyError(f"no row tagged {tag!r}")


def save_report(table: EvalTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = asdict(table)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_report(path) -> EvalTable:
    payload = json.loads(Path(path).read_text())
    version = payload.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ReportSchemaError(
            f"report schema {version} needs migration (this build reads "
            f"{REPORT_SCHEMA_VERSION})"
        )
    rows = [EvalRow(**r) for r in payload.get("rows", [])]
    return EvalTable(
        schema_version=version,
        command=payload.get("command", ""),
        rows=rows,
        config_echo=payload.get("config_echo", {}),
    )


def write_stage_csv(path, per_sample: list[dict]) -> None:
    """Per-sample cascade bookkeeping: stage, sample id, success, cost."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f,
            fieldnames=["stage", "sample_id", "success", "iterations", "final_margin"],
            restval="",
        )
        writer.writeheader()
        for record in per_sample:
            writer.writerow(record)


def write_table_csv(path, table: EvalTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["tag", "natural_accuracy", "robust_accuracy", "transfer_accuracy",
             "apgd_robust_accuracy", "square_robust_accuracy"]
        )
        for r in table.rows:
            writer.writerow(
                [r.tag, r.natural_accuracy, r.robust_accuracy, r.transfer_accuracy,
                 r.apgd_robust_accuracy, r.square_robust_accuracy]
            )


def write_sweep_csv(path, grid) -> None:
    """Heat-map cells, one row per (alpha, fraction)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["alpha", "fraction", "robust_accuracy", "n_samples"])
        for ai, alpha in enumerate(grid.alphas):
            for fi, fraction in enumerate(grid.fractions):
                writer.writerow(
                    [alpha, fraction, float(grid.accuracy[ai, fi]), grid.n_samples]
                )


def write_sweep_summary(path, grid) -> None:
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "alphas": grid.alphas,
        "fractions": grid.fractions,
        "n_samples": grid.n_samples,
        "corner_zero_knowledge": float(grid.accuracy[0, 0]),
        "corner_full_knowledge": float(grid.accuracy[-1, -1]),
        "whitebox_accuracy": grid.whitebox_accuracy,
        "bpda_accuracy": grid.bpda_accuracy,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
