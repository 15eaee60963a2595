"""Robustness metrics and sweeps along a Bezier path."""

from __future__ import annotations

import io
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import UNIT_BOX, AttackSpec, DomainBox, msd_attack, pgd_attack
from .curve import CurveParams, curve_point
from .data import Dataset
from .errors import UsageError
from .model import ModelParams, forward_loss, predict

CSV_HEADER = "t,std_acc,acc_linf,acc_l2,acc_l1,dlr,union_acc,msd_acc,loss_clean"


def _require_specs(specs):
    specs = list(specs)
    if not specs:
        raise UsageError("at least one attack spec is required")
    return specs


def correct_under(params: ModelParams, data: Dataset, spec: AttackSpec, box: DomainBox = UNIT_BOX) -> np.ndarray:
    """Per-sample correctness after a PGD attack."""
    adv = pgd_attack(params, data.x, data.y, spec, box)
    return predict(params, adv) == data.y


def robust_accuracy(params: ModelParams, data: Dataset, spec: AttackSpec, box: DomainBox = UNIT_BOX) -> float:
    return float(np.mean(correct_under(params, data, spec, box)))


def standard_accuracy(params: ModelParams, data: Dataset) -> float:
    return float(np.mean(predict(params, data.x) == data.y))


def dlr_from_accuracies(accs: Sequence[float]) -> float:
    """Dataset-wise worst case over attack types."""
    accs = list(accs)
    if not accs:
        raise UsageError("dlr needs at least one accuracy")
    return min(accs)


def union_from_correct(correct) -> float:
    """Fraction of samples correct under every attack; ``correct`` is (n, attacks)."""
    c = np.asarray(correct, dtype=bool)
    return float(np.mean(np.all(c, axis=1)))


def dlr(params: ModelParams, data: Dataset, specs: Sequence[AttackSpec], box: DomainBox = UNIT_BOX) -> float:
    specs = _require_specs(specs)
    return dlr_from_accuracies(robust_accuracy(params, data, s, box) for s in specs)


def union_accuracy(params: ModelParams, data: Dataset, specs: Sequence[AttackSpec],
                   box: DomainBox = UNIT_BOX) -> float:
    specs = _require_specs(specs)
    return union_from_correct(np.stack([correct_under(params, data, s, box) for s in specs], axis=1))


@dataclass(frozen=True)
class SweepRow:
    t: float
    std_acc: float
    acc_linf: float | None
    acc_l2: float | None
    acc_l1: float | None
    dlr: float
    union_acc: float
    msd_acc: float
    loss_clean: float


def evaluate(params: ModelParams, data: Dataset, specs: Sequence[AttackSpec],
             box: DomainBox = UNIT_BOX, t: float = 0.0) -> SweepRow:
    """Every metric for one model; each attack runs once and feeds dlr and union."""
    specs = _require_specs(specs)
    if len({s.p for s in specs}) != len(specs):
        raise UsageError("evaluation specs must have pairwise distinct norms")
    if data.n == 0:
        raise UsageError("empty dataset")
    correct = np.stack([correct_under(params, data, s, box) for s in specs], axis=1)
    accs = {s.p: float(np.mean(correct[:, i])) for i, s in enumerate(specs)}
    msd_adv = msd_attack(params, data.x, data.y, specs, box)
    loss, out = forward_loss(params, data.x, data.y)
    return SweepRow(
        t=float(t),
        std_acc=float(np.mean(np.argmax(out, axis=1) == data.y)),
        acc_linf=accs.get("linf"),
        acc_l2=accs.get("l2"),
        acc_l1=accs.get("l1"),
        dlr=dlr_from_accuracies(accs.values()),
        union_acc=union_from_correct(correct),
        msd_acc=float(np.mean(predict(params, msd_adv) == data.y)),
        loss_clean=loss,
    )


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


@dataclass
class SweepTable:
    rows: list[SweepRow]
    grid_n: int
    norms: tuple[str, ...]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def best(self) -> SweepRow:
        """Row with the highest dlr; the smallest t wins ties."""
        if not self.rows:
            raise UsageError("empty sweep")
        return self.rows[int(np.argmax(self.column("dlr")))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.rows:
            buf.write(",".join(_fmt(getattr(r, f.name)) for f in fields(SweepRow)) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "SweepTable":
        lines = text.strip().splitlines()
        if not lines or lines[0] != CSV_HEADER:
            raise UsageError("not a sweep CSV")
        rows = []
        for line in lines[1:]:
            vals = [None if v == "" else float(v) for v in line.split(",")]
            rows.append(SweepRow(*vals))
        norms = tuple(n for n in ("linf", "l2", "l1") if rows and getattr(rows[0], f"acc_{n}") is not None)
        return cls(rows, len(rows), norms)


def sweep_grid(grid_n: int) -> list[float]:
    if grid_n < 3:
        raise UsageError(f"sweep grid needs at least 3 points, got {grid_n}")
    return [k / (grid_n - 1) for k in range(grid_n)]


def path_sweep(curve: CurveParams, data: Dataset, specs: Sequence[AttackSpec], grid_n: int = 11,
               box: DomainBox = UNIT_BOX) -> SweepTable:
    """Evaluate the model at t = k / (grid_n - 1) for k = 0 .. grid_n - 1."""
    specs = _require_specs(specs)
    rows = [evaluate(curve_point(curve, t), data, specs, box, t) for t in sweep_grid(grid_n)]
    return SweepTable(rows, grid_n, tuple(s.p for s in specs))
