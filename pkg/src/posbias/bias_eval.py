"""Position sweeps, per-slot accuracy, fluctuation, and report files."""

from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tasks import RetrievalInstance, TaskConfig, gen_instance, instance_seed

log = logging.getLogger(__name__)


def fluctuation(accs: Sequence[float]) -> float:
    """100 * sample standard deviation / mean of per-slot accuracies."""
    vals = [float(a) for a in accs]
    if len(vals) < 2:
        raise ValueError("fluctuation needs at least two accuracies")
    mean = statistics.fmean(vals)
    if mean == 0:
        raise ValueError("fluctuation is undefined when the mean accuracy is 0")
    return 100.0 * statistics.stdev(vals) / mean


@dataclass
class BiasReport:
    """Predicted-position frequencies for a sweep over truth slots.

    ``matrix[r]`` is the distribution over predicted slots 1..K plus a final
    invalid column, for truth slot ``slots[r]``.
    """

    K: int
    slots: list[int]
    matrix: np.ndarray
    n_per_slot: list[int]
    provenance: str = ""
    mass: np.ndarray | None = None
    failed_slots: list[int] = field(default_factory=list)

    @property
    def accuracy(self) -> list[float]:
        return [float(self.matrix[r, c - 1]) for r, c in enumerate(self.slots)]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def fluctuation(self) -> float:
        return fluctuation(self.accuracy)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BiasReport):
            return NotImplemented
        same_mass = (self.mass is None and other.mass is None) or (
            self.mass is not None and other.mass is not None
            and np.array_equal(self.mass, other.mass))
        return (self.K == other.K and self.slots == other.slots
                and np.array_equal(self.matrix, other.matrix)
                and self.n_per_slot == other.n_per_slot and self.provenance == other.provenance
                and self.failed_slots == other.failed_slots and same_mass)

    def to_dict(self) -> dict:
        acc = self.accuracy
        try:
            fl = self.fluctuation
        except ValueError:
            fl = None
        return {
            "K": self.K,
            "slots": self.slots,
            "matrix": self.matrix.tolist(),
            "mass": None if self.mass is None else self.mass.tolist(),
            "n_per_slot": self.n_per_slot,
            "provenance": self.provenance,
            "failed_slots": self.failed_slots,
            "accuracy": acc,
            "mean_accuracy": float(np.mean(acc)),
            "fluctuation": fl,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BiasReport":
        return cls(
            K=d["K"],
            slots=list(d["slots"]),
            matrix=np.asarray(d["matrix"], dtype=np.float64),
            n_per_slot=list(d["n_per_slot"]),
            provenance=d.get("provenance", ""),
            mass=None if d.get("mass") is None else np.asarray(d["mass"], dtype=np.float64),
            failed_slots=list(d.get("failed_slots", [])),
        )


def report_from_counts(K: int, slots: Sequence[int], counts: np.ndarray,
                       provenance: str = "", mass_sums: np.ndarray | None = None) -> BiasReport:
    """Normalize per-row outcome counts (K + 1 columns) into a report."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (len(slots), K + 1):
        raise ValueError(f"counts shape {counts.shape} != ({len(slots)}, {K + 1})")
    totals = counts.sum(axis=1)
    if (totals == 0).any():
        raise ValueError("every probed slot needs at least one outcome")
    matrix = counts / totals[:, None]
    failed = [int(c) for r, c in enumerate(slots) if counts[r, K] == totals[r]]
    mass = None if mass_sums is None else np.asarray(mass_sums) / totals[:, None]
    return BiasReport(K, [int(s) for s in slots], matrix, totals.tolist(), provenance, mass, failed)


Predictor = Callable[[RetrievalInstance], "int | None"]


def _normalize(pred) -> tuple[int | None, np.ndarray | None]:
    if isinstance(pred, tuple):
        return pred[0], pred[1]
    return pred, None


def probe_positions(predictor, task_cfg: TaskConfig, n_per_slot: int, seed: int,
                    slots: Sequence[int] | None = None, provenance: str = "") -> BiasReport:
    """Sweep the truth slot and tabulate where the predictor answers.

    ``predictor`` maps an instance to a slot (or ``None`` for an unparsable
    answer), or to ``(slot, distribution)``. If it has a ``predict_many``
    method, each slot's instances go through it in one call. Instance streams
    depend only on ``seed`` and the slot.
    """
    if n_per_slot < 1:
        raise ValueError("n_per_slot must be >= 1")
    K = task_cfg.K
    slots = list(range(1, K + 1)) if slots is None else [int(s) for s in slots]
    for s in slots:
        if not 1 <= s <= K:
            raise ValueError(f"slot {s} outside 1..{K}")
    counts = np.zeros((len(slots), K + 1), dtype=np.int64)
    mass = np.zeros((len(slots), K + 1))
    have_mass = True
    batch = getattr(predictor, "predict_many", None)
    for r, c in enumerate(slots):
        insts = [gen_instance(task_cfg, c, instance_seed(seed, c * 1_000_003 + i))
                 for i in range(n_per_slot)]
        preds = batch(insts) if batch is not None else [predictor(x) for x in insts]
        for p in preds:
            slot, dist = _normalize(p)
            if slot is None or not 1 <= slot <= K:
                counts[r, K] += 1
            else:
                counts[r, slot - 1] += 1
            if dist is None:
                have_mass = False
            else:
                mass[r, :K] += dist
    rep = report_from_counts(K, slots, counts, provenance, mass if have_mass else None)
    if rep.failed_slots:
        log.warning("predictor failed on every instance for slots %s", rep.failed_slots)
    return rep


def render_report(report: BiasReport, out_dir: str | Path, run_id: str = "report") -> dict[str, Path]:
    """Write matrix CSV, summary CSV and JSON summary; returns their paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "matrix": out / f"{run_id}_matrix.csv",
            "summary": out / f"{run_id}_summary.csv",
            "json": out / f"{run_id}_report.json",
        }
        K = report.K
        with open(paths["matrix"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["truth_slot"] + [f"pred_{i}" for i in range(1, K + 1)] + ["invalid"])
            for c, row in zip(report.slots, report.matrix):
                w.writerow([c] + [repr(float(v)) for v in row])
        with open(paths["summary"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["truth_slot", "accuracy", "n"])
            for c, a, n in zip(report.slots, report.accuracy, report.n_per_slot):
                w.writerow([c, repr(a), n])
            d = report.to_dict()
            w.writerow(["mean", repr(d["mean_accuracy"]), sum(report.n_per_slot)])
            w.writerow(["fluctuation_pct", "" if d["fluctuation"] is None else repr(d["fluctuation"]), ""])
        with open(paths["json"], "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        raise OSError(f"cannot write report under {out}: {e}") from e
    return paths


def load_report(path: str | Path) -> BiasReport:
    with open(path, encoding="utf-8") as fh:
        return BiasReport.from_dict(json.load(fh))


def read_matrix_csv(path: str | Path) -> tuple[list[int], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    return [int(r[0]) for r in body], np.asarray([[float(v) for v in r[1:]] for r in body])
