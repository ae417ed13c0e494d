"""Quantitative reports: pairwise adapter similarity, storage accounting,
and reconstruction error of merged bundles against their originals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterCollection, MergedBundle, SlotKey, delta_weight
from .errors import ParameterError, ValidationError
from .linalg import DistanceKind, distance


@dataclass
class SimilarityReport:
    """Per-slot K x K mean-absolute-difference matrices for each factor."""

    tasks: list[str]
    a_matrices: dict[SlotKey, np.ndarray] = field(default_factory=dict)
    b_matrices: dict[SlotKey, np.ndarray] = field(default_factory=dict)

    def slot_mean(self, slot: SlotKey, which: str) -> float:
        return _offdiag_mean(self._pick(which)[slot])

    def grand_mean(self, which: str) -> float:
        mats = self._pick(which)
        return float(np.mean([_offdiag_mean(m) for m in mats.values()]))

    def _pick(self, which: str) -> dict[SlotKey, np.ndarray]:
        if which == "A":
            return self.a_matrices
        if which == "B":
            return self.b_matrices
        raise ParameterError(f"factor must be 'A' or 'B', got {which!r}")

    def to_dict(self) -> dict:
        def section(mats: dict[SlotKey, np.ndarray]) -> dict:
            return {
                "grand_mean": float(np.mean([_offdiag_mean(m) for m in mats.values()])),
                "per_slot": {
                    slot.label(): {
                        "matrix": mats[slot].tolist(),
                        "mean": _offdiag_mean(mats[slot]),
                    }
                    for slot in sorted(mats)
                },
            }

        return {
            "tasks": list(self.tasks),
            "similarity": {"A": section(self.a_matrices), "B": section(self.b_matrices)},
        }


def _offdiag_mean(matrix: np.ndarray) -> float:
    k = matrix.shape[0]
    if k < 2:
        return 0.0
    mask = ~np.eye(k, dtype=bool)
    return float(matrix[mask].mean())


def pairwise_similarity(collection: AdapterCollection) -> SimilarityReport:
    """Pairwise mean absolute differences between every two tasks' factors,
    one K x K symmetric zero-diagonal matrix per slot and factor."""
    if collection.kind != "lora":
        raise ValidationError("similarity analysis expects a low-rank collection")
    tasks = collection.task_ids
    k = len(tasks)
    report = SimilarityReport(tasks=list(tasks))
    for slot in collection.slots:
        adapters = collection.adapters_at(slot)
        a_mat = np.zeros((k, k))
        b_mat = np.zeros((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                a_mat[i, j] = a_mat[j, i] = distance(
                    adapters[i].a, adapters[j].a, DistanceKind.MAE
                )
                b_mat[i, j] = b_mat[j, i] = distance(
                    adapters[i].b, adapters[j].b, DistanceKind.MAE
                )
        report.a_matrices[slot] = a_mat
        report.b_matrices[slot] = b_mat
    return report


def storage_ratio(k_tasks: int, m_clusters: int, rank: int, d: int, k: int) -> float:
    """Merged storage as a percentage of storing all task adapters:
    100 * (M*r*d + r*k) / (K*r*(d+k))."""
    for name, value in (
        ("k_tasks", k_tasks),
        ("m_clusters", m_clusters),
        ("rank", rank),
        ("d", d),
        ("k", k),
    ):
        if value < 1:
            raise ParameterError(f"{name} must be a positive integer, got {value}")
    merged = m_clusters * rank * d + rank * k
    original = k_tasks * rank * (d + k)
    return 100.0 * merged / original


@dataclass
class ReconReport:
    """Distances between original per-task updates and merged predictions."""

    tasks: list[str]
    slots: list[SlotKey]
    mae: dict[tuple[str, SlotKey], float] = field(default_factory=dict)
    fro: dict[tuple[str, SlotKey], float] = field(default_factory=dict)

    def task_mean(self, task: str, which: str = "mae") -> float:
        table = self.mae if which == "mae" else self.fro
        return float(np.mean([table[(task, slot)] for slot in self.slots]))

    def grand_mean(self, which: str = "mae") -> float:
        table = self.mae if which == "mae" else self.fro
        return float(np.mean(list(table.values())))

    def to_dict(self) -> dict:
        return {
            "recon": {
                "grand_mean_mae": self.grand_mean("mae"),
                "grand_mean_fro": self.grand_mean("fro"),
                "per_task": {
                    task: {"mae": self.task_mean(task, "mae"), "fro": self.task_mean(task, "fro")}
                    for task in self.tasks
                },
                "per_pair": {
                    task: {
                        slot.label(): {
                            "mae": self.mae[(task, slot)],
                            "fro": self.fro[(task, slot)],
                        }
                        for slot in self.slots
                    }
                    for task in self.tasks
                },
            }
        }


def reconstruction_report(original: AdapterCollection, merged: MergedBundle) -> ReconReport:
    """Compare every task's original update against the bundle's prediction
    for that task, per slot, in mean-absolute and Frobenius terms."""
    if set(original.slots) != set(merged.slots):
        raise ValidationError("collection and bundle cover different slots")
    if list(original.task_ids) != list(merged.tasks):
        raise ValidationError("collection and bundle cover different tasks")
    report = ReconReport(tasks=list(original.task_ids), slots=list(original.slots))
    for slot in original.slots:
        for task in original.task_ids:
            target = delta_weight(original.adapter(task, slot))
            prediction = merged.prediction(task, slot)
            report.mae[(task, slot)] = distance(target, prediction, DistanceKind.MAE)
            report.fro[(task, slot)] = distance(target, prediction, DistanceKind.FRO)
    return report
