"""Adapter data model: low-rank pairs, scaled-vector adapters, keyed
collections of them, and merged bundles.

A collection is ``K`` tasks x a set of (layer, slot) positions, homogeneous
in adapter kind, with identical shapes across tasks at each slot.  Merged
bundles hold either one adapter per slot (baseline output) or a shared
input-side factor plus a list of output-side factors with a per-task
cluster assignment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

import numpy as np

from .errors import ValidationError
from .linalg import Matrix, as_matrix, matmul

_SLOT_LABEL = re.compile(r"^layer\.(\d+)\.([A-Za-z0-9_]+)$")


_SLOT_NAME = re.compile(r"^[A-Za-z0-9_]+$")


@dataclass(frozen=True, order=True)
class SlotKey:
    """One adapted weight position: layer index plus projection name."""

    layer: int
    slot: str

    def __post_init__(self):
        if self.layer < 0:
            raise ValidationError(f"layer index must be >= 0, got {self.layer}")
        if not _SLOT_NAME.match(self.slot):
            raise ValidationError(f"slot name {self.slot!r} must be alphanumeric/underscore")

    def label(self) -> str:
        return f"layer.{self.layer}.{self.slot}"

    @classmethod
    def from_label(cls, label: str) -> "SlotKey":
        m = _SLOT_LABEL.match(label)
        if m is None:
            raise ValidationError(f"malformed slot label {label!r}")
        return cls(layer=int(m.group(1)), slot=m.group(2))


@dataclass
class LowRankAdapter:
    """One task's factor pair for one slot; the weight update is ``b @ a``.

    ``b`` is the output-side factor (d x r), ``a`` the input-side factor
    (r x k).
    """

    b: Matrix
    a: Matrix

    def __post_init__(self):
        self.b = as_matrix(self.b, "b")
        self.a = as_matrix(self.a, "a")
        if self.b.shape[1] != self.a.shape[0]:
            raise ValidationError(
                f"rank mismatch: b is {self.b.shape}, a is {self.a.shape}"
            )
        if self.rank > min(self.d, self.k):
            raise ValidationError(
                f"rank {self.rank} exceeds min(d, k) = {min(self.d, self.k)}"
            )

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def k(self) -> int:
        return self.a.shape[1]

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def param_count(self) -> int:
        return self.b.size + self.a.size

    def shape_signature(self) -> tuple:
        return (self.d, self.rank, self.k)


@dataclass
class VeraAdapter:
    """Scaled-vector adapter: frozen shared factors plus per-task scaling
    vectors.  The weight update is ``diag(lambda_b) @ shared_b @
    diag(lambda_d) @ shared_a``.
    """

    lambda_b: np.ndarray
    lambda_d: np.ndarray
    shared_b: Matrix
    shared_a: Matrix

    def __post_init__(self):
        self.lambda_b = np.asarray(self.lambda_b, dtype=np.float64).reshape(-1)
        self.lambda_d = np.asarray(self.lambda_d, dtype=np.float64).reshape(-1)
        self.shared_b = as_matrix(self.shared_b, "shared_b")
        self.shared_a = as_matrix(self.shared_a, "shared_a")
        if self.shared_b.shape[1] != self.shared_a.shape[0]:
            raise ValidationError(
                f"rank mismatch: shared_b is {self.shared_b.shape}, "
                f"shared_a is {self.shared_a.shape}"
            )
        if self.lambda_d.size != self.shared_b.shape[1]:
            raise ValidationError(
                f"lambda_d has length {self.lambda_d.size}, expected rank "
                f"{self.shared_b.shape[1]}"
            )
        if self.lambda_b.size != self.shared_b.shape[0]:
            raise ValidationError(
                f"lambda_b has length {self.lambda_b.size}, expected {self.shared_b.shape[0]} rows"
            )

    @property
    def d(self) -> int:
        return self.shared_b.shape[0]

    @property
    def k(self) -> int:
        return self.shared_a.shape[1]

    @property
    def rank(self) -> int:
        return self.shared_b.shape[1]

    @property
    def param_count(self) -> int:
        # per-task payload only; the frozen pair is accounted once per slot
        return self.lambda_b.size + self.lambda_d.size

    def shape_signature(self) -> tuple:
        return (self.d, self.rank, self.k)


Adapter = Union[LowRankAdapter, VeraAdapter]


def vera_update(lambda_b, lambda_d, shared_b, shared_a) -> Matrix:
    """diag(lambda_b) @ shared_b @ diag(lambda_d) @ shared_a.

    Evaluated as ``lambda_b * ((shared_b * lambda_d) @ shared_a)`` -- the
    same association order the trainer uses, so equal inputs reproduce
    equal updates bit for bit.
    """
    lb = np.asarray(lambda_b, dtype=np.float64).reshape(-1)
    ld = np.asarray(lambda_d, dtype=np.float64).reshape(-1)
    inner = matmul(as_matrix(shared_b) * ld[None, :], shared_a)
    return lb[:, None] * inner


def delta_weight(adapter: Adapter) -> Matrix:
    """The dense weight update this adapter encodes."""
    if isinstance(adapter, LowRankAdapter):
        return matmul(adapter.b, adapter.a)
    return vera_update(adapter.lambda_b, adapter.lambda_d, adapter.shared_b, adapter.shared_a)


@dataclass
class AdapterCollection:
    """K tasks x slots of adapters with consistent shapes.

    ``slots`` is kept in canonical sorted order so that any two collections
    with the same contents are laid out, and serialized, identically.
    """

    task_ids: list[str]
    slots: list[SlotKey]
    table: dict[tuple[str, SlotKey], Adapter]

    @classmethod
    def build(
        cls,
        task_ids: Iterable[str],
        table: Mapping[tuple[str, SlotKey], Adapter],
    ) -> "AdapterCollection":
        tasks = list(task_ids)
        if not tasks:
            raise ValidationError("a collection needs at least one task")
        if len(set(tasks)) != len(tasks):
            raise ValidationError("duplicate task ids")
        slots = sorted({slot for (_, slot) in table})
        if not slots:
            raise ValidationError("a collection needs at least one slot")
        coll = cls(task_ids=tasks, slots=slots, table=dict(table))
        coll.validate()
        return coll

    def validate(self) -> None:
        kinds = {type(adapter) for adapter in self.table.values()}
        if len(kinds) > 1:
            raise ValidationError("collection mixes adapter kinds")
        for slot in self.slots:
            signature = None
            for task in self.task_ids:
                adapter = self.table.get((task, slot))
                if adapter is None:
                    raise ValidationError(
                        f"missing adapter for task {task!r} at slot {slot.label()}"
                    )
                if signature is None:
                    signature = adapter.shape_signature()
                elif adapter.shape_signature() != signature:
                    raise ValidationError(
                        f"inconsistent shapes at slot {slot.label()}: task {task!r} "
                        f"has (d, r, k) = {adapter.shape_signature()}, expected {signature}"
                    )
            if self.kind == "vera":
                first = self.table[(self.task_ids[0], slot)]
                for task in self.task_ids[1:]:
                    other = self.table[(task, slot)]
                    if not (
                        np.array_equal(first.shared_a, other.shared_a)
                        and np.array_equal(first.shared_b, other.shared_b)
                    ):
                        raise ValidationError(
                            f"frozen shared factors differ across tasks at slot {slot.label()}"
                        )

    @property
    def kind(self) -> str:
        adapter = next(iter(self.table.values()))
        return "lora" if isinstance(adapter, LowRankAdapter) else "vera"

    @property
    def num_tasks(self) -> int:
        return len(self.task_ids)

    def adapter(self, task: str, slot: SlotKey) -> Adapter:
        return self.table[(task, slot)]

    def adapters_at(self, slot: SlotKey) -> list[Adapter]:
        return [self.table[(task, slot)] for task in self.task_ids]

    def param_count(self) -> int:
        """Number of stored real entries, counting frozen factors once per slot."""
        total = sum(adapter.param_count for adapter in self.table.values())
        if self.kind == "vera":
            for slot in self.slots:
                first = self.table[(self.task_ids[0], slot)]
                total += first.shared_a.size + first.shared_b.size
        return total


@dataclass
class MergedAdapterSlot:
    """Baseline output for one slot: a single adapter used by every task."""

    adapter: Adapter

    @property
    def param_count(self) -> int:
        count = self.adapter.param_count
        if isinstance(self.adapter, VeraAdapter):
            # the frozen pair is stored alongside the merged vectors
            count += self.adapter.shared_a.size + self.adapter.shared_b.size
        return count

    def prediction(self, task_index: int) -> Matrix:
        return delta_weight(self.adapter)


@dataclass
class SharedLoraSlot:
    """Shared input-side factor plus per-cluster output factors."""

    a_shared: Matrix
    b_clusters: list[Matrix]
    assignment: list[int]

    def __post_init__(self):
        m = len(self.b_clusters)
        for idx in self.assignment:
            if not (0 <= idx < m):
                raise ValidationError(f"assignment index {idx} out of range [0, {m})")

    @property
    def param_count(self) -> int:
        return self.a_shared.size + sum(b.size for b in self.b_clusters)

    def prediction(self, task_index: int) -> Matrix:
        return matmul(self.b_clusters[self.assignment[task_index]], self.a_shared)


@dataclass
class SharedVeraSlot:
    """Shared inner scaling vector plus per-cluster outer scaling vectors,
    alongside the frozen factor pair they modulate."""

    lambda_d: np.ndarray
    lambda_b_clusters: list[np.ndarray]
    shared_b: Matrix
    shared_a: Matrix
    assignment: list[int]

    def __post_init__(self):
        m = len(self.lambda_b_clusters)
        for idx in self.assignment:
            if not (0 <= idx < m):
                raise ValidationError(f"assignment index {idx} out of range [0, {m})")

    @property
    def param_count(self) -> int:
        vecs = self.lambda_d.size + sum(v.size for v in self.lambda_b_clusters)
        return vecs + self.shared_a.size + self.shared_b.size

    def prediction(self, task_index: int) -> Matrix:
        lb = self.lambda_b_clusters[self.assignment[task_index]]
        return vera_update(lb, self.lambda_d, self.shared_b, self.shared_a)


MergedSlot = Union[MergedAdapterSlot, SharedLoraSlot, SharedVeraSlot]


@dataclass
class MergedBundle:
    """Output of any merge: one entry per slot plus bookkeeping."""

    method: str
    kind: str
    tasks: list[str]
    slots: list[SlotKey] = field(default_factory=list)
    entries: dict[SlotKey, MergedSlot] = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in ("lora", "vera"):
            raise ValidationError(f"unknown bundle kind {self.kind!r}")
        if not self.tasks:
            raise ValidationError("a bundle needs at least one task")
        if set(self.slots) != set(self.entries):
            raise ValidationError("bundle slots and entries disagree")
        for slot, entry in self.entries.items():
            if isinstance(entry, (SharedLoraSlot, SharedVeraSlot)):
                if len(entry.assignment) != len(self.tasks):
                    raise ValidationError(
                        f"slot {slot.label()} assigns {len(entry.assignment)} tasks, "
                        f"expected {len(self.tasks)}"
                    )

    @property
    def param_count(self) -> int:
        return sum(entry.param_count for entry in self.entries.values())

    def prediction(self, task: str, slot: SlotKey) -> Matrix:
        return self.entries[slot].prediction(self.tasks.index(task))

    def assignment_map(self) -> dict[str, dict[str, int]]:
        """Per-task, per-slot cluster index (0 for single-adapter slots)."""
        out: dict[str, dict[str, int]] = {task: {} for task in self.tasks}
        for slot in self.slots:
            entry = self.entries[slot]
            for i, task in enumerate(self.tasks):
                if isinstance(entry, (SharedLoraSlot, SharedVeraSlot)):
                    out[task][slot.label()] = entry.assignment[i]
                else:
                    out[task][slot.label()] = 0
        return out


def storage_ratio_percent(original: int, merged: int) -> float:
    """Merged parameter count as a percentage of the original count."""
    if original <= 0:
        raise ValidationError("original parameter count must be positive")
    return 100.0 * merged / original
