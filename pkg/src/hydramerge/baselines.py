"""Data-free baseline merging: uniform averaging, trim/sign-election
merging, random drop-and-rescale, and their composition.

All four methods collapse K per-task tensors into one tensor per matrix
position.  ``merge_collection`` applies them per slot, either to both
factors independently (one merged adapter per slot) or to the input-side
factor only, keeping every per-task output factor.

Determinism: every stochastic step consumes an explicit :class:`Rng`, and
each slot derives its own stream from ``seed xor hash(slot label)``, so
slots can be processed in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .adapters import (
    AdapterCollection,
    LowRankAdapter,
    MergedAdapterSlot,
    MergedBundle,
    SharedLoraSlot,
    SharedVeraSlot,
    VeraAdapter,
)
from .errors import ParameterError, ShapeError
from .linalg import Matrix, Rng, as_matrix, exact_mean, stable_hash64


class MergeMethod(str, Enum):
    TA = "ta"
    TIES = "ties"
    DARE = "dare"
    DARE_TIES = "dare-ties"


class MergeTarget(str, Enum):
    PER_MATRIX = "per-matrix"
    A_ONLY = "a-only"


@dataclass(frozen=True)
class BaselineConfig:
    method: MergeMethod
    ties_density: float = 0.2
    dare_drop_p: float = 0.9
    seed: int = 0
    merge_target: MergeTarget = MergeTarget.PER_MATRIX
    scale: float = 1.0

    def validate(self) -> None:
        if not (0.0 < self.ties_density <= 1.0):
            raise ParameterError(f"ties_density must be in (0, 1], got {self.ties_density}")
        if not (0.0 <= self.dare_drop_p < 1.0):
            raise ParameterError(f"dare_drop_p must be in [0, 1), got {self.dare_drop_p}")
        if self.scale <= 0.0:
            raise ParameterError(f"scale must be positive, got {self.scale}")


def merge_ta(tensors: Sequence[Matrix], scale: float = 1.0) -> Matrix:
    """Uniform average (coefficient 1/K each), optionally rescaled.

    The mean is exactly rounded, so K copies of X merge to X exactly and
    the result is bit-identical under task permutation.
    """
    mats = [as_matrix(t) for t in tensors]
    out = exact_mean(mats)
    if scale != 1.0:
        out = out * scale
    return out


def ties_trim(t, density: float) -> Matrix:
    """Keep the ``ceil(density * n)`` largest-magnitude entries, zero the rest.

    Ties at the threshold magnitude keep the lower flat index.
    """
    if not (0.0 < density <= 1.0):
        raise ParameterError(f"density must be in (0, 1], got {density}")
    mat = as_matrix(t)
    n = mat.size
    keep = math.ceil(density * n)
    if keep >= n:
        return mat.copy()
    flat = mat.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    kept = order[:keep]
    out[kept] = flat[kept]
    return out.reshape(mat.shape)


def ties_merge(tensors: Sequence[Matrix], density: float) -> Matrix:
    """Trim each tensor, elect the entrywise sign of the trimmed sum, then
    average only the sign-aligned trimmed values (unary task coefficients).

    Entries with no elected sign (exact cancellation or all trimmed away)
    merge to zero.
    """
    mats = [as_matrix(t) for t in tensors]
    first = mats[0]
    for m in mats[1:]:
        if m.shape != first.shape:
            raise ShapeError(f"shape mismatch: {m.shape} vs {first.shape}")
    trimmed = np.stack([ties_trim(m, density) for m in mats])
    elected = np.sign(trimmed.sum(axis=0))
    aligned = (np.sign(trimmed) == elected) & (elected != 0)
    counts = aligned.sum(axis=0)
    total = (trimmed * aligned).sum(axis=0)
    return np.divide(total, counts, out=np.zeros_like(first), where=counts > 0)


def dare_transform(t, p: float, rng: Rng) -> Matrix:
    """Zero each entry with probability ``p``, rescale survivors by
    ``1/(1-p)``.  The drop mask consumes one uniform per entry in flat
    index order, so the expectation over seeds equals the input.
    """
    if not (0.0 <= p < 1.0):
        raise ParameterError(f"drop probability must be in [0, 1), got {p}")
    mat = as_matrix(t)
    u = rng.uniforms(mat.size).reshape(mat.shape)
    return np.where(u >= p, mat / (1.0 - p), 0.0)


def merge_dare(tensors: Sequence[Matrix], p: float, rng: Rng, scale: float = 1.0) -> Matrix:
    """Drop-and-rescale each tensor, then average uniformly.

    The stream is consumed task by task in task order; with ``p == 0`` this
    is bit-exactly ``merge_ta``.
    """
    transformed = [dare_transform(t, p, rng) for t in tensors]
    return merge_ta(transformed, scale=scale)


def merge_dare_ties(tensors: Sequence[Matrix], p: float, density: float, rng: Rng) -> Matrix:
    """Drop-and-rescale each tensor, then trim/elect/average."""
    transformed = [dare_transform(t, p, rng) for t in tensors]
    return ties_merge(transformed, density)


def _merge_tensors(tensors: list[Matrix], cfg: BaselineConfig, rng: Rng) -> Matrix:
    if cfg.method is MergeMethod.TA:
        return merge_ta(tensors, scale=cfg.scale)
    if cfg.method is MergeMethod.TIES:
        return ties_merge(tensors, cfg.ties_density)
    if cfg.method is MergeMethod.DARE:
        return merge_dare(tensors, cfg.dare_drop_p, rng, scale=cfg.scale)
    return merge_dare_ties(tensors, cfg.dare_drop_p, cfg.ties_density, rng)


def merge_collection(collection: AdapterCollection, cfg: BaselineConfig) -> MergedBundle:
    """Merge every slot of a collection with one baseline method.

    Per slot the input-side tensors are merged first, then (per-matrix mode)
    the output-side tensors, drawing from that slot's stream throughout.
    Vera collections merge their scaling vectors, treated as n x 1.
    """
    cfg.validate()
    bundle = MergedBundle(
        method=cfg.method.value,
        kind=collection.kind,
        tasks=list(collection.task_ids),
        slots=list(collection.slots),
    )
    identity = list(range(collection.num_tasks))
    for slot in collection.slots:
        rng = Rng(cfg.seed ^ stable_hash64(slot.label()))
        adapters = collection.adapters_at(slot)
        if collection.kind == "lora":
            a_tensors = [ad.a for ad in adapters]
            merged_a = _merge_tensors(a_tensors, cfg, rng)
            if cfg.merge_target is MergeTarget.PER_MATRIX:
                merged_b = _merge_tensors([ad.b for ad in adapters], cfg, rng)
                bundle.entries[slot] = MergedAdapterSlot(
                    LowRankAdapter(b=merged_b, a=merged_a)
                )
            else:
                bundle.entries[slot] = SharedLoraSlot(
                    a_shared=merged_a,
                    b_clusters=[ad.b.copy() for ad in adapters],
                    assignment=identity.copy(),
                )
        else:
            ld_tensors = [ad.lambda_d.reshape(-1, 1) for ad in adapters]
            merged_ld = _merge_tensors(ld_tensors, cfg, rng).ravel()
            shared_b = adapters[0].shared_b
            shared_a = adapters[0].shared_a
            if cfg.merge_target is MergeTarget.PER_MATRIX:
                lb_tensors = [ad.lambda_b.reshape(-1, 1) for ad in adapters]
                merged_lb = _merge_tensors(lb_tensors, cfg, rng).ravel()
                bundle.entries[slot] = MergedAdapterSlot(
                    VeraAdapter(
                        lambda_b=merged_lb,
                        lambda_d=merged_ld,
                        shared_b=shared_b,
                        shared_a=shared_a,
                    )
                )
            else:
                bundle.entries[slot] = SharedVeraSlot(
                    lambda_d=merged_ld,
                    lambda_b_clusters=[ad.lambda_b.copy() for ad in adapters],
                    shared_b=shared_b,
                    shared_a=shared_a,
                    assignment=identity.copy(),
                )
    bundle.validate()
    return bundle
