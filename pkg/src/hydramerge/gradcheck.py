"""Finite-difference verification of every analytic gradient.

Random instances are drawn away from the non-smooth points of the
distances (all residual entries must exceed a magnitude floor), the
analytic gradients are compared against central differences tensor by
tensor, and the worst relative error is reported.  Relative error for a
tensor pair (analytic a, numeric f) is

    max|a - f| / max(max|a|, max|f|, 1e-12)
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .adapters import LowRankAdapter, VeraAdapter
from .errors import ValidationError
from .hydra import (
    HydraConfig,
    HydraState,
    VeraHydraState,
    _loss_and_grads_lora,
    _loss_and_grads_vera,
    _target_matrices,
    init_state,
    init_vera_state,
)
from .linalg import DistanceKind, Rng, finite_diff, gaussian_sample

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-5
RESIDUAL_FLOOR = 1e-3
# Routing smoothness for crafted instances: at tiny temperatures a cluster
# can receive ~1e-10 total weight, making its true gradient smaller than
# central differences can resolve against an O(1) loss.  1.25 keeps every
# weight well above that while still exposing a wrong 1/T factor.
CHECK_TEMPERATURE = 1.25
WEIGHT_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    tolerance: float
    instances: int = 0
    worst: float = 0.0
    worst_case: str = ""
    per_kind: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def record(self, kind: str, label: str, error: float) -> None:
        self.per_kind[kind] = max(self.per_kind.get(kind, 0.0), error)
        if error > self.worst:
            self.worst = error
            self.worst_case = label

    def to_dict(self) -> dict:
        return {
            "instances": self.instances,
            "tolerance": self.tolerance,
            "max_rel_error": self.worst,
            "worst_case": self.worst_case,
            "per_kind": dict(sorted(self.per_kind.items())),
            "passed": self.passed,
        }


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _min_residual(mats, preds) -> float:
    return min(float(np.min(np.abs(m - p))) for m, p in zip(mats, preds))


def _random_lora_instance(rng: Rng, d, k, r, num_tasks, num_clusters, cfg_kind):
    """Targets plus a perturbed state whose residuals stay off the kinks."""
    for _ in range(200):
        targets = [
            LowRankAdapter(
                b=gaussian_sample(rng, d, r, 0.0, 1.0),
                a=gaussian_sample(rng, r, k, 0.0, 1.0),
            )
            for _ in range(num_tasks)
        ]
        cfg = HydraConfig(
            num_clusters=num_clusters, distance=cfg_kind, temperature=CHECK_TEMPERATURE
        )
        state = HydraState(
            a_shared=gaussian_sample(rng, r, k, 0.0, 1.0),
            b_clusters=[gaussian_sample(rng, d, r, 0.0, 1.0) for _ in range(num_clusters)],
            logits=(
                gaussian_sample(rng, num_tasks, num_clusters, 0.0, 1.0)
                if num_clusters < num_tasks
                else None
            ),
        )
        mats = _target_matrices(targets)
        from .hydra import _lora_predictions
        from .linalg import softmax_rows

        _, _, preds = _lora_predictions(state, cfg, num_tasks)
        if _min_residual(mats, preds) <= RESIDUAL_FLOOR:
            continue
        if state.logits is not None:
            weights = softmax_rows(state.logits, cfg.temperature)
            if float(weights.min()) <= WEIGHT_FLOOR:
                continue
        return targets, state, cfg
    raise ValidationError("could not sample an instance away from the residual floor")


def _random_vera_instance(rng: Rng, d, k, r, num_tasks, num_clusters, cfg_kind):
    for _ in range(200):
        shared_b = gaussian_sample(rng, d, r, 0.0, 1.0)
        shared_a = gaussian_sample(rng, r, k, 0.0, 1.0)
        targets = [
            VeraAdapter(
                lambda_b=gaussian_sample(rng, d, 1, 0.0, 1.0).ravel(),
                lambda_d=gaussian_sample(rng, r, 1, 0.0, 1.0).ravel(),
                shared_b=shared_b,
                shared_a=shared_a,
            )
            for _ in range(num_tasks)
        ]
        cfg = HydraConfig(
            num_clusters=num_clusters, distance=cfg_kind, temperature=CHECK_TEMPERATURE
        )
        state = VeraHydraState(
            lambda_d=gaussian_sample(rng, r, 1, 0.0, 1.0).ravel(),
            lambda_b_clusters=[
                gaussian_sample(rng, d, 1, 0.0, 1.0).ravel() for _ in range(num_clusters)
            ],
            logits=(
                gaussian_sample(rng, num_tasks, num_clusters, 0.0, 1.0)
                if num_clusters < num_tasks
                else None
            ),
            shared_b=shared_b,
            shared_a=shared_a,
        )
        mats = _target_matrices(targets)
        preds = _vera_predictions(state, cfg, num_tasks)
        if _min_residual(mats, preds) <= RESIDUAL_FLOOR:
            continue
        if state.logits is not None:
            from .linalg import softmax_rows

            weights = softmax_rows(state.logits, cfg.temperature)
            if float(weights.min()) <= WEIGHT_FLOOR:
                continue
        return targets, state, cfg
    raise ValidationError("could not sample an instance away from the residual floor")


def _vera_predictions(state: VeraHydraState, cfg: HydraConfig, num_tasks: int):
    from .linalg import softmax_rows

    inner = (state.shared_b * state.lambda_d[None, :]) @ state.shared_a
    products = [lb[:, None] * inner for lb in state.lambda_b_clusters]
    if state.logits is None:
        return products
    weights = softmax_rows(state.logits, cfg.temperature)
    stacked = np.stack(products)
    return [np.tensordot(weights[i], stacked, axes=(0, 0)) for i in range(num_tasks)]


def _check_state(state, mats, cfg, loss_and_grads, report, label, step):
    _, _, grads = loss_and_grads(state, mats, cfg)
    for name, tensor in state.named_tensors():
        probe = copy.deepcopy(state)
        probe_tensor = dict(probe.named_tensors())[name]

        def loss_at(replacement, _ref=probe_tensor, _shape=tensor.shape):
            _ref[...] = replacement.reshape(_shape)
            return loss_and_grads(probe, mats, cfg)[0]

        shaped = tensor if tensor.ndim == 2 else tensor.reshape(-1, 1)
        numeric = finite_diff(loss_at, shaped, h=step).reshape(tensor.shape)
        analytic = grads.tensors[name]
        report.record(cfg.distance.value, f"{label}:{name}", _relative_error(analytic, numeric))


def run_suite(
    seed: int = 0,
    instances: int = 20,
    d: int = 8,
    k: int = 8,
    r: int = 2,
    num_tasks: int = 3,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    include_vera: bool = True,
) -> GradCheckReport:
    """Compare analytic and finite-difference gradients on random instances.

    Alternates between routed (M < K) and identity-routed (M == K)
    instances and covers all four distances for both adapter variants.
    """
    report = GradCheckReport(tolerance=tolerance)
    rng = Rng(seed)
    for index in range(instances):
        num_clusters = 2 if index % 2 == 0 else num_tasks
        for kind in DistanceKind:
            targets, state, cfg = _random_lora_instance(
                rng, d, k, r, num_tasks, num_clusters, kind
            )
            mats = _target_matrices(targets)
            _check_state(
                state, mats, cfg, _loss_and_grads_lora, report,
                f"lora[{index}] M={num_clusters} {kind.value}", step,
            )
            if include_vera:
                targets, state, cfg = _random_vera_instance(
                    rng, d, k, r, num_tasks, num_clusters, kind
                )
                mats = _target_matrices(targets)
                _check_state(
                    state, mats, cfg, _loss_and_grads_vera, report,
                    f"vera[{index}] M={num_clusters} {kind.value}", step,
                )
        report.instances += 1
    return report
