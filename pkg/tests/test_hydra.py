import copy

import numpy as np
import pytest

from hydramerge.adapters import LowRankAdapter, SharedLoraSlot, VeraAdapter
from hydramerge.errors import ParameterError, ValidationError
from hydramerge.gradcheck import run_suite
from hydramerge.hydra import (
    HydraConfig,
    HydraGrads,
    HydraState,
    InitScheme,
    adamw_step,
    assign_tasks,
    gradients,
    init_state,
    init_vera_state,
    loss,
    loss_eq1,
    loss_eq2,
    train,
    train_vera,
    vera_loss,
)
from hydramerge.linalg import DistanceKind, Rng, gaussian_sample


def make_targets(num_tasks=3, d=6, r=2, k=5, seed=0):
    rng = Rng(seed)
    return [
        LowRankAdapter(
            b=gaussian_sample(rng, d, r, 0.0, 1.0),
            a=gaussian_sample(rng, r, k, 0.0, 1.0),
        )
        for _ in range(num_tasks)
    ]


def zero_moment_state(a_shared, b_clusters, logits=None):
    state = HydraState(a_shared=np.asarray(a_shared, dtype=float),
                       b_clusters=[np.asarray(b, dtype=float) for b in b_clusters],
                       logits=None if logits is None else np.asarray(logits, dtype=float))
    from hydramerge.hydra import _zero_moments

    _zero_moments(state)
    return state


class TestInitState:
    def test_identity_mode_has_no_logits(self):
        targets = make_targets(num_tasks=3)
        cfg = HydraConfig(num_clusters=3)
        state = init_state(targets, cfg, Rng(0))
        assert state.logits is None
        assert len(state.b_clusters) == 3

    def test_mean_init_on_identical_inputs_is_exact(self):
        base = make_targets(num_tasks=1)[0]
        targets = [LowRankAdapter(b=base.b.copy(), a=base.a.copy()) for _ in range(4)]
        cfg = HydraConfig(num_clusters=4, init_scheme=InitScheme.MEAN_A_COPY_B)
        state = init_state(targets, cfg, Rng(0))
        assert np.array_equal(state.a_shared, base.a)
        assert np.array_equal(state.b_clusters[2], base.b)

    def test_copy_does_not_alias_targets(self):
        targets = make_targets(num_tasks=2)
        cfg = HydraConfig(num_clusters=2, init_scheme=InitScheme.MEAN_A_COPY_B)
        state = init_state(targets, cfg, Rng(0))
        state.b_clusters[0][0, 0] += 1.0
        assert state.b_clusters[0][0, 0] != targets[0].b[0, 0]

    def test_deterministic_given_seed(self):
        targets = make_targets(num_tasks=4)
        cfg = HydraConfig(num_clusters=2, init_scheme=InitScheme.RANDOM)
        one = init_state(targets, cfg, Rng(5))
        two = init_state(targets, cfg, Rng(5))
        assert np.array_equal(one.a_shared, two.a_shared)
        assert np.array_equal(one.logits, two.logits)

    def test_too_many_clusters_rejected(self):
        with pytest.raises(ParameterError):
            init_state(make_targets(num_tasks=2), HydraConfig(num_clusters=3), Rng(0))


class TestLosses:
    def test_scalar_hand_oracle_routed(self):
        # one task, one cluster, 1x1: target 2*3 = 6, prediction 1*1 = 1
        targets = [LowRankAdapter(b=[[2.0]], a=[[3.0]])]
        state = zero_moment_state([[1.0]], [[[1.0]]], logits=[[0.0]])
        cfg = HydraConfig(num_clusters=1, distance=DistanceKind.MAE)
        value, per_task = loss_eq1(state, targets, cfg)
        assert value == 5.0
        assert per_task == [5.0]

    def test_identity_routed_fixed_point_is_exact_zero(self):
        shared_a = gaussian_sample(Rng(1), 2, 5, 0.0, 1.0)
        b_list = [gaussian_sample(Rng(i + 10), 6, 2, 0.0, 1.0) for i in range(3)]
        targets = [LowRankAdapter(b=b, a=shared_a) for b in b_list]
        state = zero_moment_state(shared_a.copy(), [b.copy() for b in b_list])
        cfg = HydraConfig(num_clusters=3)
        value, per_task = loss_eq2(state, targets, cfg)
        assert value == 0.0
        assert per_task == [0.0, 0.0, 0.0]

    def test_nonnegative_for_metric_distances(self):
        targets = make_targets()
        cfg = HydraConfig(num_clusters=3)
        state = init_state(targets, cfg, Rng(3))
        for kind in (DistanceKind.MAE, DistanceKind.MSE, DistanceKind.FRO):
            value, _ = loss(state, targets, HydraConfig(num_clusters=3, distance=kind))
            assert value >= 0.0

    def test_task_permutation_permutes_per_task(self):
        targets = make_targets(num_tasks=3)
        cfg = HydraConfig(num_clusters=3)
        state = init_state(targets, cfg, Rng(0))
        _, fwd = loss_eq2(state, targets, cfg)
        state_perm = zero_moment_state(
            state.a_shared, [state.b_clusters[i] for i in (2, 0, 1)]
        )
        _, perm = loss_eq2(state_perm, [targets[i] for i in (2, 0, 1)], cfg)
        assert perm == [fwd[i] for i in (2, 0, 1)]

    def test_mode_errors(self):
        targets = make_targets(num_tasks=3)
        routed = init_state(targets, HydraConfig(num_clusters=2), Rng(0))
        tied = init_state(targets, HydraConfig(num_clusters=3), Rng(0))
        with pytest.raises(ParameterError):
            loss_eq2(routed, targets, HydraConfig(num_clusters=2))
        with pytest.raises(ParameterError):
            loss_eq1(tied, targets, HydraConfig(num_clusters=3))

    def test_routed_equals_identity_at_frozen_one_hot(self):
        targets = make_targets(num_tasks=3, seed=7)
        cfg = HydraConfig(num_clusters=3)
        tied = init_state(targets, cfg, Rng(2))
        one_hot_logits = np.full((3, 3), 0.0)
        np.fill_diagonal(one_hot_logits, 1e6)
        routed = zero_moment_state(tied.a_shared, tied.b_clusters, logits=one_hot_logits)
        tied_value, _ = loss_eq2(tied, targets, cfg)
        routed_value, _ = loss_eq1(routed, targets, cfg)
        assert routed_value == pytest.approx(tied_value, rel=1e-9)


class TestGradients:
    def test_scalar_hand_oracle(self):
        targets = [LowRankAdapter(b=[[2.0]], a=[[3.0]])]
        state = zero_moment_state([[1.0]], [[[1.0]]], logits=[[0.0]])
        cfg = HydraConfig(num_clusters=1, distance=DistanceKind.MAE)
        grads = gradients(state, targets, cfg)
        assert grads.tensors["a_shared"] == np.array([[-1.0]])
        assert grads.tensors["b.0"] == np.array([[-1.0]])
        assert grads.tensors["logits"] == np.array([[0.0]])

    def test_zero_residual_gives_exact_zero_gradients(self):
        shared_a = gaussian_sample(Rng(1), 2, 4, 0.0, 1.0)
        b_list = [gaussian_sample(Rng(i + 20), 5, 2, 0.0, 1.0) for i in range(2)]
        targets = [LowRankAdapter(b=b, a=shared_a) for b in b_list]
        state = zero_moment_state(shared_a.copy(), [b.copy() for b in b_list])
        cfg = HydraConfig(num_clusters=2, distance=DistanceKind.MAE)
        grads = gradients(state, targets, cfg)
        for tensor in grads.tensors.values():
            assert np.array_equal(tensor, np.zeros_like(tensor))

    def test_full_suite_matches_finite_differences(self):
        report = run_suite(seed=0, instances=4)
        assert report.passed, report.to_dict()


class TestAdamW:
    def _single_param_state(self, value):
        return zero_moment_state(np.array([[value]]), [np.array([[0.0]])], logits=None)

    def test_zero_gradient_fixed_point(self):
        targets = make_targets(num_tasks=2)
        cfg = HydraConfig(num_clusters=2)
        state = init_state(targets, cfg, Rng(0))
        before = copy.deepcopy(state)
        zero = HydraGrads(
            tensors={name: np.zeros_like(t) for name, t in state.named_tensors()}
        )
        adamw_step(state, zero, cfg)
        for (_, after_t), (_, before_t) in zip(state.named_tensors(), before.named_tensors()):
            assert np.array_equal(after_t, before_t)

    def test_first_step_closed_form(self):
        cfg = HydraConfig(num_clusters=1, learning_rate=1e-3)
        state = self._single_param_state(2.0)
        g = 0.25
        grads = HydraGrads(
            tensors={
                "a_shared": np.array([[g]]),
                "b.0": np.array([[0.0]]),
            }
        )
        adamw_step(state, grads, cfg)
        # from zero moments: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
        expected = 2.0 - cfg.learning_rate * g / (abs(g) + cfg.adam_eps)
        assert state.a_shared[0, 0] == pytest.approx(expected, abs=1e-15)

    def test_deterministic(self):
        targets = make_targets(num_tasks=2)
        cfg = HydraConfig(num_clusters=2)
        one = init_state(targets, cfg, Rng(1))
        two = init_state(targets, cfg, Rng(1))
        g1 = gradients(one, targets, cfg)
        g2 = gradients(two, targets, cfg)
        adamw_step(one, g1, cfg)
        adamw_step(two, g2, cfg)
        assert np.array_equal(one.a_shared, two.a_shared)
        assert one.step == two.step == 1


class TestTrain:
    def test_zero_epochs_returns_init(self):
        targets = make_targets(num_tasks=2)
        cfg = HydraConfig(num_clusters=2, epochs=0)
        state, trace = train(targets, cfg, Rng(0))
        reference = init_state(targets, cfg, Rng(0))
        assert trace.losses == []
        assert np.array_equal(state.a_shared, reference.a_shared)

    def test_zero_loss_start_stays_bit_frozen(self):
        shared_a = gaussian_sample(Rng(4), 2, 6, 0.0, 1.0)
        b_list = [gaussian_sample(Rng(i + 30), 5, 2, 0.0, 1.0) for i in range(3)]
        targets = [LowRankAdapter(b=b, a=shared_a.copy()) for b in b_list]
        cfg = HydraConfig(
            num_clusters=3, epochs=100, init_scheme=InitScheme.MEAN_A_COPY_B
        )
        state, trace = train(targets, cfg, Rng(0))
        assert trace.losses[0] == 0.0
        assert trace.final_loss == 0.0
        assert np.array_equal(state.a_shared, shared_a)
        for got, want in zip(state.b_clusters, b_list):
            assert np.array_equal(got, want)

    def test_training_reduces_loss(self):
        targets = make_targets(num_tasks=4, d=8, r=2, k=8, seed=9)
        cfg = HydraConfig(num_clusters=2, epochs=300, learning_rate=1e-2)
        _, trace = train(targets, cfg, Rng(0))
        assert trace.final_loss < trace.losses[0]

    def test_bit_for_bit_reproducible(self):
        targets = make_targets(num_tasks=3)
        cfg = HydraConfig(num_clusters=2, epochs=25)
        one, trace_one = train(targets, cfg, Rng(11))
        two, trace_two = train(targets, cfg, Rng(11))
        assert trace_one.losses == trace_two.losses
        assert np.array_equal(one.logits, two.logits)
        assert np.array_equal(one.a_shared, two.a_shared)


class TestAssignTasks:
    def test_identity_mode(self):
        targets = make_targets(num_tasks=3)
        cfg = HydraConfig(num_clusters=3)
        state = init_state(targets, cfg, Rng(0))
        assert assign_tasks(state, cfg) == [0, 1, 2]

    def test_argmax_row(self):
        state = zero_moment_state(
            np.ones((1, 1)), [np.ones((1, 1)), np.ones((1, 1))], logits=[[0.1, 2.0]]
        )
        assert assign_tasks(state, HydraConfig(num_clusters=2)) == [1]

    def test_row_shift_does_not_change_assignment(self):
        logits = gaussian_sample(Rng(8), 4, 3, 0.0, 1.0)
        state = zero_moment_state(np.ones((1, 1)), [np.ones((1, 1))] * 3, logits=logits)
        base = assign_tasks(state, HydraConfig(num_clusters=3))
        shifted = logits.copy()
        shifted[2] += 7.0
        state_shift = zero_moment_state(np.ones((1, 1)), [np.ones((1, 1))] * 3, logits=shifted)
        assert assign_tasks(state_shift, HydraConfig(num_clusters=3)) == base

    def test_tie_breaks_to_lowest_index(self):
        state = zero_moment_state(
            np.ones((1, 1)), [np.ones((1, 1))] * 2, logits=[[3.0, 3.0]]
        )
        assert assign_tasks(state, HydraConfig(num_clusters=2)) == [0]

    def test_joint_temperature_and_logit_rescaling(self):
        logits = gaussian_sample(Rng(21), 4, 3, 0.0, 1.0)
        base = zero_moment_state(np.ones((1, 1)), [np.ones((1, 1))] * 3, logits=logits)
        scaled = zero_moment_state(
            np.ones((1, 1)), [np.ones((1, 1))] * 3, logits=5.0 * logits
        )
        cfg = HydraConfig(num_clusters=3, temperature=0.1)
        cfg_scaled = HydraConfig(num_clusters=3, temperature=0.5)
        assert assign_tasks(base, cfg) == assign_tasks(scaled, cfg_scaled)


class TestVera:
    def make_vera_targets(self, num_tasks=3, d=6, r=2, k=5, seed=0, tie_lambda_d=False):
        rng = Rng(seed)
        shared_b = gaussian_sample(rng, d, r, 0.0, 1.0)
        shared_a = gaussian_sample(rng, r, k, 0.0, 1.0)
        base_ld = gaussian_sample(rng, r, 1, 0.0, 1.0).ravel()
        targets = []
        for _ in range(num_tasks):
            ld = base_ld.copy() if tie_lambda_d else gaussian_sample(rng, r, 1, 0.0, 1.0).ravel()
            targets.append(
                VeraAdapter(
                    lambda_b=gaussian_sample(rng, d, 1, 0.0, 1.0).ravel(),
                    lambda_d=ld,
                    shared_b=shared_b,
                    shared_a=shared_a,
                )
            )
        return targets

    def test_exact_representation_has_zero_loss(self):
        targets = self.make_vera_targets(tie_lambda_d=True)
        cfg = HydraConfig(num_clusters=3, init_scheme=InitScheme.MEAN_A_COPY_B)
        state = init_vera_state(targets, cfg, Rng(0))
        value, per_task = vera_loss(state, targets, cfg)
        assert value == 0.0
        assert per_task == [0.0, 0.0, 0.0]

    def test_scalar_case_matches_lora_arithmetic(self):
        # d = r = k = 1: update is lb * b * ld * a, all scalars
        target = VeraAdapter(
            lambda_b=[2.0], lambda_d=[3.0], shared_b=[[1.5]], shared_a=[[2.0]]
        )
        cfg = HydraConfig(num_clusters=1, distance=DistanceKind.MAE)
        state = init_vera_state([target], cfg, Rng(0))
        state.lambda_b_clusters[0][0] = 1.0
        state.lambda_d[0] = 1.0
        value, _ = vera_loss(state, [target], cfg)
        # target update 2*1.5*3*2 = 18, prediction 1*1.5*1*2 = 3
        assert value == pytest.approx(15.0)

    def test_mismatched_frozen_factors_rejected(self):
        targets = self.make_vera_targets()
        rogue = VeraAdapter(
            lambda_b=targets[0].lambda_b,
            lambda_d=targets[0].lambda_d,
            shared_b=targets[0].shared_b + 1.0,
            shared_a=targets[0].shared_a,
        )
        with pytest.raises(ValidationError):
            init_vera_state([targets[0], rogue], HydraConfig(num_clusters=1), Rng(0))

    def test_training_reduces_loss(self):
        targets = self.make_vera_targets(num_tasks=4, seed=3)
        cfg = HydraConfig(num_clusters=2, epochs=200, learning_rate=1e-2)
        _, trace = train_vera(targets, cfg, Rng(0))
        assert trace.final_loss < trace.losses[0]


class TestExportShape:
    def test_shared_slot_parameter_count(self):
        d, r, k, m, num_tasks = 7, 2, 5, 3, 5
        entry = SharedLoraSlot(
            a_shared=np.zeros((r, k)),
            b_clusters=[np.zeros((d, r)) for _ in range(m)],
            assignment=[0, 1, 2, 0, 1],
        )
        assert entry.param_count == m * r * d + r * k

    def test_export_slot_from_trained_state(self):
        from hydramerge.hydra import export_slot

        d, r, k = 6, 2, 5
        targets = make_targets(num_tasks=4, d=d, r=r, k=k)
        cfg = HydraConfig(num_clusters=2, epochs=3)
        state, _ = train(targets, cfg, Rng(0))
        entry = export_slot(state, assign_tasks(state, cfg))
        assert entry.param_count == 2 * r * d + r * k
        assert len(entry.assignment) == 4

    def test_storage_ratio_examples(self):
        # equal-size factors: M=1 of 5 -> 20%, M=5 of 5 -> 60%, K -> inf: 50%
        def ratio(K, M, r, d, k):
            return 100.0 * (M * r * d + r * k) / (K * r * (d + k))

        assert ratio(5, 1, 4, 16, 16) == 20.0
        assert ratio(5, 5, 4, 16, 16) == 60.0
        assert abs(ratio(100, 100, 4, 16, 16) - 50.0) <= 0.5
