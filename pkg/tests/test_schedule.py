import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piadm.schedule import (ContractionWarning, CorrectorPlan, DiscretizationPlan, PlanError, PlanTooLargeError,
                            PresetConstants, build_plan, check_decay_rule, contraction_margin, geometric_last_block,
                            theorem1_preset, theorem1_raw_step, theorem2_preset, theorem2_raw_step)


def test_small_plan_layout():
    plan = build_plan(4.0, 0.01, 4, 0.25, 3)
    assert np.allclose(plan.block_starts, [0, 1, 2, 3, 3.99])
    assert plan.steps_per_block[:3] == [4, 4, 4]
    assert plan.grid(3)[-1] == pytest.approx(0.99)
    assert plan.index_I(0, 0.6) == 2
    assert plan.g(0, 0.6) == pytest.approx(0.5)


def test_index_endpoint_conventions():
    plan = build_plan(4.0, 0.01, 4, 0.25, 3)
    assert plan.index_I(0, 0.0) == 0
    assert plan.index_I(0, 0.5) == 2
    assert plan.index_I(0, 1.0) == 3
    assert plan.g(0, 1.0) == pytest.approx(0.75)
    with pytest.raises(PlanError):
        plan.index_I(0, 1.2)
    with pytest.raises(PlanError):
        plan.index_I(0, -0.1)


@settings(max_examples=60, deadline=None)
@given(N=st.integers(1, 8), per_block=st.integers(1, 40), block=st.floats(0.2, 2.0),
       eta_frac=st.floats(0.001, 0.5))
def test_plans_cover_horizon(N, per_block, block, eta_frac):
    T = N * block
    eps = block / per_block
    eta = eta_frac * block * 0.9
    plan = build_plan(T, eta, N, eps, 2)
    total = sum(float(np.sum(plan.steps(n))) for n in range(plan.N))
    assert total == pytest.approx(T - eta, abs=1e-10)
    for n in range(plan.N):
        assert np.all(np.diff(plan.grid(n)) > 0)
        times = plan.times(n)
        assert times[0] == pytest.approx(plan.block_starts[n])
    check_decay_rule(plan.grid(N - 1), block, eps)


@settings(max_examples=40, deadline=None)
@given(per_block=st.integers(2, 30), seed=st.integers(0, 2 ** 16))
def test_index_and_floor_invariants(per_block, seed):
    plan = build_plan(3.0, 0.05, 3, 1.0 / per_block, 2)
    rng = np.random.default_rng(seed)
    for n in range(plan.N):
        grid = plan.grid(n)
        tau = rng.uniform(0, grid[-1], 200)
        idx = plan.index_I(n, tau)
        assert np.all(grid[idx] <= tau) and np.all(tau <= grid[idx + 1])
        assert np.array_equal(plan.g(n, tau), grid[idx])


def test_geometric_last_block_follows_decay_rule():
    h, eta, eps = 2.0, 1e-3, 0.05
    grid = geometric_last_block(h, eta, eps)
    steps = np.diff(grid)
    assert np.all(steps <= np.minimum(eps, eps * (h - grid[1:])) + 1e-15)
    assert grid[-1] == pytest.approx(h - eta)
    assert len(steps) <= math.ceil(math.log(h / eta) / eps) + math.ceil(h / eps)


def test_decay_rule_violation_is_reported():
    with pytest.raises(PlanError, match="decay rule"):
        check_decay_rule(np.array([0.0, 0.5, 0.99]), 1.0, 0.5)


@pytest.mark.parametrize("args, message", [
    ((4.0, 0.01, 4, 0.3, 2), "does not divide"),
    ((1.0, 2.0, 1, 0.1, 2), "T > eta"),
    ((4.0, 1.5, 4, 0.25, 2), "shorter than one block"),
    ((4.0, 0.01, 0, 0.25, 2), "at least one block"),
    ((4.0, 0.01, 4, 0.25, -1), "nonnegative"),
])
def test_invalid_plans(args, message):
    with pytest.raises(PlanError, match=message):
        build_plan(*args)


def test_node_cap_refuses_huge_plans():
    with pytest.raises(PlanTooLargeError, match="cap"):
        build_plan(4.0, 0.01, 4, 1e-4, 2, node_cap=1000)


def test_uniform_last_block_rule():
    plan = build_plan(2.0, 0.1, 2, 0.1, 2, last_block_rule="uniform")
    assert plan.steps_per_block[-1] == 9
    assert np.allclose(np.diff(plan.grid(1)), 0.1)


def test_round_trip_and_depth():
    plan = build_plan(3.0, 0.02, 3, 0.1, 4)
    back = DiscretizationPlan.from_dict(plan.to_dict())
    assert all(np.array_equal(a, b) for a, b in zip(back.grids, plan.grids))
    assert plan.with_depth(9).picard_depth == 9


def test_contraction_warning():
    plan = build_plan(2.0, 0.01, 2, 0.1, 2)
    with pytest.warns(ContractionWarning):
        value = contraction_margin(plan, 1.0)
    assert value == pytest.approx(math.exp(2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        contraction_margin(build_plan(2.0, 0.01, 20, 0.05, 2), 1.0)


# ---------------------------------------------------------------- presets
def test_first_preset_shape():
    plan = theorem1_preset(32, 0.1)
    assert plan.T == math.ceil(math.log(3200))
    assert plan.eta == pytest.approx(0.01)
    assert plan.picard_depth == math.ceil(math.log(3200))
    assert plan.base_step <= theorem1_raw_step(32, 0.1)
    assert plan.base_step > theorem1_raw_step(32, 0.1) / 2


def test_first_preset_depth_grows_logarithmically():
    ratio = theorem1_preset(256, 0.1, PresetConstants(c_eps=64)).picard_depth / theorem1_preset(1, 0.1).picard_depth
    assert ratio == pytest.approx(math.log(25600) / math.log(100), rel=0.15)


def test_first_preset_step_times_horizon_scales_with_accuracy_squared():
    products = [theorem1_raw_step(8, delta) * theorem1_preset(8, delta, PresetConstants(c_eps=8)).T
                for delta in (0.1, 0.05)]
    assert products[1] / products[0] == pytest.approx(0.25, rel=1e-12)


def test_second_preset_counts():
    plan, corrector = theorem2_preset(32, 0.1)
    assert corrector.M_dagger == 57
    assert plan.steps_per_block[0] == math.ceil(1.0 / theorem2_raw_step(32, 0.1))
    assert corrector.gamma == 1.0 and corrector.T_dagger == 1.0


def test_second_preset_uses_lipschitz_constant():
    _, corrector = theorem2_preset(8, 0.1, lipschitz=4.0)
    assert corrector.T_dagger == pytest.approx(0.5)
    assert corrector.gamma == pytest.approx(2.0)


def test_preset_arguments_are_validated():
    with pytest.raises(PlanError):
        theorem1_preset(0, 0.1)
    with pytest.raises(PlanError):
        theorem2_preset(4, 1.5)


def test_corrector_plan_consistency():
    cp = CorrectorPlan.build(0.6, 3, 5, 4, 1.5)
    assert cp.h_dagger == pytest.approx(0.2) and cp.eps_dagger == pytest.approx(0.04)
    assert CorrectorPlan.from_dict(cp.to_dict()) == cp
    with pytest.raises(PlanError):
        CorrectorPlan(1.0, 2, 0.4, 5, 0.08, 2)
    with pytest.raises(PlanError):
        CorrectorPlan.build(1.0, 1, 4, 2, gamma=0.0)
