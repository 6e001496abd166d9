"""Unit tests for the exact oracles, bound checks, and instance auditing."""

import math

import numpy as np
import pytest

from aent_lab.softmax_policy import SoftmaxPolicy, TokenState
from aent_lab.theory_audit import (
    InequalityCheck,
    audit_instance,
    bound_report,
    check_advantage_centering,
    check_performance_difference,
    check_gradient_entropy_bound,
    check_stationary_suboptimality,
    check_regularized_stationary_bound,
    compute_value_tables,
    exact_entropy_and_grad,
    exact_gradient_ascent,
    exact_policy_gradient,
    finite_difference_gradient,
    gradient_relative_error,
    optimal_response_set,
    random_instance,
    soft_optimal_policy,
)
from aent_lab.token_mdp import EnumeratedTree, TokenMdp, exact_value


def uniform_bandit():
    mdp = TokenMdp.from_action_rewards(np.array([1.0, 0.0]))
    return mdp, SoftmaxPolicy(2)


class TestInequalityCheck:
    def test_le_and_eq_semantics(self):
        assert InequalityCheck("x", 1.0, 2.0, 1e-9).passed
        assert not InequalityCheck("x", 2.0, 1.0, 1e-9).passed
        assert InequalityCheck("x", 1.0, 1.0 + 1e-12, 1e-9, kind="eq").passed
        assert not InequalityCheck("x", 1.0, 1.1, 1e-9, kind="eq").passed
        assert InequalityCheck("x", 5.0, 0.0, 0.0, vacuous=True).passed

    def test_slack_sign(self):
        check = InequalityCheck("x", 0.25, 1.0, 1e-9)
        assert check.slack == 0.75


class TestExactGradientOracle:
    def test_two_action_bandit_hand_values(self):
        mdp, policy = uniform_bandit()
        grad = exact_policy_gradient(mdp, policy)
        np.testing.assert_allclose(
            grad.row(TokenState(0)), [0.25, -0.25], atol=1e-15
        )
        np.testing.assert_allclose(grad.norm(), 0.3535533905932738, atol=1e-15)

    def test_matches_finite_differences_on_random_instances(self):
        rng = np.random.default_rng(40)
        for _ in range(15):
            mdp, policy = random_instance(rng)
            for lam in (0.0, 0.37):
                analytic = exact_policy_gradient(mdp, policy, lam)
                fd = finite_difference_gradient(mdp, policy, lam)
                assert gradient_relative_error(analytic, fd) <= 1e-5

    def test_entropy_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(41)
        for _ in range(10):
            mdp, policy = random_instance(rng)
            tree = EnumeratedTree(mdp, policy)
            w = tree.root_weights()
            _, analytic = exact_entropy_and_grad(mdp, policy)
            fd = tree.to_table(tree.fd_gradient(lambda: tree.entropy(w)))
            assert gradient_relative_error(analytic, fd) <= 1e-5

    def test_relative_error_uses_a_unit_floor(self):
        from aent_lab.softmax_policy import GradientTable

        a, b = GradientTable(2), GradientTable(2)
        s = TokenState(0)
        a.add(s, np.array([1e-9, 2.0]))
        b.add(s, np.array([3e-9, 2.0]))
        # small entries are compared absolutely, not relatively
        np.testing.assert_allclose(gradient_relative_error(a, b), 2e-9, atol=1e-15)


class TestValueTables:
    def test_accessors_agree_with_direct_enumeration(self):
        rng = np.random.default_rng(42)
        mdp, policy = random_instance(rng, max_horizon=2)
        tables = compute_value_tables(mdp, policy, lam=0.2)
        tree = EnumeratedTree(mdp, policy)
        v, q, adv = tree.value_arrays(0.2)
        s = tree.states[0][0]
        assert tables.value(s) == float(v[0][0])
        assert tables.q_value(s, 1) == float(q[0][0, 1])
        assert tables.adv(s, 1) == float(adv[0][0, 1])
        with pytest.raises(ValueError):
            tables.value(TokenState(999))

    def test_visitation_is_one_hot_for_a_selected_query(self):
        rng = np.random.default_rng(43)
        mdp, policy = random_instance(rng, max_queries=3)
        q = mdp.queries[-1]
        tables = compute_value_tables(mdp, policy, query=q)
        assert tables.state_prob(mdp.root_state(q)) == 1.0
        if len(mdp.queries) > 1:
            assert tables.state_prob(mdp.root_state(mdp.queries[0])) == 0.0


class TestOptimalResponses:
    def test_ties_are_collected(self):
        mdp = TokenMdp.from_action_rewards(np.array([1.0, 1.0, 0.0]))
        seqs, v_star = optimal_response_set(mdp, 0)
        assert v_star == 1.0
        assert seqs == [(0,), (1,)]

    def test_multi_step_argmax(self):
        mdp = TokenMdp.from_action_rewards(np.array([0.0, 0.6]), horizon=2)
        seqs, v_star = optimal_response_set(mdp, 0)
        np.testing.assert_allclose(v_star, 1.2, atol=1e-12)
        assert seqs == [(1, 1)]


class TestSoftOptimalPolicy:
    def test_single_step_partition_value(self):
        mdp, _ = uniform_bandit()
        policy, tables = soft_optimal_policy(mdp, lam=1.0)
        root = TokenState(0)
        np.testing.assert_allclose(
            tables.value(root), math.log(1.0 + math.e), atol=1e-14
        )
        np.testing.assert_allclose(
            policy.probs(root),
            [math.e / (1.0 + math.e), 1.0 / (1.0 + math.e)],
            atol=1e-14,
        )

    def test_soft_optimum_has_zero_regularized_advantage(self):
        rng = np.random.default_rng(44)
        mdp, _ = random_instance(rng, max_horizon=2)
        _, tables = soft_optimal_policy(mdp, lam=0.3)
        for level in tables.advantage:
            assert float(np.abs(level).max()) < 1e-9

    def test_soft_optimum_beats_other_policies_on_the_regularized_value(self):
        rng = np.random.default_rng(45)
        mdp, other = random_instance(rng, max_horizon=2)
        lam = 0.25
        star, _ = soft_optimal_policy(mdp, lam)
        tree_star = EnumeratedTree(mdp, star)
        tree_other = EnumeratedTree(mdp, other)
        w = tree_star.root_weights()
        assert tree_star.objective(lam, w) >= tree_other.objective(lam, w) - 1e-12

    def test_lam_must_be_positive(self):
        mdp, _ = uniform_bandit()
        with pytest.raises(ValueError):
            soft_optimal_policy(mdp, 0.0)


class TestBoundChecks:
    def test_gradient_entropy_bound_on_random_instances(self):
        rng = np.random.default_rng(46)
        for _ in range(50):
            mdp, policy = random_instance(rng)
            check = check_gradient_entropy_bound(mdp, policy)
            assert check.passed, f"slack {check.slack}"

    def test_suboptimality_bound_hand_instance(self):
        mdp, policy = uniform_bandit()
        check = check_stationary_suboptimality(mdp, policy, 0)
        np.testing.assert_allclose(check.lhs, 0.5, atol=1e-12)
        np.testing.assert_allclose(
            check.rhs, 0.3535533905932738 / 0.5, atol=1e-12
        )
        assert check.passed

    def test_suboptimality_bound_is_vacuous_under_underflow(self):
        mdp = TokenMdp.from_action_rewards(np.array([1.0, 0.0]))
        policy = SoftmaxPolicy(2)
        policy.set_logits(TokenState(0), np.array([-800.0, 800.0]))
        check = check_stationary_suboptimality(mdp, policy, 0)
        assert check.vacuous
        assert check.passed
        assert check.rhs == math.inf

    def test_regularized_bound_and_bias_term(self):
        rng = np.random.default_rng(47)
        for _ in range(25):
            mdp, policy = random_instance(rng)
            check = check_regularized_stationary_bound(mdp, policy, mdp.queries[0], lam=0.1)
            assert check.passed, f"slack {check.slack}"
        with pytest.raises(ValueError):
            check_regularized_stationary_bound(mdp, policy, mdp.queries[0], lam=0.0)

    def test_performance_difference_hand_instance(self):
        mdp, uniform = uniform_bandit()
        near_greedy = SoftmaxPolicy(2)
        near_greedy.set_logits(TokenState(0), np.array([40.0, 0.0]))
        check = check_performance_difference(mdp, uniform, near_greedy, 0)
        np.testing.assert_allclose(check.lhs, -0.5, atol=1e-12)
        np.testing.assert_allclose(check.rhs, -0.5, atol=1e-12)
        assert check.passed

    def test_performance_difference_on_random_pairs(self):
        from aent_lab.theory_audit import _random_policy_for

        rng = np.random.default_rng(48)
        for _ in range(25):
            mdp, policy_a = random_instance(rng)
            policy_b = _random_policy_for(mdp, rng)
            for q in mdp.queries:
                check = check_performance_difference(mdp, policy_a, policy_b, q)
                assert check.passed, f"slack {check.slack}"

    def test_advantage_centering(self):
        rng = np.random.default_rng(49)
        for _ in range(25):
            mdp, policy = random_instance(rng)
            for lam in (0.0, 0.1):
                check = check_advantage_centering(mdp, policy, lam)
                assert check.kind == "eq"
                assert check.passed, f"worst row sum {check.lhs}"


class TestAscentAndReports:
    def test_exact_ascent_improves_the_objective(self):
        rng = np.random.default_rng(50)
        mdp, policy = random_instance(rng, max_horizon=2)
        before = exact_value(mdp, policy, mdp.queries[0])
        improved = exact_gradient_ascent(mdp, policy, lam=0.0, steps=200,
                                         learn_rate=0.5)
        after = exact_value(mdp, improved, mdp.queries[0])
        assert after > before
        # the input policy is untouched
        np.testing.assert_allclose(
            exact_value(mdp, policy, mdp.queries[0]), before, atol=1e-12
        )

    def test_ascent_shrinks_the_gradient(self):
        rng = np.random.default_rng(51)
        mdp, policy = random_instance(rng, max_horizon=2)
        start = exact_policy_gradient(mdp, policy).norm()
        settled = exact_gradient_ascent(mdp, policy, lam=0.0, steps=500,
                                        learn_rate=0.5)
        assert exact_policy_gradient(mdp, settled).norm() < start

    def test_bound_report_is_internally_consistent(self):
        rng = np.random.default_rng(52)
        mdp, policy = random_instance(rng)
        q = mdp.queries[0]
        report = bound_report(mdp, policy, q, lam=0.1)
        assert report.query == q
        assert report.optimal_set_size >= 1
        assert report.c_d == 1.0 / math.sqrt(
            sum(mdp.action_count**t for t in range(mdp.horizon))
        )
        names = [c.name for c in report.inequalities]
        assert names == [
            "gradient_entropy_bound", "stationary_suboptimality", "regularized_stationary"
        ]
        assert report.passed

    def test_audit_instance_covers_every_check(self):
        rng = np.random.default_rng(53)
        mdp, policy = random_instance(rng)
        checks = audit_instance(mdp, policy, lam=0.1, rng=rng)
        names = {c.name.split("[")[0] for c in checks}
        assert names == {
            "policy_gradient_vs_fd",
            "entropy_gradient_vs_fd",
            "gradient_entropy_bound",
            "advantage_centering",
            "stationary_suboptimality",
            "regularized_stationary",
            "performance_difference",
        }
        assert all(c.passed for c in checks)

    def test_audit_instance_can_skip_finite_differences(self):
        rng = np.random.default_rng(54)
        mdp, policy = random_instance(rng)
        checks = audit_instance(mdp, policy, include_fd=False)
        assert all("fd" not in c.name for c in checks)


class TestRandomInstance:
    def test_respects_size_caps(self):
        rng = np.random.default_rng(55)
        for _ in range(50):
            mdp, policy = random_instance(
                rng, max_actions=4, max_horizon=2, max_queries=2
            )
            assert 2 <= mdp.action_count <= 4
            assert 1 <= mdp.horizon <= 2
            assert 1 <= len(mdp.queries) <= 2
            # rewards live in the unit interval on every reachable state
            tree = EnumeratedTree(mdp, policy)
            for level in tree.rewards:
                assert np.all(level >= 0.0) and np.all(level <= 1.0)
