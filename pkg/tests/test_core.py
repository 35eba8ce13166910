import numpy as np
import pytest

from helpers import classical_kaczmarz_iterates, convex_corpus, quadratic_system
from nlkacz import errors
from nlkacz.core import (
    ComponentSystem,
    SelectionStrategy,
    StopRule,
    affine_system,
    nkm_step,
    run,
    select_cyclic,
    select_max_residual,
    select_positive_cyclic,
    select_theta_residual,
)


def hyperplane_system():
    # F(x) = x_1 - 1 in R^2
    return ComponentSystem(2, 1, lambda j, x: (x[0] - 1.0, np.array([1.0, 0.0])))


def circle_system():
    # F(x) = x_1^2 + x_2^2 - 4
    return ComponentSystem(
        2, 1, lambda j, x: (x[0] ** 2 + x[1] ** 2 - 4.0, np.array([2 * x[0], 2 * x[1]]))
    )


class TestNkmStep:
    def test_projects_onto_hyperplane(self):
        out = nkm_step(hyperplane_system(), np.array([0.0, 0.0]), 1)
        assert np.allclose(out, [1.0, 0.0], atol=0.0)

    def test_circle_example(self):
        # F = -3, grad = (2, 0) at (1, 0): step lands at (2.5, 0)
        out = nkm_step(circle_system(), np.array([1.0, 0.0]), 1)
        assert np.allclose(out, [2.5, 0.0], atol=1e-15)

    def test_zero_residual_is_fixed_point(self):
        x = np.array([2.0, 0.0])
        out = nkm_step(circle_system(), x, 1)
        assert np.array_equal(out, x)

    def test_linearization_vanishes_at_step(self):
        rng = np.random.default_rng(7)
        for system in convex_corpus(11, 20):
            x = rng.normal(size=system.dim)
            j = int(rng.integers(1, system.n_components + 1))
            value, grad = system.eval_component(j, x)
            x2 = nkm_step(system, x, j)
            lin = value + grad @ (x2 - x)
            assert abs(lin) <= 1e-12 * (1.0 + abs(value))

    def test_gradient_floor(self):
        flat = ComponentSystem(2, 1, lambda j, x: (1.0, np.zeros(2)))
        with pytest.raises(errors.GradientVanished):
            nkm_step(flat, np.zeros(2), 1)

    def test_index_out_of_range(self):
        with pytest.raises(errors.IndexOutOfRange):
            nkm_step(hyperplane_system(), np.zeros(2), 2)


class TestSelectors:
    def test_cyclic_examples(self):
        assert select_cyclic(0, 3) == 1
        assert select_cyclic(3, 3) == 1
        assert select_cyclic(5, 3) == 3

    def test_max_residual_examples(self):
        assert select_max_residual([0.1, -0.5, 0.3]) == 2
        assert select_max_residual([0.0, 0.0, 0.0]) == 1
        assert select_max_residual([-2.0, 2.0]) == 1

    def test_theta_residual_example(self):
        # threshold = ||r|| / sqrt(3) ~ 0.34157 picks the second entry
        r = np.array([0.1, -0.5, 0.3])
        assert abs(np.linalg.norm(r) / np.sqrt(3) - 0.34157) < 1e-5
        assert select_theta_residual(r, 1.0 / np.sqrt(3)) == 2

    def test_theta_eligible_set_nonempty(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(1, 9))
            r = rng.normal(size=n)
            if np.linalg.norm(r) == 0.0:
                continue
            j = select_theta_residual(r, 1.0 / np.sqrt(n))
            assert 1 <= j <= n

    def test_theta_limit_always_admits_the_max(self):
        # at theta = 1/sqrt(J) the max-|residual| index is always eligible,
        # so the threshold rule selects it or an equally-eligible lower index
        rng = np.random.default_rng(4)
        for _ in range(300):
            n = int(rng.integers(2, 10))
            r = rng.normal(size=n)
            theta = 1.0 / np.sqrt(n)
            jmax = select_max_residual(r)
            assert abs(r[jmax - 1]) >= theta * np.linalg.norm(r) * (1.0 - 1e-15)
            j = select_theta_residual(r, theta)
            assert abs(r[j - 1]) >= theta * np.linalg.norm(r) * (1.0 - 1e-15)
            assert j <= jmax

    def test_theta_limit_matches_max_residual_for_two_components(self):
        # with J = 2 only the max can clear the 1/sqrt(2) threshold
        rng = np.random.default_rng(14)
        for _ in range(300):
            r = rng.normal(size=2)
            assert select_theta_residual(r, 1.0 / np.sqrt(2)) == select_max_residual(r)

    def test_theta_zero_residual(self):
        with pytest.raises(errors.ZeroResidual):
            select_theta_residual(np.zeros(2), 0.5)

    def test_theta_domain(self):
        with pytest.raises(errors.OutOfDomain):
            select_theta_residual(np.array([1.0, 1.0]), 0.9)

    def test_positive_cyclic_examples(self):
        j, cur = select_positive_cyclic(1, np.array([-1.0, 0.5, 0.2]))
        assert (j, cur) == (2, 2)
        j, cur = select_positive_cyclic(1, np.array([-1.0, -0.5]), eps=1e-12)
        assert j == 1  # fallback to max |residual|
        with pytest.raises(errors.ZeroResidual):
            select_positive_cyclic(0, np.array([0.0, 0.0]))


class TestRun:
    def test_orthogonal_affine_exact_in_two_steps(self):
        system = affine_system(np.eye(2), np.array([1.0, 2.0]))
        trace = run(system, np.zeros(2), SelectionStrategy.cyclic(), StopRule(max_epochs=5))
        assert trace.n_iterations == 2
        assert trace.termination == "residual_tolerance"
        assert np.array_equal(trace.final_point, [1.0, 2.0])

    def test_circles_intersection(self):
        from nlkacz.cli import circles_system

        system = circles_system()
        trace = run(
            system,
            np.array([0.6, 0.9]),
            SelectionStrategy.max_residual(),
            StopRule(max_epochs=5000, residual_tolerance=1e-14),
        )
        target = np.array([0.5, np.sqrt(3.0) / 2.0])
        assert np.linalg.norm(trace.final_point - target) <= 1e-8

    def test_gradient_vanished_carries_iteration(self):
        system = ComponentSystem(1, 1, lambda j, x: (1.0, np.zeros(1)))
        with pytest.raises(errors.GradientVanished) as exc:
            run(system, np.zeros(1), SelectionStrategy.cyclic(), StopRule(max_epochs=1))
        assert exc.value.iteration == 0
        assert exc.value.component == 1

    def test_trace_is_ordered_and_complete(self):
        system = quadratic_system(np.random.default_rng(0), 3, 5)
        trace = run(system, np.ones(3), SelectionStrategy.cyclic(), StopRule(max_epochs=4))
        assert np.all(np.diff(trace.iterations) == 1)
        assert trace.n_iterations == 4 * 5
        assert trace.termination == "max_epochs"
        assert trace.distances is not None
        assert trace.distances.shape == trace.iterations.shape

    def test_strategy_state_not_mutated(self):
        strategy = SelectionStrategy.positive_cyclic()
        system = quadratic_system(np.random.default_rng(1), 2, 4)
        run(system, np.zeros(2), strategy, StopRule(max_epochs=2))
        assert strategy.cursor == 0


class TestDegenerateAffine:
    def test_matches_independent_classical_reference(self):
        # cyclic NKM on consistent affine systems == classical Kaczmarz
        rng = np.random.default_rng(42)
        for _ in range(20):
            m = int(rng.integers(3, 9))
            n = int(rng.integers(2, min(m, 6) + 1))
            A = rng.normal(size=(m, n))
            x_star = rng.normal(size=n)
            b = A @ x_star
            system = affine_system(A, b, solution=x_star)
            n_iters = 5 * m
            trace = run(
                system, np.zeros(n), SelectionStrategy.cyclic(),
                StopRule(max_epochs=5, residual_tolerance=0.0),
            )
            ref = classical_kaczmarz_iterates(A.tolist(), b.tolist(), [0.0] * n, n_iters)
            # replay the engine's exact arithmetic (batch residual, component
            # gradient) to recover its iterates from the trace
            x = np.zeros(n)
            ours = [x.copy()]
            for k in range(min(n_iters, trace.n_iterations)):
                j = int(trace.selected[k])
                value = float(system.residuals(x)[j - 1])
                _, grad = system.eval_component(j, x)
                x = x - (value / float(grad @ grad)) * grad
                ours.append(x.copy())
            ours = np.asarray(ours)
            m_len = ours.shape[0]
            assert np.max(np.abs(ours - ref[:m_len])) <= 1e-14


class TestConvexProperties:
    def test_post_step_nonnegativity(self):
        # any selected index: the stepped component is nonnegative afterwards
        rng = np.random.default_rng(5)
        for system in convex_corpus(21, 30):
            x = rng.normal(size=system.dim)
            for k in range(10):
                j = select_cyclic(k, system.n_components)
                x = nkm_step(system, x, j)
                value, _ = system.eval_component(j, x)
                assert value >= -1e-10

    def test_monotone_distance_on_positive_steps(self):
        rng = np.random.default_rng(6)
        for system in convex_corpus(31, 20):
            x = rng.normal(size=system.dim)
            sol = system.solution
            for k in range(30):
                r = system.residuals(x)
                pos = np.nonzero(r > 0)[0]
                if pos.size == 0:
                    break
                j = int(pos[0]) + 1
                x2 = nkm_step(system, x, j)
                assert np.linalg.norm(x2 - sol) <= np.linalg.norm(x - sol) + 1e-12
                x = x2


def test_component_system_validates_gradient_length():
    bad = ComponentSystem(2, 1, lambda j, x: (0.0, np.zeros(3)))
    with pytest.raises(errors.DimensionMismatch):
        bad.eval_component(1, np.zeros(2))


def test_stop_rule_validation():
    with pytest.raises(errors.OutOfDomain):
        StopRule(max_epochs=0).validate()
    with pytest.raises(errors.OutOfDomain):
        StopRule(max_epochs=1, gradient_floor=0.0).validate()
    with pytest.raises(errors.OutOfDomain):
        StopRule(max_epochs=1, residual_tolerance=-1.0).validate()
