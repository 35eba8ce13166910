import numpy as np
import pytest

import nlkacz.spectral as sp
from nlkacz import errors, phantom, projector, recon
from nlkacz.conditions import kappa_f, rate_bound
from nlkacz.core import SelectionStrategy, StopRule
from nlkacz.recon import (
    MeasuredData,
    ddd_pipeline,
    metrics_re,
    rate_fit,
    simulate_data,
    solve_onestep,
    solve_ray_dd,
)


def model4():
    return sp.SpectralModel(
        spectra=np.array([[0.6, 0.3, 0.1, 0.0], [0.0, 0.1, 0.4, 0.5]]),
        b_matrix=np.array([[0.9, 0.6, 0.4, 0.3], [2.5, 1.4, 0.7, 0.4]]),
        energies=np.array([30.0, 55.0, 85.0, 120.0]),
    )


def shared_setup(n=12, views=10, dets=11):
    model = model4()
    grid = projector.PixelGrid.square(n, 2.0)
    geom = projector.build_parallel_geometry(views, 0.0, dets, 2.2)
    proj = projector.build_projection(grid, geom)
    truth = phantom.rasterize(phantom.demo_phantom(), grid, supersample=2)
    data = simulate_data(model, [proj, proj], truth)
    return model, grid, proj, truth, data


class TestSimulate:
    def test_zero_image_gives_zero_data(self):
        model, grid, proj, truth, _ = shared_setup()
        zero = np.zeros((2, grid.n_pixels))
        data = simulate_data(model, [proj, proj], zero)
        for sino in data.sinograms:
            assert np.max(np.abs(sino)) <= 1e-12

    def test_single_bin_reduces_to_linear_attenuation(self):
        # one energy bin: g = -(b . z), plain exponential attenuation
        model = sp.SpectralModel(
            np.array([[1.0], [1.0]]), np.array([[0.5], [1.5]]), np.array([60.0])
        )
        grid = projector.PixelGrid.square(8, 2.0)
        geom = projector.build_parallel_geometry(6, 0.0, 7, 2.2)
        proj = projector.build_projection(grid, geom)
        truth = phantom.rasterize(phantom.demo_phantom(), grid, supersample=2)
        data = simulate_data(model, [proj, proj], truth)
        z = np.stack([proj.matrix @ truth.data[d] for d in range(2)], axis=1)
        expect = -(z @ model.b_matrix[:, 0])  # single column: same for every p
        for p in range(2):
            assert np.allclose(data.sinograms[p], expect, atol=1e-12)

    def test_geometry_mismatch(self):
        model, grid, proj, truth, _ = shared_setup()
        with pytest.raises(errors.InconsistentGeometry):
            simulate_data(model, [proj], truth)


class TestSolveRayDd:
    def test_starting_at_solution_stops_immediately(self):
        model = model4()
        z_true = np.array([0.4, 0.2])
        g = np.array([sp.h_value(model, p, z_true) for p in (1, 2)])
        z, trace = solve_ray_dd(
            model, g, z_true, SelectionStrategy.max_residual(),
            StopRule(max_epochs=10, residual_tolerance=1e-12),
        )
        assert trace.n_iterations == 0
        assert np.array_equal(z, z_true)

    def test_recovers_known_point(self):
        model = model4()
        rng = np.random.default_rng(0)
        for _ in range(20):
            z_true = rng.random(2) * 2.0
            g = np.array([sp.h_value(model, p, z_true) for p in (1, 2)])
            z, trace = solve_ray_dd(
                model, g, np.zeros(2), SelectionStrategy.max_residual(),
                StopRule(max_epochs=5000, residual_tolerance=1e-13),
                z_star=z_true,
            )
            assert np.linalg.norm(z - z_true) <= 1e-10
            assert trace.termination == "residual_tolerance"
            assert trace.distances is not None

    def test_zero_data_converges_to_zero(self):
        model = model4()
        z, _ = solve_ray_dd(
            model, np.zeros(2), np.zeros(2), SelectionStrategy.max_residual(),
            StopRule(max_epochs=100, residual_tolerance=1e-14),
        )
        assert np.linalg.norm(z) <= 1e-12

    def test_epoch_budget_error(self):
        model = model4()
        g = np.array([sp.h_value(model, p, np.array([1.0, 0.5])) for p in (1, 2)])
        with pytest.raises(errors.MaxEpochs):
            solve_ray_dd(
                model, g, np.zeros(2), SelectionStrategy.max_residual(),
                StopRule(max_epochs=1, residual_tolerance=1e-13),
            )

    def test_budget_without_tolerance_is_normal(self):
        model = model4()
        g = np.array([sp.h_value(model, p, np.array([1.0, 0.5])) for p in (1, 2)])
        _, trace = solve_ray_dd(
            model, g, np.zeros(2), SelectionStrategy.max_residual(),
            StopRule(max_epochs=3, residual_tolerance=0.0),
        )
        assert trace.termination == "max_epochs"


class TestDddPipeline:
    def test_recovers_truth(self):
        model, grid, proj, truth, data = shared_setup()
        res = ddd_pipeline(
            model, proj, data, SelectionStrategy.max_residual(),
            StopRule(max_epochs=5000, residual_tolerance=1e-13), truth=truth,
        )
        assert res.report.final_re_z <= 1e-8
        curve = res.report.re_iteration
        assert curve[-1] <= curve[10] <= curve[0]

    def test_zero_data_gives_zero_everything(self):
        model, grid, proj, truth, _ = shared_setup()
        zero_data = MeasuredData(sinograms=(np.zeros(proj.n_rays), np.zeros(proj.n_rays)))
        res = ddd_pipeline(
            model, proj, zero_data, SelectionStrategy.max_residual(),
            StopRule(max_epochs=100, residual_tolerance=1e-13),
        )
        assert np.max(np.abs(res.basis_sinograms)) <= 1e-12
        assert np.max(np.abs(res.images)) <= 1e-12

    def test_single_pixel_single_ray(self):
        # one pixel, one unit-length ray: line integrals equal the image,
        # and the affine second step is exact in <= D*P iterations
        model = model4()
        grid = projector.PixelGrid.square(1, 1.0)
        geom = projector.build_parallel_geometry(1, 0.0, 1, 1.0)
        proj = projector.build_projection(grid, geom)
        f_true = np.array([[0.6], [0.3]])
        data = simulate_data(model, [proj, proj], f_true)
        res = ddd_pipeline(
            model, proj, data, SelectionStrategy.max_residual(),
            StopRule(max_epochs=5000, residual_tolerance=1e-14),
            truth=phantom.BasisImages(data=f_true, nx=1, ny=1),
        )
        assert np.max(np.abs(res.images - f_true)) <= 1e-10
        for trace in res.step2_traces:
            assert trace.n_iterations <= 2 * 2

    def test_per_ray_failures_collected(self):
        model, grid, proj, truth, data = shared_setup()
        with pytest.raises(errors.RayFailures) as exc:
            ddd_pipeline(
                model, proj, data, SelectionStrategy.max_residual(),
                StopRule(max_epochs=1, residual_tolerance=1e-13),
            )
        assert len(exc.value.ray_indices) > 0
        assert exc.value.ray_indices == sorted(exc.value.ray_indices)

    def test_thread_counts_agree_bitwise(self):
        model, grid, proj, truth, data = shared_setup()
        results = {}
        for threads in (1, 4):
            res = ddd_pipeline(
                model, proj, data, SelectionStrategy.max_residual(),
                StopRule(max_epochs=5000, residual_tolerance=1e-13),
                truth=truth, threads=threads,
            )
            results[threads] = res
        assert np.array_equal(results[1].basis_sinograms, results[4].basis_sinograms)
        assert np.array_equal(results[1].images, results[4].images)
        assert np.array_equal(results[1].report.re_iteration, results[4].report.re_iteration)

    def test_ray_order_independence(self):
        # per-ray solves share no state: solving in any order is bit-identical
        model, grid, proj, truth, data = shared_setup(n=8, views=6, dets=7)
        from nlkacz import _kernels

        G = np.stack(data.sinograms, axis=1)
        order_a = list(range(proj.n_rays))
        order_b = order_a[::-1]
        outs = {}
        for label, order in (("a", order_a), ("b", order_b)):
            Z = np.zeros((proj.n_rays, 2))
            for j in order:
                z, *_ = _kernels.dd_solve(
                    model.spectra, model.b_matrix, G[j], np.zeros(2), None,
                    _kernels.KIND_MAX_RESIDUAL, 0.0, 0.0, 1e-13, 8000, 1e-14,
                )
                Z[j] = z
            outs[label] = Z
        assert np.array_equal(outs["a"], outs["b"])

    def test_empty_ray_with_nonzero_data_rejected(self):
        model, grid, proj, truth, data = shared_setup()
        empty = proj.empty_rays()
        assert empty.size > 0
        bad = [s.copy() for s in data.sinograms]
        bad[0][empty[0]] = 0.5
        with pytest.raises(errors.InconsistentGeometry):
            ddd_pipeline(
                model, proj, MeasuredData(sinograms=tuple(bad)),
                SelectionStrategy.max_residual(),
                StopRule(max_epochs=10, residual_tolerance=1e-13),
            )


class TestAffineRateBound:
    def test_linear_case_obeys_theoretical_contraction(self):
        # gamma = 0: the threshold-strategy bound applies to the linear system
        rng = np.random.default_rng(3)
        A = rng.normal(size=(6, 3))
        x_star = rng.normal(size=3)
        b = A @ x_star
        from nlkacz.core import affine_system, run

        system = affine_system(A, b, solution=x_star)
        theta = 1.0 / np.sqrt(6.0)
        trace = run(
            system, np.zeros(3), SelectionStrategy.theta_residual(theta),
            StopRule(max_epochs=400, residual_tolerance=1e-13),
        )
        dists = trace.distance_states(x_star)
        dists = dists[dists > 1e-12]
        fit = rate_fit(dists, burn_in=5)
        rho = rate_bound(theta, 0.5, 0.0, kappa_f(A)).rho
        assert fit.contraction < 1.0
        assert fit.contraction <= rho + 1e-6


class TestOnestep:
    def test_start_at_truth_stops_in_epoch_zero(self):
        model, grid, proj, truth, data = shared_setup()
        projs = [proj, proj]
        f, rep = solve_onestep(
            model, projs, data, truth, SelectionStrategy.max_residual(),
            StopRule(max_epochs=10, residual_tolerance=1e-10), truth=truth,
        )
        assert rep.epochs_used == 0
        assert rep.termination == "residual_tolerance"
        assert np.array_equal(f, truth.data)

    def test_converges_on_offset_geometry(self):
        model = model4()
        grid = projector.PixelGrid.square(12, 2.0)
        geoms = [projector.build_parallel_geometry(14, 0.0, 15, 2.2),
                 projector.build_parallel_geometry(14, np.pi / 96, 15, 2.2)]
        projs = [projector.build_projection(grid, g) for g in geoms]
        truth = phantom.rasterize(phantom.demo_phantom(), grid, supersample=2)
        data = simulate_data(model, projs, truth)
        f, rep = solve_onestep(
            model, projs, data, np.zeros((2, grid.n_pixels)),
            SelectionStrategy.max_residual(), StopRule(max_epochs=60), truth=truth,
        )
        assert rep.final_re_f <= 1e-1
        assert rep.final_re_g <= 5e-3
        assert np.all(np.diff(rep.re_f_epoch) <= 1e-12)

    def test_gradient_norm_factorization_on_selected_rays(self):
        # ||grad k||^2 = ||B w||^2 ||a||^2 along the solver's own path
        model, grid, proj, truth, data = shared_setup(n=8, views=6, dets=7)
        projs = [proj, proj]
        f, rep = solve_onestep(
            model, projs, data, np.zeros((2, grid.n_pixels)),
            SelectionStrategy.max_residual(), StopRule(max_epochs=2), truth=truth,
        )
        # reconstruct a couple of selected equations and check the identity
        rng = np.random.default_rng(1)
        fr = rng.random((2, grid.n_pixels))
        for j in rep.selected[:5]:
            row = (int(j) - 1) % proj.n_rays
            idx, lens = proj.row(row)
            ray = sp.SparseRay(indices=idx, lengths=lens, n_pixels=grid.n_pixels)
            z = fr[:, idx] @ lens
            gk = sp.k_gradient(model, 1, ray, fr).to_dense()
            lhs = float(gk @ gk)
            gh = sp.h_gradient(model, 1, z)
            rhs = float(gh @ gh) * ray.norm_sq()
            assert abs(lhs - rhs) <= 1e-12 * max(rhs, 1.0)

    def test_matches_dd_on_single_pixel_unit_ray(self):
        # with one pixel and a unit ray the image equation is the per-ray
        # equation; selections, residuals, and the final points coincide
        model = model4()
        grid = projector.PixelGrid.square(1, 1.0)
        geom = projector.build_parallel_geometry(1, 0.0, 1, 1.0)
        proj = projector.build_projection(grid, geom)
        assert proj.matrix.nnz == 1 and abs(proj.matrix.data[0] - 1.0) < 1e-15
        f_true = np.array([[0.7], [0.4]])
        data = simulate_data(model, [proj, proj], f_true)
        g = np.array([data.sinograms[0][0], data.sinograms[1][0]])
        stop = StopRule(max_epochs=3000, residual_tolerance=1e-12)
        z, trace = solve_ray_dd(model, g, np.zeros(2), SelectionStrategy.max_residual(), stop)
        f, rep = solve_onestep(
            model, [proj, proj], data, np.zeros((2, 1)),
            SelectionStrategy.max_residual(), stop,
        )
        assert np.max(np.abs(f.ravel() - z)) <= 1e-12
        n = min(trace.n_iterations, rep.iterations.shape[0])
        assert np.array_equal(trace.selected[:n], np.asarray(rep.selected[:n]) - 0)
        assert np.allclose(trace.residual_values[:n], rep.residual_values[:n], atol=1e-12)

    def test_residual_mode_validated(self):
        model, grid, proj, truth, data = shared_setup()
        with pytest.raises(errors.OutOfDomain):
            solve_onestep(
                model, [proj, proj], data, np.zeros((2, grid.n_pixels)),
                SelectionStrategy.max_residual(), StopRule(max_epochs=1),
                residual_mode="bogus",
            )

    def test_max_epochs_error_carries_report(self):
        model, grid, proj, truth, data = shared_setup()
        with pytest.raises(errors.MaxEpochs) as exc:
            solve_onestep(
                model, [proj, proj], data, np.zeros((2, grid.n_pixels)),
                SelectionStrategy.max_residual(),
                StopRule(max_epochs=1, residual_tolerance=1e-14),
            )
        assert exc.value.report is not None
        assert exc.value.report.epochs_used == 1


class TestMetrics:
    def test_exact_match(self):
        assert metrics_re(np.ones(4), np.ones(4)) == 0.0

    def test_double(self):
        t = np.array([1.0, 2.0])
        assert abs(metrics_re(2 * t, t) - 1.0) <= 1e-15

    def test_unit_perturbation(self):
        t = np.array([3.0, 4.0])
        cur = t.copy()
        cur[0] += np.linalg.norm(t)
        assert abs(metrics_re(cur, t) - 1.0) <= 1e-15

    def test_zero_truth(self):
        with pytest.raises(errors.ZeroTruth):
            metrics_re(np.ones(3), np.zeros(3))


class TestRateFit:
    def test_exact_geometric(self):
        curve = 0.5 ** np.arange(40)
        fit = rate_fit(curve, burn_in=0)
        assert abs(fit.contraction - 0.5) <= 1e-12
        assert abs(fit.r_squared - 1.0) <= 1e-12

    def test_constant_curve(self):
        with pytest.raises(errors.NonPositiveVariance):
            rate_fit(np.ones(30), burn_in=0)

    def test_nonpositive_values(self):
        with pytest.raises(errors.NonPositiveValues):
            rate_fit(np.concatenate([np.ones(10), [0.0], np.ones(10)]), burn_in=0)

    def test_too_short(self):
        with pytest.raises(errors.OutOfDomain):
            rate_fit(np.ones(12), burn_in=5)

    def test_noisy_geometric_recovered(self):
        rng = np.random.default_rng(123)
        truth = 0.8
        curve = truth ** np.arange(200) * np.exp(rng.normal(scale=0.01, size=200))
        fit = rate_fit(curve, burn_in=10)
        assert abs(fit.contraction - truth) <= 0.01 * truth
