"""Reconstruction pipelines over the spectral measurement model.

Two routes from noiseless log-data to basis images:

* ``ddd_pipeline`` (shared-geometry data): step 1 solves one small nonlinear
  system per ray for its basis line integrals (independent rays, parallel
  map), step 2 inverts the linear projection per basis with the same
  row-action engine, where it reduces to the classical linear method.
* ``solve_onestep`` (per-spectrum geometries may differ): one row-action
  iteration over all equations, each step touching only the selected ray's
  pixel support.

Relative-error metrics follow the usual conventions: per-iteration RE of
the stacked unknowns against the simulation truth, and per-epoch RE of the
data fit.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels as kernels
from . import core, spectral
from .core import IterationTrace, SelectionStrategy, StopRule
from .errors import (
    DimensionMismatch,
    InconsistentGeometry,
    MaxEpochs,
    NonPositiveValues,
    NonPositiveVariance,
    OutOfDomain,
    RayFailures,
    ZeroTruth,
)

logger = logging.getLogger(__name__)

#: |g| above this on an empty ray means the data cannot come from this geometry
EMPTY_RAY_DATA_TOL = 1e-12

_KIND_CODE = {
    core.CYCLIC: kernels.KIND_CYCLIC,
    core.MAX_RESIDUAL: kernels.KIND_MAX_RESIDUAL,
    core.THETA_RESIDUAL: kernels.KIND_THETA,
    core.POSITIVE_CYCLIC: kernels.KIND_POSITIVE_CYCLIC,
}

_TERM_NAME = {
    kernels.TERM_TOL: core.TERM_RESIDUAL,
    kernels.TERM_MAX: core.TERM_MAX_EPOCHS,
    kernels.TERM_ZERO: core.TERM_ZERO_RESIDUAL,
}

_MODE_CODE = {"exact": kernels.MODE_EXACT, "stale": kernels.MODE_STALE,
              "recompute": kernels.MODE_RECOMPUTE}


@dataclass(frozen=True)
class MeasuredData:
    """Per-spectrum log-data sinogram vectors."""

    sinograms: tuple

    def __post_init__(self):
        sinos = tuple(np.asarray(s, dtype=float) for s in self.sinograms)
        for s in sinos:
            if s.ndim != 1 or not np.all(np.isfinite(s)):
                raise DimensionMismatch("sinograms must be finite 1-d arrays")
        object.__setattr__(self, "sinograms", sinos)

    @property
    def n_spectra(self):
        return len(self.sinograms)

    def ray_counts(self):
        return [int(s.size) for s in self.sinograms]


@dataclass
class RateFit:
    """Least-squares line on log(RE) versus iteration."""

    contraction: float
    r_squared: float
    slope: float
    n_points: int


@dataclass
class SolveReport:
    """Curves and summary numbers from one pipeline run.

    ``re_iteration`` is the per-iteration relative error of the unknowns
    (line integrals for the two-step route, images for the one-step route);
    epoch arrays carry the per-epoch image and data relative errors.
    """

    mode: str
    n_equations: int
    iterations: np.ndarray
    selected: np.ndarray | None
    residual_values: np.ndarray | None
    residual_norms: np.ndarray | None
    re_iteration: np.ndarray | None
    epoch_index: np.ndarray | None
    re_f_epoch: np.ndarray | None
    re_g_epoch: np.ndarray | None
    termination: str
    epochs_used: int
    n_fallback: int
    final_res_norm: float | None = None
    final_re_f: float | None = None
    final_re_g: float | None = None
    final_re_z: float | None = None
    wall_time_s: float = 0.0
    rate: RateFit | None = None
    condition_report: object | None = None
    notes: list = field(default_factory=list)

    def write_iteration_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("iteration,selected_index,residual,res_norm,re_metric\n")
            n = self.iterations.shape[0]
            for i in range(n):
                sel = "" if self.selected is None else str(int(self.selected[i]))
                res = "" if self.residual_values is None else repr(float(self.residual_values[i]))
                rno = "" if self.residual_norms is None else repr(float(self.residual_norms[i]))
                rem = "" if self.re_iteration is None else repr(float(self.re_iteration[i]))
                fh.write(f"{int(self.iterations[i])},{sel},{res},{rno},{rem}\n")

    def write_epoch_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,re_f,re_g\n")
            if self.epoch_index is None:
                return
            for i in range(self.epoch_index.shape[0]):
                ref = "" if self.re_f_epoch is None else repr(float(self.re_f_epoch[i]))
                reg = "" if self.re_g_epoch is None else repr(float(self.re_g_epoch[i]))
                fh.write(f"{int(self.epoch_index[i])},{ref},{reg}\n")

    def summary_dict(self):
        out = {
            "mode": self.mode,
            "n_equations": self.n_equations,
            "iterations": int(self.iterations.shape[0]),
            "epochs_used": self.epochs_used,
            "termination": self.termination,
            "n_fallback": self.n_fallback,
            "final_res_norm": self.final_res_norm,
            "final_re_f": self.final_re_f,
            "final_re_g": self.final_re_g,
            "final_re_z": self.final_re_z,
            "notes": list(self.notes),
        }
        if self.rate is not None:
            out["rate_contraction"] = self.rate.contraction
            out["rate_r_squared"] = self.rate.r_squared
        return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def metrics_re(current, truth):
    """Relative error ||current - truth|| / ||truth||."""
    cur = np.asarray(current, dtype=float).ravel()
    tru = np.asarray(truth, dtype=float).ravel()
    if cur.shape != tru.shape:
        raise DimensionMismatch("current and truth must have equal size")
    denom = float(np.linalg.norm(tru))
    if denom == 0.0:
        raise ZeroTruth("||truth|| is zero")
    return float(np.linalg.norm(cur - tru) / denom)


def rate_fit(curve, burn_in=0):
    """Per-iteration contraction exp(slope) of a log-linear fit, plus R^2."""
    y = np.asarray(curve, dtype=float)
    if burn_in < 0 or y.shape[0] - burn_in < 10:
        raise OutOfDomain("need at least 10 points after burn-in")
    y = y[burn_in:]
    if np.any(y <= 0.0):
        raise NonPositiveValues("curve must be positive for a log fit")
    x = np.arange(y.shape[0], dtype=float)
    logy = np.log(y)
    ss_tot = float(((logy - logy.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise NonPositiveVariance("constant curve: R^2 undefined")
    slope, intercept = np.polyfit(x, logy, 1)
    resid = logy - (slope * x + intercept)
    r2 = 1.0 - float((resid**2).sum()) / ss_tot
    return RateFit(
        contraction=float(np.exp(slope)), r_squared=r2, slope=float(slope),
        n_points=int(y.shape[0]),
    )


# ---------------------------------------------------------------------------
# data simulation
# ---------------------------------------------------------------------------


def _image_array(f):
    if hasattr(f, "data"):
        return np.asarray(f.data, dtype=float)
    return np.asarray(f, dtype=float)


def simulate_data(model, projections, f_true):
    """Noiseless log-data: g = h(p, A_p f) for every spectrum's ray set."""
    f = _image_array(f_true)
    if len(projections) != model.n_spectra:
        raise InconsistentGeometry(
            f"need one projection per spectrum ({model.n_spectra}), got {len(projections)}"
        )
    if f.ndim != 2 or f.shape[0] != model.d_bases:
        raise DimensionMismatch("f_true must be (D, n_pixels)")
    sinos = []
    for p in range(1, model.n_spectra + 1):
        proj = projections[p - 1]
        if proj.n_pixels != f.shape[1]:
            raise InconsistentGeometry(
                f"projection for spectrum {p} has {proj.n_pixels} pixels, image has {f.shape[1]}"
            )
        Z = np.stack([proj.matrix @ f[d] for d in range(model.d_bases)], axis=1)
        sinos.append(spectral.h_values_batch(model, p, Z))
    return MeasuredData(sinograms=tuple(sinos))


# ---------------------------------------------------------------------------
# step 1: per-ray solves
# ---------------------------------------------------------------------------


def _strategy_params(strategy, n_components):
    strategy.validate(n_components)
    return _KIND_CODE[strategy.kind], float(strategy.theta), float(strategy.eps)


def solve_ray_dd(model, g_ray, z0, strategy, stop, z_star=None):
    """Solve h(z) = g for one ray; returns (z, IterationTrace).

    Raises MaxEpochs when a positive residual tolerance was requested but
    not reached within the epoch budget (an epoch is P iterations here).
    """
    g = np.asarray(g_ray, dtype=float)
    P, D = model.n_spectra, model.d_bases
    if g.shape != (P,):
        raise DimensionMismatch(f"g_ray must have shape ({P},)")
    if P < D:
        raise DimensionMismatch("need at least as many spectra as bases (P >= D)")
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (D,):
        raise DimensionMismatch(f"z0 must have shape ({D},)")
    stop.validate()
    kind, theta, eps = _strategy_params(strategy, P)
    z, sel, val, rno, dist, term, n_fallback = kernels.dd_solve(
        model.spectra, model.b_matrix, g, z0,
        None if z_star is None else np.asarray(z_star, dtype=float),
        kind, theta, eps, stop.residual_tolerance, stop.max_epochs * P,
        stop.gradient_floor,
    )
    final_norm = float(
        np.linalg.norm([spectral.h_value(model, p, z) - g[p - 1] for p in range(1, P + 1)])
    )
    if term == kernels.TERM_MAX and stop.residual_tolerance > 0.0:
        raise MaxEpochs(
            f"per-ray solve stopped at {stop.max_epochs} epochs with residual "
            f"{final_norm:.3e} > {stop.residual_tolerance:.3e}"
        )
    trace = IterationTrace(
        iterations=np.arange(sel.shape[0], dtype=np.int64),
        selected=sel,
        residual_values=val,
        residual_norms=rno,
        distances=None if dist is None else dist[:-1].copy(),
        final_point=z,
        final_residual_norm=final_norm,
        termination=_TERM_NAME[term],
        n_components=P,
        n_fallback=n_fallback,
    )
    return z, trace


@dataclass
class DddResult:
    """Two-step pipeline output: basis sinograms, images, report."""

    basis_sinograms: np.ndarray  # (D, J)
    images: np.ndarray  # (D, n_pixels)
    report: SolveReport
    ray_iterations: np.ndarray  # (J,)
    dist_histories: list | None
    step2_traces: list


def ddd_pipeline(model, projection, data, strategy, stop, truth=None, threads=1,
                 step2_stop=None, step2_strategy=None):
    """Shared-geometry two-step reconstruction.

    Step 1 solves every ray independently (parallel map over rays; results
    are keyed by ray index, so the thread count cannot change any output).
    Step 2 runs the same engine on the affine systems A f_d = z_d, where the
    iteration degenerates to the classical linear method.  Per-ray failures
    abort the pipeline with the failing ray indices attached.
    """
    t_start = time.perf_counter()
    P, D = model.n_spectra, model.d_bases
    if data.n_spectra != P:
        raise InconsistentGeometry(f"data has {data.n_spectra} spectra, model has {P}")
    J = projection.n_rays
    for p, sino in enumerate(data.sinograms):
        if sino.size != J:
            raise InconsistentGeometry(
                f"spectrum {p + 1} sinogram has {sino.size} rays, projection has {J}"
            )
    stop.validate()
    kind, theta, eps = _strategy_params(strategy, P)
    G = np.stack(data.sinograms, axis=1)  # (J, P)

    empty = projection.empty_rays()
    if empty.size:
        bad = empty[np.max(np.abs(G[empty]), axis=1) > EMPTY_RAY_DATA_TOL]
        if bad.size:
            raise InconsistentGeometry(
                f"{bad.size} empty rays carry nonzero data (first: ray {int(bad[0])})"
            )
        logger.info("dropping %d empty rays from the linear step", empty.size)

    f_true = None if truth is None else _image_array(truth)
    Z_star = None
    if f_true is not None:
        Z_star = np.stack([projection.matrix @ f_true[d] for d in range(D)], axis=1)

    Z = np.zeros((J, D))
    iters = np.zeros(J, dtype=np.int64)
    fallbacks = np.zeros(J, dtype=np.int64)
    failures = []
    histories = [None] * J if Z_star is not None else None

    def solve_range(lo, hi):
        for j in range(lo, hi):
            zs = None if Z_star is None else Z_star[j]
            try:
                z, sel, _val, _rno, dist, term, nfb = kernels.dd_solve(
                    model.spectra, model.b_matrix, G[j], np.zeros(D), zs,
                    kind, theta, eps, stop.residual_tolerance,
                    stop.max_epochs * P, stop.gradient_floor,
                )
            except Exception as exc:  # collected, re-raised together
                failures.append((j, exc))
                continue
            if term == kernels.TERM_MAX and stop.residual_tolerance > 0.0:
                failures.append((j, MaxEpochs(f"ray {j} hit the epoch budget")))
                continue
            Z[j] = z
            iters[j] = sel.shape[0]
            fallbacks[j] = nfb
            if histories is not None:
                histories[j] = dist

    n_chunks = max(1, int(threads))
    bounds = np.linspace(0, J, n_chunks + 1).astype(int)
    if n_chunks == 1:
        solve_range(0, J)
    else:
        with ThreadPoolExecutor(max_workers=n_chunks) as pool:
            futs = [pool.submit(solve_range, bounds[i], bounds[i + 1]) for i in range(n_chunks)]
            for fut in futs:
                fut.result()
    if failures:
        failures.sort(key=lambda t: t[0])
        raise RayFailures(
            f"{len(failures)} of {J} per-ray solves failed "
            f"(first: ray {failures[0][0]}: {failures[0][1]})",
            ray_indices=[j for j, _ in failures],
            causes=[e for _, e in failures],
        )

    re_z_curve = None
    final_re_z = None
    if histories is not None:
        denom = float(np.sqrt((Z_star**2).sum()))
        if denom > 0.0:
            k_max = max(h.shape[0] for h in histories)
            acc = np.zeros(k_max)
            for h in histories:
                acc[: h.shape[0]] += h * h
                if h.shape[0] < k_max:
                    acc[h.shape[0]:] += h[-1] * h[-1]
            re_z_curve = np.sqrt(acc) / denom
            final_re_z = float(re_z_curve[-1])

    # step 2: invert the linear projection per basis with the same engine
    keep = np.nonzero(np.diff(projection.matrix.indptr) > 0)[0]
    A = projection.matrix[keep]
    step2_stop = step2_stop or StopRule(max_epochs=50)
    step2_strategy = step2_strategy or SelectionStrategy.cyclic()
    images = np.zeros((D, projection.n_pixels))
    step2_traces = []
    for d in range(D):
        system = _sparse_affine_system(A, Z[keep, d])
        trace = core.run(system, np.zeros(projection.n_pixels), step2_strategy, step2_stop)
        images[d] = trace.final_point
        step2_traces.append(trace)

    n_iter_total = int(iters.sum())
    epochs_used = int(np.ceil(iters.max() / P)) if J else 0
    report = SolveReport(
        mode="dd",
        n_equations=J * P,
        iterations=np.arange(0 if re_z_curve is None else re_z_curve.shape[0], dtype=np.int64),
        selected=None,
        residual_values=None,
        residual_norms=None,
        re_iteration=re_z_curve,
        epoch_index=None,
        re_f_epoch=None,
        re_g_epoch=None,
        termination=core.TERM_RESIDUAL,
        epochs_used=epochs_used,
        n_fallback=int(fallbacks.sum()),
        final_re_z=final_re_z,
        wall_time_s=time.perf_counter() - t_start,
        notes=[f"total step-1 iterations: {n_iter_total}",
               f"empty rays dropped in step 2: {int(empty.size)}"],
    )
    if f_true is not None:
        try:
            report.final_re_f = metrics_re(images, f_true)
        except ZeroTruth:
            pass
    return DddResult(
        basis_sinograms=Z.T.copy(),
        images=images,
        report=report,
        ray_iterations=iters,
        dist_histories=histories,
        step2_traces=step2_traces,
    )


def _sparse_affine_system(A, b):
    """Affine ComponentSystem over a csr matrix without densifying."""
    A = A.tocsr()

    def component(j, x):
        lo, hi = A.indptr[j - 1], A.indptr[j]
        idx = A.indices[lo:hi]
        dat = A.data[lo:hi]
        grad = np.zeros(A.shape[1])
        grad[idx] = dat
        return float(dat @ x[idx] - b[j - 1]), grad

    return core.ComponentSystem(
        dim=A.shape[1],
        n_components=A.shape[0],
        eval_component=component,
        residual_vector=lambda x: A @ x - b,
    )


# ---------------------------------------------------------------------------
# one-step solver
# ---------------------------------------------------------------------------


def solve_onestep(model, projections, data, f0, strategy, stop, truth=None,
                  residual_mode="exact", record_iter=True):
    """Row-action solve of the coupled system over all spectra and rays.

    Residual bookkeeping is exact by default: a step updates the line
    integrals of every equation whose ray crosses a touched pixel, and a
    full recomputation at each epoch boundary bounds rounding drift.  The
    ``stale`` mode (epoch-cached residuals, only the stepped equation
    refreshed in between) is an opt-in approximation and is excluded from
    acceptance runs.  Returns (images, SolveReport).
    """
    t_start = time.perf_counter()
    P, D = model.n_spectra, model.d_bases
    if data.n_spectra != P or len(projections) != P:
        raise InconsistentGeometry("need one projection and one sinogram per spectrum")
    if residual_mode not in _MODE_CODE:
        raise OutOfDomain(f"residual_mode must be one of {sorted(_MODE_CODE)}")
    n_pixels = projections[0].n_pixels
    for p, proj in enumerate(projections):
        if proj.n_pixels != n_pixels:
            raise InconsistentGeometry("projections disagree on the pixel count")
        if data.sinograms[p].size != proj.n_rays:
            raise InconsistentGeometry(
                f"spectrum {p + 1}: {data.sinograms[p].size} data values for {proj.n_rays} rays"
            )
    stop.validate()

    mat = sp.vstack([proj.matrix for proj in projections], format="csr")
    g = np.concatenate(data.sinograms)
    spec_idx = np.concatenate(
        [np.full(proj.n_rays, p, dtype=np.int64) for p, proj in enumerate(projections)]
    )
    # drop empty rays (their equations are 0 = g; nonzero g is inconsistent)
    row_nnz = np.diff(mat.indptr)
    empty = np.nonzero(row_nnz == 0)[0]
    if empty.size:
        bad = empty[np.abs(g[empty]) > EMPTY_RAY_DATA_TOL]
        if bad.size:
            raise InconsistentGeometry(
                f"{bad.size} empty rays carry nonzero data (first: equation {int(bad[0])})"
            )
        logger.info("dropping %d empty rays from the one-step system", empty.size)
    keep = np.nonzero(row_nnz > 0)[0]
    orig_ids = keep  # reduced row -> original equation, 0-based
    mat = mat[keep]
    g = g[keep]
    spec_idx = spec_idx[keep]
    J = g.shape[0]

    kind, theta, eps = _strategy_params(strategy, J)
    csc = mat.tocsc()
    f0 = _image_array(f0)
    if f0.shape != (D, n_pixels):
        raise DimensionMismatch(f"f0 must be (D, n_pixels) = ({D}, {n_pixels})")
    f_star = None if truth is None else _image_array(truth)

    out = kernels.onestep_solve(
        model.spectra, model.b_matrix, spec_idx,
        mat.indptr.astype(np.int64), mat.indices.astype(np.int64), mat.data,
        csc.indptr.astype(np.int64), csc.indices.astype(np.int64), csc.data,
        g, f0, f_star, kind, theta, eps, stop.residual_tolerance,
        stop.max_epochs, stop.gradient_floor, _MODE_CODE[residual_mode],
        record_iter,
    )

    n = int(out["n_iterations"])
    selected = None
    if record_iter and out["selected"].shape[0]:
        selected = orig_ids[out["selected"] - 1] + 1  # back to original equation ids
    n_ep = out["re_g_epoch"].shape[0]
    report = SolveReport(
        mode="onestep",
        n_equations=J,
        iterations=np.arange(n, dtype=np.int64),
        selected=selected,
        residual_values=out["values"] if record_iter else None,
        residual_norms=out["res_norms"] if record_iter else None,
        re_iteration=out["re_f_iter"],
        epoch_index=np.arange(n_ep, dtype=np.int64),
        re_f_epoch=out["re_f_epoch"],
        re_g_epoch=out["re_g_epoch"],
        termination=_TERM_NAME[out["termination"]],
        epochs_used=n // J if J else 0,
        n_fallback=int(out["n_fallback"]),
        final_res_norm=out["final_res_norm"],
        final_re_f=out["final_re_f"],
        final_re_g=out["final_re_g"],
        wall_time_s=time.perf_counter() - t_start,
        notes=[f"residual_mode: {residual_mode}",
               f"empty rays dropped: {int(empty.size)}"],
    )
    if out["termination"] == kernels.TERM_MAX and stop.residual_tolerance > 0.0:
        raise MaxEpochs(
            f"one-step solve stopped at {stop.max_epochs} epochs with residual "
            f"{out['final_res_norm']:.3e} > {stop.residual_tolerance:.3e}",
            report=report,
        )
    return out["f"], report
