"""Generic nonlinear Kaczmarz engine.

Solves F(x) = 0, a system of J scalar equations in N unknowns, by
orthogonally projecting the iterate onto the linearization of one selected
equation per step:

    x' = x - F_j(x) / ||grad F_j(x)||^2 * grad F_j(x)

Components are numbered 1..J throughout the public API.  One epoch is J
consecutive iterations.  The residual vector is recomputed fresh at every
iteration; the max-residual and threshold strategies need it anyway, and
at the scales this engine targets correctness beats caching.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DimensionMismatch,
    GradientVanished,
    IndexOutOfRange,
    OutOfDomain,
    ZeroResidual,
)

logger = logging.getLogger(__name__)

CYCLIC = "cyclic"
MAX_RESIDUAL = "max_residual"
THETA_RESIDUAL = "theta_residual"
POSITIVE_CYCLIC = "positive_cyclic"

STRATEGY_KINDS = (CYCLIC, MAX_RESIDUAL, THETA_RESIDUAL, POSITIVE_CYCLIC)

#: Termination labels recorded on a trace.
TERM_RESIDUAL = "residual_tolerance"
TERM_MAX_EPOCHS = "max_epochs"
TERM_ZERO_RESIDUAL = "zero_residual"


class ComponentSystem:
    """A residual system given by per-component value/gradient callbacks.

    Parameters
    ----------
    dim : int
        Number of unknowns N.
    n_components : int
        Number of equations J.
    eval_component : callable
        ``eval_component(j, x) -> (value, gradient)`` for j in 1..J.  Must be
        deterministic and safe for concurrent read-only use.
    residual_vector : callable, optional
        Vectorized ``residual_vector(x) -> (J,) array``; must agree with the
        per-component evaluator.  Falls back to a loop when absent.
    solution : array, optional
        A known solution x*, used only for diagnostics (distance columns in
        traces); the solver never reads it to compute a step.
    """

    def __init__(self, dim, n_components, eval_component, residual_vector=None, solution=None):
        if dim < 1 or n_components < 1:
            raise DimensionMismatch("dim and n_components must be positive")
        self.dim = int(dim)
        self.n_components = int(n_components)
        self._eval = eval_component
        self._residual_vector = residual_vector
        self.solution = None if solution is None else np.asarray(solution, dtype=float)
        if self.solution is not None and self.solution.shape != (self.dim,):
            raise DimensionMismatch("solution length does not match dim")

    def eval_component(self, j, x):
        """Value and gradient of component j (1-based) at x."""
        if not 1 <= j <= self.n_components:
            raise IndexOutOfRange(f"component {j} not in 1..{self.n_components}")
        value, grad = self._eval(j, x)
        grad = np.asarray(grad, dtype=float)
        if grad.shape != (self.dim,):
            raise DimensionMismatch(
                f"gradient of component {j} has length {grad.shape}, expected ({self.dim},)"
            )
        return float(value), grad

    def residuals(self, x):
        """The full residual vector F(x), freshly evaluated."""
        if self._residual_vector is not None:
            r = np.asarray(self._residual_vector(x), dtype=float)
            if r.shape != (self.n_components,):
                raise DimensionMismatch("residual_vector returned wrong length")
            return r
        return np.array(
            [self._eval(j, x)[0] for j in range(1, self.n_components + 1)], dtype=float
        )


def affine_system(A, b, solution=None):
    """ComponentSystem for the affine system A x - b = 0."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or b.shape != (A.shape[0],):
        raise DimensionMismatch("A must be (J, N) and b (J,)")

    def component(j, x):
        row = A[j - 1]
        return float(row @ x - b[j - 1]), row.copy()

    return ComponentSystem(
        dim=A.shape[1],
        n_components=A.shape[0],
        eval_component=component,
        residual_vector=lambda x: A @ x - b,
        solution=solution,
    )


# ---------------------------------------------------------------------------
# index selection
# ---------------------------------------------------------------------------


def select_cyclic(k, n_components):
    """Cyclic sweep: component (k mod J) + 1."""
    if k < 0 or n_components < 1:
        raise OutOfDomain("need k >= 0 and n_components >= 1")
    return k % n_components + 1


def select_max_residual(residuals):
    """Lowest component index attaining max |residual|."""
    r = np.asarray(residuals, dtype=float)
    return int(np.argmax(np.abs(r))) + 1


def select_theta_residual(residuals, theta):
    """Lowest index j with |r_j| >= theta * ||r||, theta in (0, 1/sqrt(J)].

    Such an index always exists because max |r_j| >= ||r||/sqrt(J).
    """
    r = np.asarray(residuals, dtype=float)
    n = r.shape[0]
    if not 0.0 < theta <= 1.0 / np.sqrt(n):
        raise OutOfDomain(f"theta={theta} not in (0, 1/sqrt({n})]")
    norm = float(np.linalg.norm(r))
    if norm == 0.0:
        raise ZeroResidual("residual vector is zero")
    eligible = np.nonzero(np.abs(r) >= theta * norm)[0]
    if eligible.size == 0:
        # eligibility is guaranteed mathematically; rounding of theta*norm can
        # lose it by one ulp at theta = 1/sqrt(J), where argmax is the answer
        return select_max_residual(r)
    return int(eligible[0]) + 1


def select_positive_cyclic(cursor, residuals, eps=0.0):
    """First component after `cursor` with residual > eps, cyclically.

    Returns ``(component index, new cursor)``.  The scan starts at 0-based
    position `cursor`; the new cursor points just past the selection.  When a
    full sweep finds no positive residual but some |r_j| > eps, falls back to
    the max-|residual| component (logged: the positive-scan premise failed).
    Raises ZeroResidual when max |r_j| <= eps, which signals convergence.
    """
    r = np.asarray(residuals, dtype=float)
    n = r.shape[0]
    if eps < 0.0:
        raise OutOfDomain("eps must be >= 0")
    if not 0 <= cursor < n:
        raise OutOfDomain(f"cursor {cursor} not in 0..{n - 1}")
    for i in range(n):
        idx = (cursor + i) % n
        if r[idx] > eps:
            return idx + 1, (idx + 1) % n
    if np.max(np.abs(r)) <= eps:
        raise ZeroResidual("all residuals within eps of zero")
    j = select_max_residual(r)
    logger.info("positive-residual scan found none > %.3g; falling back to max |residual|", eps)
    return j, j % n


@dataclass
class SelectionStrategy:
    """Index-selection rule.  Ties always break to the lowest index.

    kind : one of cyclic, max_residual, theta_residual, positive_cyclic
    theta : threshold for theta_residual, in (0, 1/sqrt(J)]
    eps : positivity threshold for positive_cyclic
    cursor : scan state for positive_cyclic, in 0..J-1
    """

    kind: str
    theta: float = 0.0
    eps: float = 0.0
    cursor: int = 0

    @classmethod
    def cyclic(cls):
        return cls(kind=CYCLIC)

    @classmethod
    def max_residual(cls):
        return cls(kind=MAX_RESIDUAL)

    @classmethod
    def theta_residual(cls, theta):
        return cls(kind=THETA_RESIDUAL, theta=float(theta))

    @classmethod
    def positive_cyclic(cls, eps=0.0):
        return cls(kind=POSITIVE_CYCLIC, eps=float(eps))

    def copy(self):
        return replace(self)

    def validate(self, n_components):
        if self.kind not in STRATEGY_KINDS:
            raise OutOfDomain(f"unknown strategy kind {self.kind!r}")
        if self.kind == THETA_RESIDUAL:
            if not 0.0 < self.theta <= 1.0 / np.sqrt(n_components):
                raise OutOfDomain(
                    f"theta={self.theta} not in (0, 1/sqrt({n_components})]"
                )
        if not 0 <= self.cursor < n_components:
            raise OutOfDomain("cursor out of range")
        if self.eps < 0.0:
            raise OutOfDomain("eps must be >= 0")

    def select(self, k, residuals):
        """Pick a 1-based component for iteration k; mutates cursor state."""
        if self.kind == CYCLIC:
            return select_cyclic(k, len(residuals))
        if self.kind == MAX_RESIDUAL:
            return select_max_residual(residuals)
        if self.kind == THETA_RESIDUAL:
            return select_theta_residual(residuals, self.theta)
        j, self.cursor = select_positive_cyclic(self.cursor, residuals, self.eps)
        return j


# ---------------------------------------------------------------------------
# stepping and the driver loop
# ---------------------------------------------------------------------------


@dataclass
class StopRule:
    """Termination settings.

    max_epochs : epoch budget (J iterations per epoch)
    residual_tolerance : stop once ||F(x)|| falls to this value (>= 0)
    gradient_floor : minimum allowed ||grad F_j||; below it the step is
        refused with GradientVanished instead of dividing by ~0
    """

    max_epochs: int
    residual_tolerance: float = 0.0
    gradient_floor: float = 1e-14

    def validate(self):
        if self.max_epochs < 1:
            raise OutOfDomain("max_epochs must be >= 1")
        if not np.isfinite(self.residual_tolerance) or self.residual_tolerance < 0.0:
            raise OutOfDomain("residual_tolerance must be finite and >= 0")
        if not np.isfinite(self.gradient_floor) or self.gradient_floor <= 0.0:
            raise OutOfDomain("gradient_floor must be finite and > 0")


@dataclass
class IterationTrace:
    """Per-iteration record of a solver run.

    Arrays are aligned: entry i describes iteration ``iterations[i]`` at the
    pre-step point x^k.  ``distances`` is present only when the system carried
    a known solution.  ``n_fallback`` counts positive-cyclic fallback picks.
    """

    iterations: np.ndarray
    selected: np.ndarray
    residual_values: np.ndarray
    residual_norms: np.ndarray
    distances: np.ndarray | None
    final_point: np.ndarray
    final_residual_norm: float
    termination: str
    n_components: int
    n_fallback: int = 0

    @property
    def n_iterations(self):
        return int(self.iterations.shape[0])

    @property
    def epochs_completed(self):
        return self.n_iterations // self.n_components

    def final_distance(self, solution):
        return float(np.linalg.norm(self.final_point - np.asarray(solution, dtype=float)))

    def distance_states(self, solution):
        """Distances ||x^k - x*|| for k = 0..n (includes the final point)."""
        if self.distances is None:
            raise ValueError("trace carries no distance column")
        return np.concatenate([self.distances, [self.final_distance(solution)]])


def nkm_step(system, x, j, gradient_floor=1e-14):
    """One Kaczmarz projection onto the linearization of component j at x.

    Returns the projected point; the linearization
    F_j(x) + grad F_j(x)^T (x' - x) vanishes at the result up to rounding.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (system.dim,):
        raise DimensionMismatch(f"x has shape {x.shape}, expected ({system.dim},)")
    value, grad = system.eval_component(j, x)
    gnorm2 = float(grad @ grad)
    if gnorm2 < gradient_floor * gradient_floor:
        raise GradientVanished(
            f"||grad F_{j}|| = {np.sqrt(gnorm2):.3e} below floor {gradient_floor:.3e}",
            component=j,
        )
    return x - (value / gnorm2) * grad


def run(system, x0, strategy, stop):
    """Iterate the NKM from x0 until the stop rule fires.

    The trace records every executed iteration (selected index, residual
    value, residual norm, and distance to the known solution when one was
    provided).  GradientVanished propagates with the offending iteration
    attached.
    """
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (system.dim,):
        raise DimensionMismatch(f"x0 has shape {x.shape}, expected ({system.dim},)")
    n = system.n_components
    strat = strategy.copy()
    strat.validate(n)
    stop.validate()
    max_iters = stop.max_epochs * n
    floor2 = stop.gradient_floor * stop.gradient_floor
    known = system.solution is not None

    ks, js, vals, norms = [], [], [], []
    dists = [] if known else None
    n_fallback = 0
    k = 0
    while True:
        r = system.residuals(x)
        res_norm = float(np.linalg.norm(r))
        if res_norm <= stop.residual_tolerance:
            termination = TERM_RESIDUAL
            break
        if k >= max_iters:
            termination = TERM_MAX_EPOCHS
            break
        try:
            j = strat.select(k, r)
        except ZeroResidual:
            termination = TERM_ZERO_RESIDUAL
            break
        if strat.kind == POSITIVE_CYCLIC and r[j - 1] <= strat.eps:
            n_fallback += 1
        value = float(r[j - 1])
        _, grad = system.eval_component(j, x)
        gnorm2 = float(grad @ grad)
        if gnorm2 < floor2:
            raise GradientVanished(
                f"||grad F_{j}|| below floor at iteration {k}",
                iteration=k,
                component=j,
            )
        ks.append(k)
        js.append(j)
        vals.append(value)
        norms.append(res_norm)
        if known:
            dists.append(float(np.linalg.norm(x - system.solution)))
        x = x - (value / gnorm2) * grad
        k += 1

    return IterationTrace(
        iterations=np.asarray(ks, dtype=np.int64),
        selected=np.asarray(js, dtype=np.int64),
        residual_values=np.asarray(vals, dtype=float),
        residual_norms=np.asarray(norms, dtype=float),
        distances=None if dists is None else np.asarray(dists, dtype=float),
        final_point=x,
        final_residual_norm=res_norm,
        termination=termination,
        n_components=n,
        n_fallback=n_fallback,
    )
