"""Hypothesis verification and diagnostics for the solver theory.

Everything here is pure: sampling takes an explicit seed, nothing touches
global state.  Gamma estimates are sampled lower bounds of a supremum and
are labeled as such; a bound that comes back >= 1 means the gradient
discrepancy condition could not be certified on the region.
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    GradientVanished,
    HypothesisViolated,
    OutOfDomain,
    RankDeficient,
    SizeCapExceeded,
)

#: entries cap (rows * cols) for dense SVDs, ~2000 x 2000
DEFAULT_SVD_SIZE_CAP = 4_000_000

VERDICT_HOLDS = "holds"
VERDICT_FAILS = "fails"
VERDICT_NOT_CHECKED = "not-checked"


# ---------------------------------------------------------------------------
# relative gradient discrepancy
# ---------------------------------------------------------------------------


@dataclass
class RgdcEstimate:
    """Sampled lower bound of sup ||g_j(x1) - g_j(x2)|| / ||g_j(x1)||.

    ``gamma_hat`` is a lower bound of the true supremum over the region; the
    worst pair reproduces it on re-evaluation.
    """

    gamma_hat: float
    n_points: int
    region_lo: np.ndarray
    region_hi: np.ndarray
    worst_x1: np.ndarray
    worst_x2: np.ndarray
    worst_component: int
    lower_bound: bool = True


def gamma_on_points(system, points):
    """Max discrepancy ratio over all ordered point pairs and components.

    Returns ``(gamma, (x1, x2, j))``.  The returned gamma is re-derived from
    the winning pair with a direct norm computation, so re-evaluating the
    pair reproduces it exactly.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise DimensionMismatch("need at least two points of shape (n, dim)")
    n = pts.shape[0]
    best = (-1.0, 0, 1, 1)  # (gamma, i1, i2, j)
    for j in range(1, system.n_components + 1):
        grads = np.empty((n, system.dim))
        for i in range(n):
            _, grads[i] = system.eval_component(j, pts[i])
        g2 = np.einsum("ij,ij->i", grads, grads)
        if np.any(g2 < 1e-28):
            raise GradientVanished(
                f"sampled gradient norm below 1e-14 for component {j}", component=j
            )
        # Gram-based pair distances for the scan; exact recompute at the end
        d2 = g2[:, None] + g2[None, :] - 2.0 * (grads @ grads.T)
        np.maximum(d2, 0.0, out=d2)
        ratio2 = d2 / g2[:, None]
        np.fill_diagonal(ratio2, -1.0)
        i1, i2 = np.unravel_index(int(np.argmax(ratio2)), ratio2.shape)
        cand = float(np.sqrt(max(ratio2[i1, i2], 0.0)))
        if cand > best[0]:
            best = (cand, i1, i2, j)
    _, i1, i2, j = best
    _, g1 = system.eval_component(j, pts[i1])
    _, g2v = system.eval_component(j, pts[i2])
    gamma = float(np.linalg.norm(g1 - g2v) / np.linalg.norm(g1))
    return gamma, (pts[i1].copy(), pts[i2].copy(), j)


def _latin_hypercube(rng, n, lo, hi):
    dim = lo.shape[0]
    u = (rng.permuted(np.tile(np.arange(n), (dim, 1)), axis=1).T + rng.random((n, dim))) / n
    return lo + u * (hi - lo)


def estimate_gamma(system, region, samples=200, seed=0, refine_rounds=2):
    """Sampled lower bound of the discrepancy constant over a box region.

    Latin-hypercube points (plus box corners in low dimension) seed a global
    scan; `refine_rounds` rounds of shrinking local clouds around the worst
    pair sharpen it.  The result is a lower bound of the true supremum.
    """
    lo = np.asarray(region[0], dtype=float)
    hi = np.asarray(region[1], dtype=float)
    if lo.shape != (system.dim,) or hi.shape != (system.dim,):
        raise DimensionMismatch("region bounds must have shape (dim,)")
    if not np.all(hi > lo):
        raise OutOfDomain("region is degenerate (needs hi > lo in every axis)")
    if samples < 2:
        raise OutOfDomain("need samples >= 2")

    rng = np.random.default_rng(seed)
    pts = _latin_hypercube(rng, samples, lo, hi)
    if 2**system.dim <= 256:
        corners = np.array(list(itertools.product(*zip(lo, hi))), dtype=float)
        pts = np.vstack([pts, corners])
    n_total = pts.shape[0]

    gamma, (x1, x2, j) = gamma_on_points(system, pts)
    span = hi - lo
    for round_ in range(refine_rounds):
        radius = 0.5 ** (round_ + 2)
        local = []
        for center in (x1, x2):
            cloud = center + (rng.random((16, system.dim)) - 0.5) * radius * span
            local.append(np.clip(cloud, lo, hi))
        cand = np.vstack([x1[None, :], x2[None, :]] + local)
        n_total += cand.shape[0] - 2
        g2, (y1, y2, j2) = gamma_on_points(system, cand)
        if g2 > gamma:
            gamma, x1, x2, j = g2, y1, y2, j2

    return RgdcEstimate(
        gamma_hat=gamma,
        n_points=n_total,
        region_lo=lo,
        region_hi=hi,
        worst_x1=x1,
        worst_x2=x2,
        worst_component=j,
    )


def rgdc_consequences_check(grad_pairs, gamma, slack=1e-12):
    """Check the angle/length consequences of the discrepancy condition.

    For each pair (g1, g2): cos-angle >= 1 - gamma^2/2, and the norms bound
    each other within factors (1 -+ gamma) in both orientations, each with
    the given slack.
    """
    if not 0.0 <= gamma < 1.0:
        raise OutOfDomain("gamma must lie in [0, 1)")
    for g1, g2 in grad_pairs:
        g1 = np.asarray(g1, dtype=float)
        g2 = np.asarray(g2, dtype=float)
        n1 = float(np.linalg.norm(g1))
        n2 = float(np.linalg.norm(g2))
        if n1 < 1e-14 or n2 < 1e-14:
            raise GradientVanished("gradient pair contains a (near-)zero gradient")
        cos = float(g1 @ g2) / (n1 * n2)
        if cos < 1.0 - gamma * gamma / 2.0 - slack:
            return False
        if not (1.0 - gamma) * n2 - slack * n2 <= n1 <= (1.0 + gamma) * n2 + slack * n2:
            return False
        if not (1.0 - gamma) * n1 - slack * n1 <= n2 <= (1.0 + gamma) * n1 + slack * n1:
            return False
    return True


# ---------------------------------------------------------------------------
# scaled condition number and rate bound
# ---------------------------------------------------------------------------


def kappa_f(matrix, size_cap=DEFAULT_SVD_SIZE_CAP):
    """Frobenius norm over smallest singular value of a full-column-rank matrix."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch("expected a 2-d matrix")
    if a.size > size_cap:
        raise SizeCapExceeded(
            f"matrix has {a.size} entries, above the dense-SVD cap {size_cap}"
        )
    rows, cols = a.shape
    if rows < cols:
        raise RankDeficient(f"{rows}x{cols} matrix cannot have full column rank")
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0 or s[-1] < 1e-12 * s[0]:
        raise RankDeficient(
            f"smallest singular value {s[-1]:.3e} below 1e-12 * {s[0]:.3e}"
        )
    return float(np.linalg.norm(a, "fro") / s[-1])


def c_of_gamma(gamma):
    """Residual contraction factor gamma + gamma^2/2 - gamma^3/2, in [0, 1)."""
    if not 0.0 <= gamma < 1.0:
        raise OutOfDomain(f"gamma={gamma} not in [0, 1)")
    return gamma + gamma * gamma / 2.0 - gamma**3 / 2.0


@dataclass
class RateBound:
    """Linear contraction factor and the hypothesis it was derived under."""

    rho: float
    gamma_kappa: float
    hypothesis_bound: float
    hypothesis_holds: bool = True


def rate_bound(theta, tau, gamma, kappa):
    """Per-iteration distance contraction bound for the threshold strategy.

    rho = sqrt(1 - tau * theta^2 * (1 - gamma*kappa)^2 / ((1+gamma)^2 kappa^2)),
    valid when gamma*kappa <= theta(1-tau) / (2 + theta(1-tau)); raises
    HypothesisViolated otherwise.
    """
    if not 0.0 < theta <= 1.0:
        raise OutOfDomain("theta must lie in (0, 1]")
    if not 0.0 < tau < 1.0:
        raise OutOfDomain("tau must lie in (0, 1)")
    if not 0.0 <= gamma < 1.0:
        raise OutOfDomain("gamma must lie in [0, 1)")
    if kappa < 1.0:
        raise OutOfDomain("kappa must be >= 1")
    bound = theta * (1.0 - tau) / (2.0 + theta * (1.0 - tau))
    gk = gamma * kappa
    if gk > bound:
        raise HypothesisViolated(
            f"gamma*kappa = {gk:.6g} exceeds theta(1-tau)/(2+theta(1-tau)) = {bound:.6g}",
            gamma_kappa=gk,
            bound=bound,
        )
    term = tau * theta * theta * (1.0 - gk) ** 2 / ((1.0 + gamma) ** 2 * kappa * kappa)
    rho = float(np.sqrt(max(1.0 - term, 0.0)))
    return RateBound(rho=rho, gamma_kappa=gk, hypothesis_bound=bound)


# ---------------------------------------------------------------------------
# determinant-sign condition and curvature diagnostic
# ---------------------------------------------------------------------------


def _det(m):
    # exact cofactor expansion for the small orders that dominate here
    n = m.shape[0]
    if n == 1:
        return float(m[0, 0])
    if n == 2:
        return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])
    if n == 3:
        return float(
            m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
            - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
            + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
        )
    return float(np.linalg.det(m))


def det_sign_products(S, B):
    """Yield (subset, det(S[:,a]) * det(B[:,a])) over all column subsets of size P."""
    S = np.asarray(S, dtype=float)
    B = np.asarray(B, dtype=float)
    if S.ndim != 2 or B.ndim != 2 or S.shape[0] != B.shape[0] or S.shape[1] != B.shape[1]:
        raise DimensionMismatch("S and B must both be (P, M) with P = D")
    p, m = S.shape
    if m < p:
        raise DimensionMismatch("need at least P columns")
    for alpha in itertools.combinations(range(m), p):
        idx = list(alpha)
        yield alpha, _det(S[:, idx]) * _det(B[:, idx])


def det_sign_condition(S, B, tol=1e-14):
    """True iff all subset determinant products share one sign (within tol)."""
    all_nonneg = True
    all_nonpos = True
    for _, prod in det_sign_products(S, B):
        if prod < -tol:
            all_nonneg = False
        if prod > tol:
            all_nonpos = False
        if not (all_nonneg or all_nonpos):
            return False
    return True


def det_sign_evidence(S, B, tol=1e-14):
    """Verdict plus witness subsets of each sign (for reports)."""
    first_pos = None
    first_neg = None
    for alpha, prod in det_sign_products(S, B):
        if prod > tol and first_pos is None:
            first_pos = (list(alpha), prod)
        if prod < -tol and first_neg is None:
            first_neg = (list(alpha), prod)
        if first_pos is not None and first_neg is not None:
            break
    holds = first_pos is None or first_neg is None
    return {
        "holds": holds,
        "positive_witness": first_pos,
        "negative_witness": first_neg,
    }


def mean_curvature(gradient, hessian):
    """Mean curvature of the level set: (tr(H) - n^T H n) / ||g||, n = g/||g||.

    A strictly positive value at any point certifies the component-wise
    tangential cone condition fails in a neighborhood.
    """
    g = np.asarray(gradient, dtype=float)
    h = np.asarray(hessian, dtype=float)
    gn = float(np.linalg.norm(g))
    if gn < 1e-14:
        raise GradientVanished("gradient norm below 1e-14")
    if h.shape != (g.shape[0], g.shape[0]):
        raise DimensionMismatch("hessian shape does not match gradient length")
    if np.max(np.abs(h - h.T)) > 1e-10:
        raise OutOfDomain("hessian is not symmetric within 1e-10")
    n = g / gn
    return float((np.trace(h) - n @ h @ n) / gn)


# ---------------------------------------------------------------------------
# condition report
# ---------------------------------------------------------------------------


@dataclass
class ConditionReport:
    """Bundle of hypothesis checks with tri-state verdicts and evidence."""

    kappa_samples: list = field(default_factory=list)
    gamma_hat: float | None = None
    gamma_b_upper: float | None = None
    gamma_b_tilde: float | None = None
    det_sign: bool | None = None
    det_sign_witness: dict | None = None
    rate_rho: float | None = None
    rate_gamma_kappa: float | None = None
    rate_hypothesis_bound: float | None = None
    curvature_samples: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def set_verdict(self, name, status, evidence=""):
        if status not in (VERDICT_HOLDS, VERDICT_FAILS, VERDICT_NOT_CHECKED):
            raise OutOfDomain(f"bad verdict status {status!r}")
        self.verdicts[name] = {"status": status, "evidence": evidence}

    def to_json_dict(self):
        return {
            "kappa_f": [float(v) for v in self.kappa_samples],
            "gamma_hat": None if self.gamma_hat is None else float(self.gamma_hat),
            "gamma_b": {
                "upper": None if self.gamma_b_upper is None else float(self.gamma_b_upper),
                "tilde": None if self.gamma_b_tilde is None else float(self.gamma_b_tilde),
            },
            "det_sign": self.det_sign,
            "det_sign_witness": self.det_sign_witness,
            "rate_bound": {
                "rho": None if self.rate_rho is None else float(self.rate_rho),
                "gamma_kappa": None
                if self.rate_gamma_kappa is None
                else float(self.rate_gamma_kappa),
                "hypothesis_bound": None
                if self.rate_hypothesis_bound is None
                else float(self.rate_hypothesis_bound),
            },
            "curvature_samples": [float(v) for v in self.curvature_samples],
            "verdicts": self.verdicts,
            "notes": list(self.notes),
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_json_dict(), indent=indent, sort_keys=True)

    def to_text(self):
        lines = ["condition report", "----------------"]
        if self.gamma_b_upper is not None:
            lines.append(f"gamma_B upper bound (certified): {self.gamma_b_upper:.6g}")
        if self.gamma_b_tilde is not None:
            lines.append(f"gamma_B closed form (dominant columns): {self.gamma_b_tilde:.6g}")
        if self.gamma_hat is not None:
            lines.append(f"sampled gamma lower bound: {self.gamma_hat:.6g}")
        if self.det_sign is not None:
            lines.append(f"determinant-sign condition: {'holds' if self.det_sign else 'FAILS'}")
            if not self.det_sign and self.det_sign_witness:
                lines.append(f"  witness subsets: {self.det_sign_witness}")
        if self.kappa_samples:
            ks = np.asarray(self.kappa_samples)
            lines.append(
                f"kappa_F samples: n={ks.size} min={ks.min():.6g} "
                f"median={np.median(ks):.6g} max={ks.max():.6g}"
            )
        if self.rate_rho is not None:
            lines.append(f"rate bound rho: {self.rate_rho:.6g}")
        elif self.rate_gamma_kappa is not None:
            lines.append(
                f"rate hypothesis fails: gamma*kappa = {self.rate_gamma_kappa:.6g} "
                f"> {self.rate_hypothesis_bound:.6g}"
            )
        if self.curvature_samples:
            cs = np.asarray(self.curvature_samples)
            frac = float(np.mean(cs > 0.0))
            lines.append(
                f"mean-curvature samples: n={cs.size}, positive fraction {frac:.3f} "
                "(positive values certify cone-condition failure)"
            )
        for name in sorted(self.verdicts):
            v = self.verdicts[name]
            lines.append(f"verdict[{name}]: {v['status']}  {v['evidence']}")
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines)
