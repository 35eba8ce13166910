"""Spectral measurement model for multi-energy transmission data.

The model holds P normalized spectra (rows of S) over M energy bins and a
D x M positive decomposition matrix B.  The per-spectrum measurement of a
line integral vector z in R^D is

    h(p, z) = ln sum_m S[p, m] * exp(-sum_d B[d, m] * z_d)

evaluated in max-shifted (overflow-safe) form.  Its gradient is -B w with w
the spectral weight vector on the unit simplex, and its Hessian
B (diag(w) - w w^T) B^T is positive semidefinite, so every component is
convex.  The full-image equation for a ray a is k(p, a, f) = h(p, A f) with
gradient grad_h (x) a as a Kronecker block vector.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    DominanceViolated,
    EmptySupport,
    GridError,
    IndexOutOfRange,
    NonFinite,
    NotPositive,
    OutOfDomain,
    PositivityError,
    SchemaError,
)

logger = logging.getLogger(__name__)


class SpectralModel:
    """Immutable container for spectra S (P x M), decomposition B (D x M),
    and the energy-bin centers (keV).

    Rows of S must be entrywise nonnegative and sum to one within 1e-12;
    B must be entrywise positive.
    """

    def __init__(self, spectra, b_matrix, energies):
        S = np.array(spectra, dtype=float)
        B = np.array(b_matrix, dtype=float)
        e = np.array(energies, dtype=float)
        if S.ndim != 2 or B.ndim != 2:
            raise DimensionMismatch("spectra and b_matrix must be 2-d")
        if S.shape[1] != B.shape[1]:
            raise DimensionMismatch(
                f"bin counts differ: spectra {S.shape[1]} vs decomposition {B.shape[1]}"
            )
        if e.shape != (S.shape[1],):
            raise DimensionMismatch("energies must have one entry per bin")
        if e.size > 1 and not np.all(np.diff(e) > 0):
            raise GridError("energy grid is not strictly increasing")
        if np.any(S < 0):
            raise SchemaError("spectrum weights must be nonnegative")
        sums = S.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise SchemaError(
                f"spectrum rows must sum to 1 within 1e-12 (got {sums})"
            )
        if np.any(B <= 0):
            raise PositivityError("decomposition matrix must be entrywise positive")
        for a in (S, B, e):
            a.setflags(write=False)
        self.spectra = S
        self.b_matrix = B
        self.energies = e

    @property
    def n_spectra(self):
        return self.spectra.shape[0]

    @property
    def d_bases(self):
        return self.b_matrix.shape[0]

    @property
    def n_bins(self):
        return self.spectra.shape[1]

    def spectrum_row(self, p):
        if not 1 <= p <= self.n_spectra:
            raise IndexOutOfRange(f"spectrum {p} not in 1..{self.n_spectra}")
        return self.spectra[p - 1]

    def __repr__(self):
        return (
            f"SpectralModel(P={self.n_spectra}, D={self.d_bases}, M={self.n_bins}, "
            f"energies=[{self.energies[0]:g}..{self.energies[-1]:g}] keV)"
        )


def _check_z(model, z):
    z = np.asarray(z, dtype=float)
    if z.shape != (model.d_bases,):
        raise DimensionMismatch(f"z must have shape ({model.d_bases},)")
    if not np.all(np.isfinite(z)):
        raise NonFinite("z contains NaN or infinity")
    return z


def _shifted_terms(s, B, z):
    """Support-masked terms s_m * exp(t_m - shift), t = -B^T z, and the shift."""
    t = -(B.T @ z)
    mask = s > 0.0
    shift = float(np.max(t[mask]))
    u = np.zeros_like(s)
    u[mask] = s[mask] * np.exp(t[mask] - shift)
    return u, shift


def h_weights(model, p, z):
    """Spectral weight vector w on the unit simplex (overflow-safe)."""
    z = _check_z(model, z)
    u, _ = _shifted_terms(model.spectrum_row(p), model.b_matrix, z)
    return u / u.sum()


def h_value(model, p, z):
    """Log-sum-exp measurement value for spectrum p at line integrals z."""
    z = _check_z(model, z)
    u, shift = _shifted_terms(model.spectrum_row(p), model.b_matrix, z)
    return shift + float(np.log(u.sum()))


def h_gradient(model, p, z):
    """Gradient -B w; never zero because B > 0 and w lies on the simplex."""
    return -(model.b_matrix @ h_weights(model, p, z))


def h_hessian(model, p, z):
    """Hessian B (diag(w) - w w^T) B^T, symmetric positive semidefinite."""
    w = h_weights(model, p, z)
    B = model.b_matrix
    g = B @ w
    h = (B * w[None, :]) @ B.T - np.outer(g, g)
    return (h + h.T) / 2.0


def h_values_batch(model, p, Z):
    """Vectorized h values for rows of Z (n, D)."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != model.d_bases:
        raise DimensionMismatch("Z must be (n, D)")
    if not np.all(np.isfinite(Z)):
        raise NonFinite("Z contains NaN or infinity")
    s = model.spectrum_row(p)
    mask = s > 0.0
    t = -(Z @ model.b_matrix)  # (n, M)
    ts = t[:, mask]
    shift = ts.max(axis=1)
    u = s[mask][None, :] * np.exp(ts - shift[:, None])
    return shift + np.log(u.sum(axis=1))


# ---------------------------------------------------------------------------
# full-image (ray-coupled) equation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SparseRay:
    """Sparse nonnegative intersection-length vector over n_pixels pixels."""

    indices: np.ndarray
    lengths: np.ndarray
    n_pixels: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.lengths, dtype=float)
        if idx.shape != val.shape or idx.ndim != 1:
            raise DimensionMismatch("indices and lengths must be 1-d and aligned")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_pixels):
            raise IndexOutOfRange("ray indices outside the pixel grid")
        if np.any(val < 0):
            raise OutOfDomain("intersection lengths must be nonnegative")
        if idx.size > 1 and not np.all(np.diff(idx) > 0):
            raise OutOfDomain("ray indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "lengths", val)

    @property
    def nnz(self):
        return int(self.indices.size)

    def norm_sq(self):
        return float(self.lengths @ self.lengths)

    def to_dense(self):
        a = np.zeros(self.n_pixels)
        a[self.indices] = self.lengths
        return a


@dataclass(frozen=True)
class SparseVec:
    """Sparse vector (sorted indices) of a given total size."""

    indices: np.ndarray
    values: np.ndarray
    size: int

    def to_dense(self):
        v = np.zeros(self.size)
        v[self.indices] = self.values
        return v


def _line_integrals(ray, f):
    f = np.asarray(f, dtype=float)
    if f.ndim != 2 or f.shape[1] != ray.n_pixels:
        raise DimensionMismatch("f must be (D, n_pixels)")
    if not np.all(np.isfinite(f)):
        raise NonFinite("f contains NaN or infinity")
    return f[:, ray.indices] @ ray.lengths


def k_value(model, p, ray, f):
    """Measurement value along a ray: h(p, z) with z_d = a . f_d."""
    z = _line_integrals(ray, f)
    if z.shape != (model.d_bases,):
        raise DimensionMismatch("f row count must equal the number of bases")
    return h_value(model, p, z)


def k_gradient(model, p, ray, f):
    """Gradient of k as the Kronecker block vector grad_h (x) a, returned sparse.

    Block d occupies indices d*I .. (d+1)*I - 1, matching the stacked image
    layout [f_1; ...; f_D].  An empty ray yields the (exact) zero gradient.
    """
    z = _line_integrals(ray, f)
    gh = h_gradient(model, p, z)
    nnz = ray.nnz
    d = model.d_bases
    idx = np.empty(d * nnz, dtype=np.int64)
    val = np.empty(d * nnz)
    for di in range(d):
        idx[di * nnz : (di + 1) * nnz] = di * ray.n_pixels + ray.indices
        val[di * nnz : (di + 1) * nnz] = gh[di] * ray.lengths
    return SparseVec(indices=idx, values=val, size=d * ray.n_pixels)


# ---------------------------------------------------------------------------
# discrepancy constants of the measurement mapping
# ---------------------------------------------------------------------------


@dataclass
class GammaBBound:
    """Certified upper bound for the gradient-discrepancy constant of h.

    ``upper`` dominates every ratio ||B(w1 - w2)|| / ||B w1|| over simplex
    pairs; ``mc_lower`` is a Monte-Carlo sampled lower bound for sanity; the
    simplex minimization stopped at duality gap ``gap``.
    """

    upper: float
    mc_lower: float
    gap: float
    min_norm_sq_lower: float


def _simplex_min_norm(B, gap_tol=1e-10, max_iters=200000):
    """Pairwise Frank-Wolfe for min ||B w||^2 over the unit simplex.

    Returns (w, half_norm_sq, gap); 2*(half_norm_sq - gap) is a certified
    lower bound of the minimum squared norm.
    """
    m = B.shape[1]
    gram = B.T @ B
    w = np.zeros(m)
    w[int(np.argmin(np.diag(gram)))] = 1.0
    gap = np.inf
    for _ in range(max_iters):
        grad = gram @ w
        fw = int(np.argmin(grad))
        gap = float(w @ grad - grad[fw])
        if gap <= gap_tol:
            break
        support = np.nonzero(w > 0)[0]
        away = int(support[np.argmax(grad[support])])
        denom = gram[fw, fw] - 2.0 * gram[fw, away] + gram[away, away]
        if denom <= 0.0:
            break
        lam = min((grad[away] - grad[fw]) / denom, w[away])
        if lam <= 0.0:
            break
        w[fw] += lam
        w[away] -= lam
        if w[away] < 0.0:
            w[away] = 0.0
    return w, float(w @ gram @ w) / 2.0, gap


def gamma_b_upper(B, mc_pairs=2000, seed=0):
    """Certified upper bound on sup ||B(w1-w2)|| / ||B w1|| over the simplex.

    Numerator: max over column pairs (the extreme points of the difference
    body).  Denominator: certified lower bound of min ||B w|| from a
    Frank-Wolfe duality gap.  A Monte-Carlo sampled lower bound rides along
    as a sanity check.
    """
    B = np.asarray(B, dtype=float)
    if B.ndim != 2:
        raise DimensionMismatch("B must be 2-d")
    if np.any(B <= 0):
        raise NotPositive("B must be entrywise positive")
    diffs = B[:, :, None] - B[:, None, :]
    numer = float(np.sqrt((diffs * diffs).sum(axis=0).max()))

    rng = np.random.default_rng(seed)
    w1 = rng.dirichlet(np.ones(B.shape[1]), size=mc_pairs)
    w2 = rng.dirichlet(np.ones(B.shape[1]), size=mc_pairs)
    y1 = w1 @ B.T
    ratios = np.linalg.norm(y1 - w2 @ B.T, axis=1) / np.linalg.norm(y1, axis=1)
    mc_lower = float(ratios.max()) if mc_pairs else 0.0

    if numer == 0.0:
        return GammaBBound(upper=0.0, mc_lower=mc_lower, gap=0.0, min_norm_sq_lower=0.0)

    _, half_sq, gap = _simplex_min_norm(B)
    min_sq_lower = max(2.0 * (half_sq - gap), 0.0)
    if min_sq_lower == 0.0:
        upper = np.inf
    else:
        upper = numer / np.sqrt(min_sq_lower)
    return GammaBBound(
        upper=float(upper), mc_lower=mc_lower, gap=float(gap), min_norm_sq_lower=min_sq_lower
    )


def gamma_b_tilde(B):
    """Closed-form discrepancy constant when all rows share strict extreme columns.

    Requires every row of B to attain its strict minimum at one common column
    m1 and its strict maximum at another common column m2; then the constant
    is sqrt(sum_d (B[d,m1]-B[d,m2])^2 / sum_d B[d,m1]^2).
    """
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[1] < 2:
        raise DimensionMismatch("B must be 2-d with at least two columns")

    def common_extreme(sign, name):
        cols = []
        for d, row in enumerate(B):
            order = np.argsort(sign * row, kind="stable")
            if sign * row[order[0]] == sign * row[order[1]]:
                raise DominanceViolated(f"row {d} has a non-strict {name}")
            cols.append(int(order[0]))
        if len(set(cols)) != 1:
            raise DominanceViolated(f"rows disagree on the {name} column: {cols}")
        return cols[0]

    m1 = common_extreme(+1.0, "minimum")
    m2 = common_extreme(-1.0, "maximum")
    diff = B[:, m1] - B[:, m2]
    return float(np.sqrt((diff @ diff) / (B[:, m1] @ B[:, m1])))


# ---------------------------------------------------------------------------
# synthetic spectra and tables
# ---------------------------------------------------------------------------


def energy_bin_centers(energy_lo, energy_hi, n_bins):
    """Centers of n_bins uniform bins on [energy_lo, energy_hi] keV."""
    if n_bins < 1:
        raise OutOfDomain("n_bins must be >= 1")
    if not energy_hi > energy_lo:
        raise OutOfDomain("need energy_hi > energy_lo")
    edges = np.linspace(energy_lo, energy_hi, n_bins + 1)
    return (edges[:-1] + edges[1:]) / 2.0


def water_like_mu(e):
    """Synthetic water-ish attenuation (cm^-1): 0.15 + 0.75 exp(-(E-20)/50).

    Slow decay mimics a scattering-dominated material.
    """
    return 0.15 + 0.75 * np.exp(-(np.asarray(e, dtype=float) - 20.0) / 50.0)


def bone_like_mu(e):
    """Synthetic bone-ish attenuation (cm^-1): 0.6 * water + 2.5 exp(-(E-20)/12).

    A fast photoelectric-like decay on top of a scaled copy of the water
    curve; the scaled-copy form keeps the bone/water ratio strictly
    decreasing in energy, which in turn makes the determinant-sign
    condition hold for spectra with an increasing likelihood ratio.
    """
    return 0.6 * water_like_mu(e) + 2.5 * np.exp(-(np.asarray(e, dtype=float) - 20.0) / 12.0)


def copper_like_mu(e):
    """Synthetic beam-hardening filter (cm^-1): 0.4 + 20 exp(-(E-20)/16)."""
    return 0.4 + 20.0 * np.exp(-(np.asarray(e, dtype=float) - 20.0) / 16.0)


def synth_spectrum(peak_kvp, n_bins, energy_lo, energy_hi, filter_thickness_cm=0.0,
                   filter_mu=None):
    """Normalized Kramers-shaped spectrum, optionally hardened by a filter.

    Bin weight ~ max(peak/E - 1, 0) at the bin center, attenuated by
    exp(-mu_filter(E) * thickness), then renormalized to sum one.
    """
    if not energy_lo <= peak_kvp <= energy_hi:
        raise OutOfDomain("peak_kvp must lie within the energy range")
    if filter_thickness_cm < 0:
        raise OutOfDomain("filter thickness must be >= 0")
    e = energy_bin_centers(energy_lo, energy_hi, n_bins)
    s = np.maximum(peak_kvp / e - 1.0, 0.0)
    if filter_thickness_cm > 0.0:
        if filter_mu is None:
            filter_mu = copper_like_mu
        mu = filter_mu(e) if callable(filter_mu) else np.asarray(filter_mu, dtype=float)
        if mu.shape != e.shape:
            raise DimensionMismatch("filter_mu array must have one entry per bin")
        s = s * np.exp(-mu * filter_thickness_cm)
    total = s.sum()
    if total <= 0.0:
        raise EmptySupport("all bins fall above the tube peak")
    return s / total


def synthetic_model(n_bins=16, energy_lo=20.0, energy_hi=140.0, peaks_kvp=(80.0, 140.0),
                    filters_cm=(0.0, 0.1), materials=(water_like_mu, bone_like_mu),
                    filter_mu=copper_like_mu):
    """Self-contained two-spectrum model from the documented synthetic curves."""
    if len(peaks_kvp) != len(filters_cm):
        raise DimensionMismatch("peaks_kvp and filters_cm must have equal length")
    e = energy_bin_centers(energy_lo, energy_hi, n_bins)
    S = np.stack(
        [
            synth_spectrum(pk, n_bins, energy_lo, energy_hi, ft, filter_mu)
            for pk, ft in zip(peaks_kvp, filters_cm)
        ]
    )
    B = np.stack([np.asarray(m(e), dtype=float) for m in materials])
    return SpectralModel(S, B, e)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _read_table(path, value_column):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["energy_kev", value_column]:
                raise SchemaError(
                    f"{path}: expected header 'energy_kev,{value_column}', got {header}"
                )
            energies, values = [], []
            for row in reader:
                if not row:
                    continue
                if len(row) != 2:
                    raise SchemaError(f"{path}: malformed row {row}")
                try:
                    energies.append(float(row[0]))
                    values.append(float(row[1]))
                except ValueError as exc:
                    raise SchemaError(f"{path}: non-numeric row {row}") from exc
    except OSError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    e = np.asarray(energies)
    v = np.asarray(values)
    if e.size == 0:
        raise GridError(f"{path}: empty table")
    if e.size > 1 and not np.all(np.diff(e) > 0):
        raise GridError(f"{path}: energies must be strictly increasing")
    return e, v


def load_tables(spectra_paths, material_paths):
    """Build a SpectralModel from spectrum and material CSV tables.

    The first spectrum's energy grid becomes the model grid; every other
    table is linearly interpolated onto it.  Spectrum rows off unit sum by
    more than 1e-9 are renormalized with a logged warning (an exact
    renormalization is applied in every case).
    """
    if not spectra_paths or not material_paths:
        raise SchemaError("need at least one spectrum and one material table")
    grid = None
    rows = []
    for path in spectra_paths:
        e, v = _read_table(path, "weight")
        if np.any(v < 0):
            raise SchemaError(f"{path}: spectrum weights must be nonnegative")
        if grid is None:
            grid = e
        else:
            v = np.interp(grid, e, v)
        total = v.sum()
        if total <= 0:
            raise EmptySupport(f"{path}: spectrum has no weight on the model grid")
        if abs(total - 1.0) > 1e-9:
            logger.warning("%s: spectrum summed to %.12g; renormalized", path, total)
        rows.append(v / total)
    mats = []
    for path in material_paths:
        e, v = _read_table(path, "mu")
        v = np.interp(grid, e, v)
        if np.any(v <= 0):
            raise PositivityError(f"{path}: attenuation values must be positive")
        mats.append(v)
    return SpectralModel(np.stack(rows), np.stack(mats), grid)
