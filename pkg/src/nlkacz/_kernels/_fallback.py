"""Pure-numpy kernels: reference semantics for the compiled extension.

Both backends implement the same three entry points with identical update
rules and bookkeeping:

  h_batch        vectorized measurement values for one spectrum
  dd_solve       per-ray solve of h(z) = g (P equations, D unknowns)
  onestep_solve  full-image solve of k(f) = g over all rays

Selection-kind codes: 0 cyclic, 1 max-residual, 2 threshold, 3
positive-cyclic.  Termination codes: 0 residual tolerance, 1 epoch budget,
2 zero residual.
"""

import numpy as np

from ..errors import EmptyRaySelected, GradientVanished

KIND_CYCLIC = 0
KIND_MAX_RESIDUAL = 1
KIND_THETA = 2
KIND_POSITIVE_CYCLIC = 3

TERM_TOL = 0
TERM_MAX = 1
TERM_ZERO = 2

MODE_EXACT = 0
MODE_STALE = 1
MODE_RECOMPUTE = 2


def _supports(S):
    """Per-spectrum support bins and weights."""
    return [(np.nonzero(row > 0.0)[0], row[row > 0.0]) for row in S]


def h_batch(s, B, Z):
    """Measurement values ln sum_m s_m exp(-(B^T z)_m) for each row z of Z."""
    Z = np.asarray(Z, dtype=float)
    supp = np.nonzero(s > 0.0)[0]
    t = -(Z @ B[:, supp])  # (n, |supp|)
    shift = t.max(axis=1)
    u = s[supp][None, :] * np.exp(t - shift[:, None])
    return shift + np.log(u.sum(axis=1))


def _h_and_weights(s_supp, bins, B, z):
    """Value, simplex weights (on support), B w, and ||B w||^2 at one point."""
    t = -(B[:, bins].T @ z)
    shift = t.max()
    u = s_supp * np.exp(t - shift)
    total = u.sum()
    w = u / total
    bw = B[:, bins] @ w
    return shift + np.log(total), bw, float(bw @ bw)


def _select(kind, k, r, norm_r, theta, eps, cursor):
    """Returns (0-based index or -1 for zero-residual, new cursor, fallback_flag)."""
    n = r.shape[0]
    if kind == KIND_CYCLIC:
        return k % n, cursor, False
    if kind == KIND_MAX_RESIDUAL:
        return int(np.argmax(np.abs(r))), cursor, False
    if kind == KIND_THETA:
        if norm_r == 0.0:
            return -1, cursor, False
        eligible = np.nonzero(np.abs(r) >= theta * norm_r)[0]
        if eligible.size:
            return int(eligible[0]), cursor, False
        return int(np.argmax(np.abs(r))), cursor, False
    # positive cyclic with max-|residual| fallback
    for i in range(n):
        idx = (cursor + i) % n
        if r[idx] > eps:
            return idx, (idx + 1) % n, False
    if np.max(np.abs(r)) <= eps:
        return -1, cursor, False
    j = int(np.argmax(np.abs(r)))
    return j, (j + 1) % n, True


def dd_solve(S, B, g, z0, z_star, kind, theta, eps, tol, max_iters, gradient_floor):
    """Row-action solve of h(z) = g for one ray.

    Returns (z, sel, val, resnorm, dist_states, termination, n_fallback);
    ``dist_states`` has one entry per state z^0..z^n (None без z_star).
    """
    P = g.shape[0]
    z = np.array(z0, dtype=float)
    supports = _supports(S)
    floor2 = gradient_floor * gradient_floor
    track = z_star is not None

    sel, val, rno = [], [], []
    dist = [] if track else None
    cursor = 0
    n_fallback = 0
    k = 0
    while True:
        r = np.empty(P)
        for p, (bins, s_supp) in enumerate(supports):
            t = -(B[:, bins].T @ z)
            shift = t.max()
            r[p] = shift + np.log((s_supp * np.exp(t - shift)).sum()) - g[p]
        norm_r = float(np.linalg.norm(r))
        if norm_r <= tol:
            term = TERM_TOL
            break
        if k >= max_iters:
            term = TERM_MAX
            break
        j, cursor, fb = _select(kind, k, r, norm_r, theta, eps, cursor)
        if j < 0:
            term = TERM_ZERO
            break
        n_fallback += fb
        bins, s_supp = supports[j]
        _, bw, bw2 = _h_and_weights(s_supp, bins, B, z)
        if bw2 < floor2:
            raise GradientVanished(
                "||B w|| below the gradient floor", iteration=k, component=j + 1
            )
        sel.append(j + 1)
        val.append(float(r[j]))
        rno.append(norm_r)
        if track:
            dist.append(float(np.linalg.norm(z - z_star)))
        # residual r = h - g, gradient -B w: the step adds (r/||Bw||^2) B w
        z = z + (r[j] / bw2) * bw
        k += 1

    if track:
        dist.append(float(np.linalg.norm(z - z_star)))
        dist = np.asarray(dist)
    return (
        z,
        np.asarray(sel, dtype=np.int64),
        np.asarray(val, dtype=float),
        np.asarray(rno, dtype=float),
        dist,
        term,
        n_fallback,
    )


def onestep_solve(S, B, spec_idx, csr_indptr, csr_indices, csr_data,
                  csc_indptr, csc_indices, csc_data, g, f0, f_star,
                  kind, theta, eps, tol, max_epochs, gradient_floor,
                  residual_mode=MODE_EXACT, record_iter=True):
    """Row-action solve of k(f) = g over all rays (one equation per step).

    The residual vector is kept exactly current: each step updates the line
    integrals of every equation whose ray crosses a touched pixel and
    re-evaluates exactly those residuals; a full refresh at every epoch
    boundary bounds floating-point drift.  MODE_STALE (opt-in, approximate)
    refreshes only the stepped equation between epoch boundaries.
    MODE_RECOMPUTE rebuilds everything every iteration (reference).

    Returns a dict with the final images, per-iteration arrays, per-epoch
    metric arrays, termination code, and counters.
    """
    J = g.shape[0]
    D, I = f0.shape
    f = np.array(f0, dtype=float)
    supports = _supports(S)
    P = len(supports)
    floor2 = gradient_floor * gradient_floor
    track = f_star is not None
    norm_g = float(np.linalg.norm(g))
    norm_fs = float(np.linalg.norm(f_star)) if track else 0.0

    spec_rows = [np.nonzero(spec_idx == p)[0] for p in range(P)]
    row_norm2 = np.zeros(J)
    for j in range(J):
        a = csr_data[csr_indptr[j]:csr_indptr[j + 1]]
        row_norm2[j] = float(a @ a)

    Z = np.zeros((J, D))
    r = np.zeros(J)

    def refresh():
        nonlocal sum_r2, normf2
        for d in range(D):
            for j in range(J):
                lo, hi = csr_indptr[j], csr_indptr[j + 1]
                Z[j, d] = csr_data[lo:hi] @ f[d, csr_indices[lo:hi]]
        for p in range(P):
            rows = spec_rows[p]
            if rows.size:
                r[rows] = h_batch(S[p], B, Z[rows]) - g[rows]
        sum_r2 = float(r @ r)
        if track:
            normf2 = float(((f - f_star) ** 2).sum())

    sum_r2 = 0.0
    normf2 = 0.0

    max_iters = max_epochs * J
    n_rec = max_iters if record_iter else 0
    sel = np.zeros(n_rec, dtype=np.int64)
    val = np.zeros(n_rec)
    rno = np.zeros(n_rec)
    ref = np.zeros(n_rec) if (track and record_iter) else None
    re_f_ep = [] if track else None
    re_g_ep = []
    n_fallback = 0
    cursor = 0
    buf = np.zeros(J)

    refresh()
    k = 0
    while True:
        if k % J == 0 and k // J == len(re_g_ep):
            if k > 0:
                refresh()
            re_g_ep.append(np.sqrt(sum_r2) / norm_g if norm_g > 0 else 0.0)
            if track:
                re_f_ep.append(np.sqrt(normf2) / norm_fs)
        if np.sqrt(sum_r2) <= tol:
            refresh()
            if np.sqrt(sum_r2) <= tol:
                term = TERM_TOL
                break
        if k >= max_iters:
            term = TERM_MAX
            break
        norm_r = float(np.sqrt(sum_r2))
        j, cursor, fb = _select(kind, k, r, norm_r, theta, eps, cursor)
        if j < 0:
            term = TERM_ZERO
            break
        n_fallback += fb
        lo, hi = csr_indptr[j], csr_indptr[j + 1]
        if hi == lo:
            raise EmptyRaySelected(f"equation {j + 1} has an empty ray")
        cols = csr_indices[lo:hi]
        a = csr_data[lo:hi]
        p = int(spec_idx[j])
        bins, s_supp = supports[p]
        if residual_mode == MODE_STALE:
            # selection used the cached vector; the step itself works from
            # the equation's current state
            r_old = r[j]
            Z[j] = f[:, cols] @ a
            val_fresh, _, _ = _h_and_weights(s_supp, bins, B, Z[j])
            r[j] = val_fresh - g[j]
            sum_r2 += r[j] * r[j] - r_old * r_old
        _, bw, bw2 = _h_and_weights(s_supp, bins, B, Z[j])
        gn2 = bw2 * row_norm2[j]
        if gn2 < floor2:
            raise GradientVanished(
                "||grad k|| below the gradient floor", iteration=k, component=j + 1
            )
        if record_iter:
            sel[k] = j + 1
            val[k] = r[j]
            rno[k] = norm_r
            if ref is not None:
                ref[k] = np.sqrt(normf2) / norm_fs
        coef = r[j] / gn2
        # step: f += coef * (B w (x) a) on the ray support
        old_block = f[:, cols].copy()
        f[:, cols] = old_block + coef * np.outer(bw, a)
        if track:
            fs_block = f_star[:, cols]
            normf2 += float(((f[:, cols] - fs_block) ** 2).sum() - ((old_block - fs_block) ** 2).sum())

        if residual_mode == MODE_RECOMPUTE:
            refresh()
        elif residual_mode == MODE_STALE:
            Z[j] += coef * row_norm2[j] * bw
            r_old = r[j]
            t = -(B[:, bins].T @ Z[j])
            shift = t.max()
            r[j] = shift + np.log((s_supp * np.exp(t - shift)).sum()) - g[j]
            sum_r2 += r[j] * r[j] - r_old * r_old
        else:
            # exact propagation: every equation whose ray meets a touched pixel
            pieces_idx = []
            pieces_val = []
            for ii, col in enumerate(cols):
                clo, chi = csc_indptr[col], csc_indptr[col + 1]
                pieces_idx.append(csc_indices[clo:chi])
                pieces_val.append(csc_data[clo:chi] * a[ii])
            cat_idx = np.concatenate(pieces_idx)
            np.add.at(buf, cat_idx, np.concatenate(pieces_val))
            rows = np.unique(cat_idx)
            dz = buf[rows]
            buf[rows] = 0.0
            Z[rows] += coef * dz[:, None] * bw[None, :]
            old_sq = float(r[rows] @ r[rows])
            for p2 in range(P):
                sub = rows[spec_idx[rows] == p2]
                if sub.size:
                    r[sub] = h_batch(S[p2], B, Z[sub]) - g[sub]
            sum_r2 += float(r[rows] @ r[rows]) - old_sq
        k += 1

    refresh()
    final_re_g = np.sqrt(sum_r2) / norm_g if norm_g > 0 else float(np.sqrt(sum_r2))
    final_re_f = np.sqrt(normf2) / norm_fs if track else None
    return {
        "f": f,
        "selected": sel[:k],
        "values": val[:k],
        "res_norms": rno[:k],
        "re_f_iter": None if ref is None else ref[:k],
        "re_f_epoch": None if re_f_ep is None else np.asarray(re_f_ep),
        "re_g_epoch": np.asarray(re_g_ep),
        "termination": term,
        "n_iterations": k,
        "n_fallback": n_fallback,
        "final_res_norm": float(np.sqrt(sum_r2)),
        "final_re_g": float(final_re_g),
        "final_re_f": None if final_re_f is None else float(final_re_f),
    }
