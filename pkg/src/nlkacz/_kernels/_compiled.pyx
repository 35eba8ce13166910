# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; see _fallback.py for the reference semantics."""

import numpy as np

from libc.math cimport exp, log, sqrt, fabs

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

cdef int _KIND_CYCLIC = 0
cdef int _KIND_MAX_RESIDUAL = 1
cdef int _KIND_THETA = 2
cdef int _TERM_TOL = 0
cdef int _TERM_MAX = 1
cdef int _TERM_ZERO = 2
cdef int _MODE_STALE = 1
cdef int _MODE_RECOMPUTE = 2


cdef inline long _argmax_abs(double* r, long n) nogil:
    cdef long i, best = 0
    cdef double m = fabs(r[0]), v
    for i in range(1, n):
        v = fabs(r[i])
        if v > m:
            m = v
            best = i
    return best


cdef inline long _select(int kind, long k, double* r, long n, double norm_r,
                         double theta, double eps, long* cursor, int* fallback) nogil:
    """0-based selected index, or -1 for the zero-residual stop."""
    cdef long i, idx
    cdef double m
    if kind == _KIND_CYCLIC:
        return k % n
    if kind == _KIND_MAX_RESIDUAL:
        return _argmax_abs(r, n)
    if kind == _KIND_THETA:
        if norm_r == 0.0:
            return -1
        for i in range(n):
            if fabs(r[i]) >= theta * norm_r:
                return i
        return _argmax_abs(r, n)
    # positive cyclic with max-|residual| fallback
    for i in range(n):
        idx = (cursor[0] + i) % n
        if r[idx] > eps:
            cursor[0] = (idx + 1) % n
            return idx
    idx = _argmax_abs(r, n)
    m = fabs(r[idx])
    if m <= eps:
        return -1
    fallback[0] = fallback[0] + 1
    cursor[0] = (idx + 1) % n
    return idx


cdef inline double _h_row(const long[::1] supp_bin, const double[::1] supp_s, long lo, long hi,
                          const double[:, ::1] B, long D, double* z) nogil:
    """ln sum_m s_m exp(-(B^T z)_m) over one spectrum's support, max-shifted."""
    cdef long ii, m, d
    cdef double t, shift = -1e308, tot = 0.0
    for ii in range(lo, hi):
        m = supp_bin[ii]
        t = 0.0
        for d in range(D):
            t -= B[d, m] * z[d]
        if t > shift:
            shift = t
    for ii in range(lo, hi):
        m = supp_bin[ii]
        t = 0.0
        for d in range(D):
            t -= B[d, m] * z[d]
        tot += supp_s[ii] * exp(t - shift)
    return shift + log(tot)


cdef inline double _bw_at(const long[::1] supp_bin, const double[::1] supp_s, long lo, long hi,
                          const double[:, ::1] B, long D, double* z, double* bw) nogil:
    """B w at z for one spectrum; returns ||B w||^2."""
    cdef long ii, m, d
    cdef double t, shift = -1e308, tot = 0.0, um, bw2 = 0.0
    for ii in range(lo, hi):
        m = supp_bin[ii]
        t = 0.0
        for d in range(D):
            t -= B[d, m] * z[d]
        if t > shift:
            shift = t
    for d in range(D):
        bw[d] = 0.0
    for ii in range(lo, hi):
        m = supp_bin[ii]
        t = 0.0
        for d in range(D):
            t -= B[d, m] * z[d]
        um = supp_s[ii] * exp(t - shift)
        tot += um
        for d in range(D):
            bw[d] += B[d, m] * um
    for d in range(D):
        bw[d] /= tot
        bw2 += bw[d] * bw[d]
    return bw2


cdef double _refresh(const long[::1] rp, const long[::1] ri, const double[::1] rd,
                     double[:, ::1] f, double[:, ::1] Z, double[::1] r,
                     const double[::1] g, const long[::1] supp_ptr, const long[::1] supp_bin,
                     const double[::1] supp_s, const double[:, ::1] B, const long[::1] sidx) nogil:
    """Rebuild line integrals Z and residuals r from f; returns sum r^2."""
    cdef long J = r.shape[0], D = f.shape[0]
    cdef long j, d, q, p
    cdef double acc, sum_r2 = 0.0
    cdef double zloc[8]
    for j in range(J):
        for d in range(D):
            acc = 0.0
            for q in range(rp[j], rp[j + 1]):
                acc += rd[q] * f[d, ri[q]]
            Z[j, d] = acc
            zloc[d] = acc
        p = sidx[j]
        r[j] = _h_row(supp_bin, supp_s, supp_ptr[p], supp_ptr[p + 1], B, D, zloc) - g[j]
        sum_r2 += r[j] * r[j]
    return sum_r2


cdef double _dist2(const double[:, ::1] f, const double[:, ::1] fs) nogil:
    cdef long d, i
    cdef double acc = 0.0, diff
    for d in range(f.shape[0]):
        for i in range(f.shape[1]):
            diff = f[d, i] - fs[d, i]
            acc += diff * diff
    return acc


def _support_arrays(S):
    """Flatten per-spectrum support bins/weights for C loops."""
    S = np.ascontiguousarray(S, dtype=np.float64)
    ptr = [0]
    bins = []
    vals = []
    total = 0
    for row in S:
        nz = np.nonzero(row > 0.0)[0]
        bins.append(nz)
        vals.append(row[nz])
        total += nz.size
        ptr.append(total)
    return (
        np.asarray(ptr, dtype=np.int64),
        np.concatenate(bins).astype(np.int64) if bins else np.empty(0, np.int64),
        np.concatenate(vals).astype(np.float64) if vals else np.empty(0),
    )


def h_batch(s, B, Z):
    """Measurement values for one spectrum at each row of Z."""
    s = np.ascontiguousarray(s, dtype=np.float64)
    cdef const double[:, ::1] Bv = np.ascontiguousarray(B, dtype=np.float64)
    cdef const double[:, ::1] Zv = np.ascontiguousarray(Z, dtype=np.float64)
    supp = np.nonzero(s > 0.0)[0].astype(np.int64)
    cdef const long[::1] bins = supp
    cdef const double[::1] sv = np.ascontiguousarray(s[supp])
    cdef long n = Zv.shape[0], D = Zv.shape[1], ns = bins.shape[0]
    if D > 8:
        raise ValueError("compiled kernel supports at most 8 bases")
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef long i
    cdef double zloc[8]
    cdef long d
    with nogil:
        for i in range(n):
            for d in range(D):
                zloc[d] = Zv[i, d]
            out[i] = _h_row(bins, sv, 0, ns, Bv, D, zloc)
    return out_arr


def dd_solve(S, B, g, z0, z_star, int kind, double theta, double eps,
             double tol, long max_iters, double gradient_floor):
    """Per-ray solve; see _fallback.dd_solve."""
    supp_ptr_a, supp_bin_a, supp_s_a = _support_arrays(S)
    cdef const long[::1] supp_ptr = supp_ptr_a
    cdef const long[::1] supp_bin = supp_bin_a
    cdef const double[::1] supp_s = supp_s_a
    cdef const double[:, ::1] Bv = np.ascontiguousarray(B, dtype=np.float64)
    cdef const double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    z_arr = np.array(z0, dtype=np.float64)
    cdef double[::1] z = z_arr
    cdef long P = gv.shape[0], D = z.shape[0]
    if D > 8:
        raise ValueError("compiled kernel supports at most 8 bases")
    cdef int track = 1 if z_star is not None else 0
    zs_arr = np.zeros(D) if z_star is None else np.ascontiguousarray(z_star, dtype=np.float64)
    cdef const double[::1] zs = zs_arr

    sel_arr = np.empty(max_iters, dtype=np.int64)
    val_arr = np.empty(max_iters)
    rno_arr = np.empty(max_iters)
    dist_arr = np.empty(max_iters + 1)
    cdef long[::1] sel = sel_arr
    cdef double[::1] val = val_arr
    cdef double[::1] rno = rno_arr
    cdef double[::1] dist = dist_arr

    cdef double[::1] r = np.empty(P)
    cdef double bw[8]
    cdef double zloc[8]

    cdef long k = 0, i, d, j = -1
    cdef long cursor = 0
    cdef int n_fallback = 0, term = _TERM_MAX, gv_flag = 0
    cdef double sumsq, norm_r, bw2, c, floor2, dd
    floor2 = gradient_floor * gradient_floor

    with nogil:
        while True:
            sumsq = 0.0
            for d in range(D):
                zloc[d] = z[d]
            for i in range(P):
                r[i] = _h_row(supp_bin, supp_s, supp_ptr[i], supp_ptr[i + 1], Bv, D, zloc) - gv[i]
                sumsq += r[i] * r[i]
            norm_r = sqrt(sumsq)
            if norm_r <= tol:
                term = _TERM_TOL
                break
            if k >= max_iters:
                term = _TERM_MAX
                break
            j = _select(kind, k, &r[0], P, norm_r, theta, eps, &cursor, &n_fallback)
            if j < 0:
                term = _TERM_ZERO
                break
            bw2 = _bw_at(supp_bin, supp_s, supp_ptr[j], supp_ptr[j + 1], Bv, D, zloc, bw)
            if bw2 < floor2:
                gv_flag = 1
                break
            sel[k] = j + 1
            val[k] = r[j]
            rno[k] = norm_r
            if track:
                dd = 0.0
                for d in range(D):
                    dd += (z[d] - zs[d]) * (z[d] - zs[d])
                dist[k] = sqrt(dd)
            # residual r = h - g, gradient -B w: the step adds (r/||Bw||^2) B w
            c = r[j] / bw2
            for d in range(D):
                z[d] = z[d] + c * bw[d]
            k += 1
        if track:
            dd = 0.0
            for d in range(D):
                dd += (z[d] - zs[d]) * (z[d] - zs[d])
            dist[k] = sqrt(dd)

    if gv_flag:
        raise GradientVanished(
            "||B w|| below the gradient floor", iteration=int(k), component=int(j + 1)
        )
    return (
        z_arr,
        sel_arr[:k].copy(),
        val_arr[:k].copy(),
        rno_arr[:k].copy(),
        dist_arr[: k + 1].copy() if track else None,
        int(term),
        int(n_fallback),
    )


def onestep_solve(S, B, spec_idx, csr_indptr, csr_indices, csr_data,
                  csc_indptr, csc_indices, csc_data, g, f0, f_star,
                  int kind, double theta, double eps, double tol,
                  long max_epochs, double gradient_floor,
                  int residual_mode=MODE_EXACT, int record_iter=True):
    """Full-image solve; see _fallback.onestep_solve."""
    supp_ptr_a, supp_bin_a, supp_s_a = _support_arrays(S)
    cdef const long[::1] supp_ptr = supp_ptr_a
    cdef const long[::1] supp_bin = supp_bin_a
    cdef const double[::1] supp_s = supp_s_a
    cdef const double[:, ::1] Bv = np.ascontiguousarray(B, dtype=np.float64)
    cdef const long[::1] sidx = np.ascontiguousarray(spec_idx, dtype=np.int64)
    cdef const long[::1] rp = np.ascontiguousarray(csr_indptr, dtype=np.int64)
    cdef const long[::1] ri = np.ascontiguousarray(csr_indices, dtype=np.int64)
    cdef const double[::1] rd = np.ascontiguousarray(csr_data, dtype=np.float64)
    cdef const long[::1] cp = np.ascontiguousarray(csc_indptr, dtype=np.int64)
    cdef const long[::1] ci = np.ascontiguousarray(csc_indices, dtype=np.int64)
    cdef const double[::1] cd = np.ascontiguousarray(csc_data, dtype=np.float64)
    cdef const double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    f_arr = np.array(f0, dtype=np.float64, order="C")
    cdef double[:, ::1] f = f_arr
    cdef long J = gv.shape[0], D = f.shape[0]
    if D > 8:
        raise ValueError("compiled kernel supports at most 8 bases")
    cdef int track = 1 if f_star is not None else 0
    fs_arr = np.zeros_like(f_arr) if f_star is None else np.ascontiguousarray(f_star, dtype=np.float64)
    cdef const double[:, ::1] fs = fs_arr

    cdef double norm_g = float(np.linalg.norm(np.asarray(g, dtype=float)))
    cdef double norm_fs = float(np.linalg.norm(fs_arr)) if track else 1.0

    row_norm2_a = np.zeros(J)
    cdef double[::1] row_norm2 = row_norm2_a
    cdef long j, q
    for j in range(J):
        for q in range(rp[j], rp[j + 1]):
            row_norm2[j] += rd[q] * rd[q]

    Z_arr = np.zeros((J, f_arr.shape[0]))
    cdef double[:, ::1] Z = Z_arr
    r_arr = np.zeros(J)
    cdef double[::1] r = r_arr
    buf_arr = np.zeros(J)
    cdef double[::1] buf = buf_arr
    seen_arr = np.zeros(J, dtype=np.int8)
    cdef signed char[::1] seen = seen_arr
    visited_arr = np.zeros(J, dtype=np.int64)
    cdef long[::1] visited = visited_arr

    cdef long max_iters = max_epochs * J
    cdef long n_rec = max_iters if record_iter else 0
    sel_arr = np.zeros(n_rec, dtype=np.int64)
    val_arr = np.zeros(n_rec)
    rno_arr = np.zeros(n_rec)
    ref_arr = np.zeros(n_rec if track else 0)
    cdef long[::1] sel = sel_arr
    cdef double[::1] val = val_arr
    cdef double[::1] rno = rno_arr
    cdef double[::1] ref = ref_arr
    reg_ep_arr = np.zeros(max_epochs + 2)
    ref_ep_arr = np.zeros(max_epochs + 2)
    cdef double[::1] reg_ep = reg_ep_arr
    cdef double[::1] ref_ep = ref_ep_arr

    cdef double sum_r2 = 0.0, normf2 = 0.0
    cdef long k = 0, n_ep = 0, ii, d, lo, hi, col, row, p, nvis, v
    cdef long cursor = 0
    cdef int n_fallback = 0, term = _TERM_MAX, gv_flag = 0, er_flag = 0, do_record = record_iter
    cdef double norm_r, floor2, old, newv, old_sq, new_sq, av, coef, bw2, gn2, acc
    cdef double bw[8]
    cdef double zloc[8]
    floor2 = gradient_floor * gradient_floor

    with nogil:
        sum_r2 = _refresh(rp, ri, rd, f, Z, r, gv, supp_ptr, supp_bin, supp_s, Bv, sidx)
        if track:
            normf2 = _dist2(f, fs)
        while True:
            if k % J == 0 and k // J == n_ep:
                if k > 0:
                    sum_r2 = _refresh(rp, ri, rd, f, Z, r, gv, supp_ptr, supp_bin, supp_s, Bv, sidx)
                    if track:
                        normf2 = _dist2(f, fs)
                reg_ep[n_ep] = sqrt(sum_r2) / norm_g if norm_g > 0.0 else 0.0
                if track:
                    ref_ep[n_ep] = sqrt(normf2) / norm_fs
                n_ep += 1
            if sqrt(sum_r2) <= tol:
                sum_r2 = _refresh(rp, ri, rd, f, Z, r, gv, supp_ptr, supp_bin, supp_s, Bv, sidx)
                if track:
                    normf2 = _dist2(f, fs)
                if sqrt(sum_r2) <= tol:
                    term = _TERM_TOL
                    break
            if k >= max_iters:
                term = _TERM_MAX
                break
            norm_r = sqrt(sum_r2)
            j = _select(kind, k, &r[0], J, norm_r, theta, eps, &cursor, &n_fallback)
            if j < 0:
                term = _TERM_ZERO
                break
            lo = rp[j]
            hi = rp[j + 1]
            if hi == lo:
                er_flag = 1
                break
            p = sidx[j]
            if residual_mode == _MODE_STALE:
                # selection used the cached vector; the step itself works
                # from the equation's current state
                old = r[j]
                for d in range(D):
                    acc = 0.0
                    for q in range(lo, hi):
                        acc += rd[q] * f[d, ri[q]]
                    Z[j, d] = acc
                    zloc[d] = acc
                r[j] = _h_row(supp_bin, supp_s, supp_ptr[p], supp_ptr[p + 1], Bv, D, zloc) - gv[j]
                sum_r2 += r[j] * r[j] - old * old
            else:
                for d in range(D):
                    zloc[d] = Z[j, d]
            bw2 = _bw_at(supp_bin, supp_s, supp_ptr[p], supp_ptr[p + 1], Bv, D, zloc, bw)
            gn2 = bw2 * row_norm2[j]
            if gn2 < floor2:
                gv_flag = 1
                break
            if do_record:
                sel[k] = j + 1
                val[k] = r[j]
                rno[k] = norm_r
                if track:
                    ref[k] = sqrt(normf2) / norm_fs
            coef = r[j] / gn2
            # step: f += coef * (B w (x) a) on the ray support
            for ii in range(lo, hi):
                col = ri[ii]
                av = rd[ii]
                for d in range(D):
                    old = f[d, col]
                    newv = old + coef * bw[d] * av
                    if track:
                        normf2 += (newv - fs[d, col]) * (newv - fs[d, col]) \
                                  - (old - fs[d, col]) * (old - fs[d, col])
                    f[d, col] = newv
            if residual_mode == _MODE_RECOMPUTE:
                sum_r2 = _refresh(rp, ri, rd, f, Z, r, gv, supp_ptr, supp_bin, supp_s, Bv, sidx)
            elif residual_mode == _MODE_STALE:
                old = r[j]
                for d in range(D):
                    Z[j, d] += coef * row_norm2[j] * bw[d]
                    zloc[d] = Z[j, d]
                r[j] = _h_row(supp_bin, supp_s, supp_ptr[p], supp_ptr[p + 1], Bv, D, zloc) - gv[j]
                sum_r2 += r[j] * r[j] - old * old
            else:
                # exact propagation to every equation crossing a touched pixel
                nvis = 0
                for ii in range(lo, hi):
                    col = ri[ii]
                    av = rd[ii]
                    for q in range(cp[col], cp[col + 1]):
                        row = ci[q]
                        if seen[row] == 0:
                            seen[row] = 1
                            visited[nvis] = row
                            nvis += 1
                        buf[row] += cd[q] * av
                old_sq = 0.0
                new_sq = 0.0
                for v in range(nvis):
                    row = visited[v]
                    old = r[row]
                    old_sq += old * old
                    for d in range(D):
                        Z[row, d] += coef * bw[d] * buf[row]
                        zloc[d] = Z[row, d]
                    p = sidx[row]
                    r[row] = _h_row(supp_bin, supp_s, supp_ptr[p], supp_ptr[p + 1], Bv, D, zloc) - gv[row]
                    new_sq += r[row] * r[row]
                    buf[row] = 0.0
                    seen[row] = 0
                sum_r2 += new_sq - old_sq
            k += 1
        sum_r2 = _refresh(rp, ri, rd, f, Z, r, gv, supp_ptr, supp_bin, supp_s, Bv, sidx)
        if track:
            normf2 = _dist2(f, fs)

    if gv_flag:
        raise GradientVanished(
            "||grad k|| below the gradient floor", iteration=int(k), component=int(j + 1)
        )
    if er_flag:
        raise EmptyRaySelected(f"equation {int(j) + 1} has an empty ray")

    final_re_g = sqrt(sum_r2) / norm_g if norm_g > 0.0 else sqrt(sum_r2)
    return {
        "f": f_arr,
        "selected": sel_arr[:k].copy(),
        "values": val_arr[:k].copy(),
        "res_norms": rno_arr[:k].copy(),
        "re_f_iter": ref_arr[:k].copy() if (track and record_iter) else None,
        "re_f_epoch": ref_ep_arr[:n_ep].copy() if track else None,
        "re_g_epoch": reg_ep_arr[:n_ep].copy(),
        "termination": int(term),
        "n_iterations": int(k),
        "n_fallback": int(n_fallback),
        "final_res_norm": float(sqrt(sum_r2)),
        "final_re_g": float(final_re_g),
        "final_re_f": float(sqrt(normf2) / norm_fs) if track else None,
    }
