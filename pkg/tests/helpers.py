"""Shared test fixtures: random convex systems and independent oracles.

Everything here stays independent of the code paths it checks: the
classical row-action reference is written with plain Python loops, the
projector oracle clips the ray against each pixel rectangle on its own,
and the area oracle evaluates the circle-polygon intersection in closed
form.
"""

import math

import numpy as np

from nlkacz.core import ComponentSystem


# ---------------------------------------------------------------------------
# random component-wise convex systems with a known solution
# ---------------------------------------------------------------------------


def quadratic_system(rng, dim, n_components, curvature=1.0, spread=1.0):
    """Consistent system of convex quadratics F_j = q_j - q_j(x*).

    q_j(x) = curvature/2 * (x-c_j)^T Q_j (x-c_j) + b_j^T x with Q_j PSD.
    """
    x_star = rng.normal(size=dim) * spread
    comps = []
    for _ in range(n_components):
        m = rng.normal(size=(dim, dim))
        q = curvature * (m @ m.T) / dim
        c = rng.normal(size=dim) * spread
        b = rng.normal(size=dim)
        comps.append((q, c, b))

    def raw(j, x):
        q, c, b = comps[j - 1]
        return 0.5 * (x - c) @ q @ (x - c) + b @ x

    def component(j, x):
        q, c, b = comps[j - 1]
        return raw(j, x) - raw(j, x_star), q @ (x - c) + b

    return ComponentSystem(dim, n_components, component, solution=x_star)


def logsumexp_system(rng, dim, n_components, n_terms=4, scale=1.0):
    """Consistent system of log-sum-exp components F_j = q_j - q_j(x*)."""
    x_star = rng.normal(size=dim)
    comps = [
        (rng.normal(size=(n_terms, dim)) * scale, rng.normal(size=n_terms))
        for _ in range(n_components)
    ]

    def raw(j, x):
        a, d = comps[j - 1]
        t = a @ x + d
        shift = t.max()
        return shift + math.log(np.exp(t - shift).sum())

    def component(j, x):
        a, d = comps[j - 1]
        t = a @ x + d
        t = t - t.max()
        w = np.exp(t)
        w /= w.sum()
        return raw(j, x) - raw(j, x_star), a.T @ w

    return ComponentSystem(dim, n_components, component, solution=x_star)


def convex_corpus(seed, count, max_dim=6, max_components=10):
    """Seeded mix of quadratic and log-sum-exp systems (consistent, convex)."""
    rng = np.random.default_rng(seed)
    systems = []
    for i in range(count):
        dim = int(rng.integers(2, max_dim + 1))
        n_comp = int(rng.integers(dim, max_components + 1))
        if i % 2 == 0:
            systems.append(quadratic_system(rng, dim, n_comp))
        else:
            systems.append(logsumexp_system(rng, dim, n_comp))
    return systems


# ---------------------------------------------------------------------------
# independent classical row-action reference (plain Python arithmetic)
# ---------------------------------------------------------------------------


def classical_kaczmarz_iterates(A, b, x0, n_iters):
    """Cyclic projections onto hyperplanes; returns iterates x^0..x^n."""
    m = len(b)
    n = len(x0)
    x = [float(v) for v in x0]
    history = [list(x)]
    for k in range(n_iters):
        i = k % m
        dot = 0.0
        nrm = 0.0
        for jj in range(n):
            dot += A[i][jj] * x[jj]
            nrm += A[i][jj] * A[i][jj]
        coef = (b[i] - dot) / nrm
        for jj in range(n):
            x[jj] += coef * A[i][jj]
        history.append(list(x))
    return np.asarray(history)


# ---------------------------------------------------------------------------
# projector oracle: clip the ray against each pixel rectangle independently
# ---------------------------------------------------------------------------


def clip_ray_to_box(px, py, dx, dy, x_lo, x_hi, y_lo, y_hi):
    """Length of {p + t d} inside an axis-aligned box (|d| = 1)."""
    tmin, tmax = -math.inf, math.inf
    for p, d, lo, hi in ((px, dx, x_lo, x_hi), (py, dy, y_lo, y_hi)):
        if d == 0.0:
            if not lo <= p <= hi:
                return 0.0
        else:
            t1 = (lo - p) / d
            t2 = (hi - p) / d
            if t1 > t2:
                t1, t2 = t2, t1
            tmin = max(tmin, t1)
            tmax = min(tmax, t2)
    return max(0.0, tmax - tmin)


def oracle_trace(grid, angle, offset):
    """Per-pixel lengths via independent rectangle clipping."""
    dx, dy = -math.sin(angle), math.cos(angle)
    px, py = offset * math.cos(angle), offset * math.sin(angle)
    h = grid.h
    idx = []
    lens = []
    for r in range(grid.ny):
        for c in range(grid.nx):
            x_lo = grid.x0 + c * h
            y_lo = grid.y0 + r * h
            L = clip_ray_to_box(px, py, dx, dy, x_lo, x_lo + h, y_lo, y_lo + h)
            if L > 0.0:
                idx.append(r * grid.nx + c)
                lens.append(L)
    return np.asarray(idx, dtype=np.int64), np.asarray(lens)


# ---------------------------------------------------------------------------
# exact circle-polygon intersection area (Green's theorem with arcs)
# ---------------------------------------------------------------------------


def _edge_contribution(p1, p2, r):
    d = p2 - p1
    a = float(d @ d)
    b = 2.0 * float(p1 @ d)
    c = float(p1 @ p1) - r * r
    cuts = []
    disc = b * b - 4.0 * a * c
    if disc > 0.0 and a > 0.0:
        sq = math.sqrt(disc)
        for t in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
            if 0.0 < t < 1.0:
                cuts.append(t)
    points = [p1] + [p1 + t * d for t in sorted(cuts)] + [p2]
    total = 0.0
    for q1, q2 in zip(points[:-1], points[1:]):
        mid = (q1 + q2) / 2.0
        if float(mid @ mid) <= r * r:
            total += 0.5 * (q1[0] * q2[1] - q1[1] * q2[0])
        else:
            th1 = math.atan2(q1[1], q1[0])
            th2 = math.atan2(q2[1], q2[0])
            dth = th2 - th1
            while dth <= -math.pi:
                dth += 2.0 * math.pi
            while dth > math.pi:
                dth -= 2.0 * math.pi
            total += 0.5 * r * r * dth
    return total


def circle_polygon_area(poly, r=1.0):
    """Exact area of disk(0, r) intersected with a simple polygon."""
    poly = np.asarray(poly, dtype=float)
    total = 0.0
    n = poly.shape[0]
    for i in range(n):
        total += _edge_contribution(poly[i], poly[(i + 1) % n], r)
    return abs(total)


def ellipse_pixel_fraction(ellipse, x_lo, y_lo, h):
    """Exact covered fraction of one pixel by one ellipse."""
    ct, st = math.cos(ellipse.theta), math.sin(ellipse.theta)
    corners = np.array(
        [
            [x_lo, y_lo],
            [x_lo + h, y_lo],
            [x_lo + h, y_lo + h],
            [x_lo, y_lo + h],
        ]
    )
    uv = np.empty_like(corners)
    for i, (x, y) in enumerate(corners):
        uv[i, 0] = ((x - ellipse.cx) * ct + (y - ellipse.cy) * st) / ellipse.a
        uv[i, 1] = (-(x - ellipse.cx) * st + (y - ellipse.cy) * ct) / ellipse.b
    return circle_polygon_area(uv, 1.0) * ellipse.a * ellipse.b / (h * h)
