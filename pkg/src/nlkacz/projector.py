"""Discrete X-ray transform on a centered pixel grid.

Parallel-beam geometry: a view at angle phi sends rays along direction
(-sin phi, cos phi); a ray with detector offset t passes through the point
t * (cos phi, sin phi).  Ray tracing returns exact per-pixel intersection
lengths (cm).  Pixel (r, c) covers the half-open cell
[x_c, x_c + h) x [y_r, y_r + h); a ray running exactly along an interior
gridline is assigned to the lower-index pixel.
"""

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, OutOfDomain

_MAGIC = b"SPRJ1"


@dataclass(frozen=True)
class PixelGrid:
    """Square-pixel image grid centered at the origin."""

    nx: int
    ny: int
    extent_x: float
    extent_y: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise OutOfDomain("grid needs at least one pixel per axis")
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise OutOfDomain("grid extent must be positive")
        hx = self.extent_x / self.nx
        hy = self.extent_y / self.ny
        if abs(hx - hy) > 1e-12 * max(hx, hy):
            raise OutOfDomain(f"pixels must be square (hx={hx}, hy={hy})")

    @classmethod
    def square(cls, n, extent):
        return cls(nx=n, ny=n, extent_x=float(extent), extent_y=float(extent))

    @property
    def h(self):
        return self.extent_x / self.nx

    @property
    def n_pixels(self):
        return self.nx * self.ny

    @property
    def x0(self):
        return -self.extent_x / 2.0

    @property
    def y0(self):
        return -self.extent_y / 2.0

    @property
    def diagonal(self):
        return float(np.hypot(self.extent_x, self.extent_y))


@dataclass(frozen=True)
class ParallelGeometry:
    """One spectrum's view angles (radians) and detector offsets (cm)."""

    angles: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        a = np.array(self.angles, dtype=float)
        t = np.array(self.offsets, dtype=float)
        if a.ndim != 1 or t.ndim != 1 or a.size < 1 or t.size < 1:
            raise DimensionMismatch("angles and offsets must be nonempty 1-d arrays")
        if np.any(a < 0) or np.any(a >= 2 * np.pi):
            raise OutOfDomain("angles must lie in [0, 2*pi)")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise OutOfDomain("detector offsets must be strictly increasing")
        a.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "offsets", t)

    @property
    def n_views(self):
        return int(self.angles.size)

    @property
    def n_dets(self):
        return int(self.offsets.size)

    @property
    def n_rays(self):
        return self.n_views * self.n_dets

    def ray_params(self, ray):
        """(angle, offset) of 0-based ray index; rays are view-major."""
        return float(self.angles[ray // self.n_dets]), float(self.offsets[ray % self.n_dets])


def build_parallel_geometry(n_views, angle_offset, n_dets, det_extent):
    """Uniform half-turn view set and centered uniform detector offsets.

    Views sit at angle_offset + k*pi/n_views; detectors span
    [-det_extent/2, det_extent/2] inclusive (a single detector sits at 0).
    """
    if n_views < 1 or n_dets < 1:
        raise OutOfDomain("need n_views >= 1 and n_dets >= 1")
    if det_extent <= 0:
        raise OutOfDomain("det_extent must be positive")
    angles = (angle_offset + np.pi * np.arange(n_views) / n_views) % (2.0 * np.pi)
    if n_dets == 1:
        offsets = np.zeros(1)
    else:
        offsets = np.linspace(-det_extent / 2.0, det_extent / 2.0, n_dets)
    return ParallelGeometry(angles=angles, offsets=offsets)


def _gridline_index(coord, origin, h, n):
    """Cell index for an axis-aligned ray at a constant coordinate."""
    u = (coord - origin) / h
    c = int(np.floor(u))
    if u == np.floor(u) and c > 0:
        c -= 1  # on an interior gridline: lower-index pixel wins
    return min(max(c, 0), n - 1)


def trace_ray(grid, angle, offset):
    """Exact intersection lengths of one ray with every crossed pixel.

    Returns ``(pixel_indices, lengths)`` ordered by pixel index; both empty
    when the ray misses the grid.
    """
    dx, dy = -np.sin(angle), np.cos(angle)
    px, py = offset * np.cos(angle), offset * np.sin(angle)
    x0, y0, h = grid.x0, grid.y0, grid.h
    x1, y1 = x0 + grid.extent_x, y0 + grid.extent_y

    if dx == 0.0 or dy == 0.0:
        # axis-aligned: full-height (or width) crossings of one row/column
        if dx == 0.0:
            if not x0 <= px <= x1:
                return np.empty(0, dtype=np.int64), np.empty(0)
            c = _gridline_index(px, x0, h, grid.nx)
            idx = np.arange(grid.ny, dtype=np.int64) * grid.nx + c
        else:
            if not y0 <= py <= y1:
                return np.empty(0, dtype=np.int64), np.empty(0)
            r = _gridline_index(py, y0, h, grid.ny)
            idx = r * grid.nx + np.arange(grid.nx, dtype=np.int64)
        return idx, np.full(idx.shape, h)

    tx = np.sort([(x0 - px) / dx, (x1 - px) / dx])
    ty = np.sort([(y0 - py) / dy, (y1 - py) / dy])
    tmin = max(tx[0], ty[0])
    tmax = min(tx[1], ty[1])
    if tmax <= tmin:
        return np.empty(0, dtype=np.int64), np.empty(0)

    kx = (x0 + h * np.arange(grid.nx + 1) - px) / dx
    ky = (y0 + h * np.arange(grid.ny + 1) - py) / dy
    ts = np.concatenate([[tmin, tmax], kx, ky])
    ts = np.unique(ts[(ts >= tmin) & (ts <= tmax)])
    if ts.size < 2:
        return np.empty(0, dtype=np.int64), np.empty(0)
    lengths = np.diff(ts)  # |direction| = 1, so dt is length in cm
    mids = (ts[:-1] + ts[1:]) / 2.0
    cols = np.clip(((px + mids * dx - x0) / h).astype(np.int64), 0, grid.nx - 1)
    rows = np.clip(((py + mids * dy - y0) / h).astype(np.int64), 0, grid.ny - 1)
    keep = lengths > 0.0
    idx = rows[keep] * grid.nx + cols[keep]
    lengths = lengths[keep]
    # aggregate any duplicate cells (spurious boundary crossings), sort by index
    uniq, inv = np.unique(idx, return_inverse=True)
    acc = np.zeros(uniq.shape)
    np.add.at(acc, inv, lengths)
    return uniq, acc


@dataclass(frozen=True)
class SparseProjection:
    """Per-ray sparse intersection rows as a CSR matrix (rays x pixels)."""

    matrix: sp.csr_matrix

    @property
    def n_rays(self):
        return int(self.matrix.shape[0])

    @property
    def n_pixels(self):
        return int(self.matrix.shape[1])

    @property
    def nnz(self):
        return int(self.matrix.nnz)

    def row(self, j):
        """(pixel indices, lengths) of 0-based ray j."""
        lo, hi = self.matrix.indptr[j], self.matrix.indptr[j + 1]
        return self.matrix.indices[lo:hi].astype(np.int64), self.matrix.data[lo:hi]

    def empty_rays(self):
        return np.nonzero(np.diff(self.matrix.indptr) == 0)[0]

    def row_norms_sq(self):
        sq = self.matrix.multiply(self.matrix)
        return np.asarray(sq.sum(axis=1)).ravel()


def build_projection(grid, geometry):
    """Trace every ray of a geometry into a SparseProjection."""
    indptr = np.zeros(geometry.n_rays + 1, dtype=np.int64)
    all_idx = []
    all_len = []
    for j in range(geometry.n_rays):
        angle, offset = geometry.ray_params(j)
        idx, lens = trace_ray(grid, angle, offset)
        all_idx.append(idx)
        all_len.append(lens)
        indptr[j + 1] = indptr[j] + idx.size
    indices = np.concatenate(all_idx) if all_idx else np.empty(0, dtype=np.int64)
    data = np.concatenate(all_len) if all_len else np.empty(0)
    mat = sp.csr_matrix((data, indices, indptr), shape=(geometry.n_rays, grid.n_pixels))
    return SparseProjection(matrix=mat)


def forward(proj, f):
    """Sinogram A f of an image vector."""
    f = np.asarray(f, dtype=float)
    if f.shape != (proj.n_pixels,):
        raise DimensionMismatch(f"image must have shape ({proj.n_pixels},)")
    return proj.matrix @ f


def adjoint(proj, g):
    """Exact transpose A^T g of the forward map."""
    g = np.asarray(g, dtype=float)
    if g.shape != (proj.n_rays,):
        raise DimensionMismatch(f"sinogram must have shape ({proj.n_rays},)")
    return proj.matrix.T @ g


def save_projection(path, proj):
    """Binary CSR dump: magic SPRJ1, u64 rows/cols/nnz, then indptr/indices/values."""
    m = proj.matrix
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQQ", m.shape[0], m.shape[1], m.nnz))
        fh.write(np.asarray(m.indptr, dtype="<u8").tobytes())
        fh.write(np.asarray(m.indices, dtype="<u8").tobytes())
        fh.write(np.asarray(m.data, dtype="<f8").tobytes())


def load_projection(path):
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise OutOfDomain(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        rows, cols, nnz = struct.unpack("<QQQ", fh.read(24))
        indptr = np.frombuffer(fh.read(8 * (rows + 1)), dtype="<u8").astype(np.int64)
        indices = np.frombuffer(fh.read(8 * nnz), dtype="<u8").astype(np.int64)
        data = np.frombuffer(fh.read(8 * nnz), dtype="<f8").astype(float)
    mat = sp.csr_matrix((data, indices, indptr), shape=(rows, cols))
    return SparseProjection(matrix=mat)
