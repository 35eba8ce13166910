"""Analytic ellipse phantom rasterized into stacked basis images.

Each ellipse adds its value (in [-1, 1]) times the covered-subsample
fraction to one basis image; accumulated pixel values are clamped to
[0, 1].  The default demo phantom pairs a skull-like ring on the second
basis with a brain-like fill plus small inserts on the first; the numbers
are documented here, not claimed to match any anatomical reference.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionMismatch, OutOfDomain, SchemaError

SUPERSAMPLE_CHOICES = (1, 2, 4, 8)


@dataclass(frozen=True)
class Ellipse:
    """One additive ellipse: center (cm), semi-axes (cm), rotation (rad), value."""

    basis: int
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    value: float

    def __post_init__(self):
        if self.basis < 0:
            raise OutOfDomain("basis index must be >= 0")
        if self.a <= 0 or self.b <= 0:
            raise OutOfDomain("semi-axes must be positive")
        if not -1.0 <= self.value <= 1.0:
            raise OutOfDomain("ellipse value must lie in [-1, 1]")


@dataclass(frozen=True)
class EllipseSpec:
    """Per-basis list of additive ellipses."""

    ellipses: tuple
    n_bases: int

    @classmethod
    def from_list(cls, ellipses, n_bases=None):
        items = tuple(
            e if isinstance(e, Ellipse) else Ellipse(**e) for e in ellipses
        )
        if n_bases is None:
            n_bases = 1 + max((e.basis for e in items), default=0)
        for e in items:
            if e.basis >= n_bases:
                raise OutOfDomain(f"ellipse basis {e.basis} >= n_bases {n_bases}")
        return cls(ellipses=items, n_bases=int(n_bases))

    @classmethod
    def from_json(cls, path, n_bases=None):
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}: {exc}") from exc
        if not isinstance(data, list):
            raise SchemaError(f"{path}: phantom spec must be a JSON array")
        try:
            return cls.from_list(data, n_bases=n_bases)
        except TypeError as exc:
            raise SchemaError(f"{path}: bad ellipse entry ({exc})") from exc

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([asdict(e) for e in self.ellipses], fh, indent=2, sort_keys=True)
            fh.write("\n")


def demo_phantom():
    """Built-in two-basis head-like phantom (values are design choices)."""
    return EllipseSpec.from_list(
        [
            # basis 0 ("water"): brain fill plus three small inserts
            dict(basis=0, cx=0.0, cy=0.0, a=0.70, b=0.78, theta=0.0, value=0.85),
            dict(basis=0, cx=-0.22, cy=0.18, a=0.12, b=0.16, theta=0.35, value=0.10),
            dict(basis=0, cx=0.24, cy=0.15, a=0.10, b=0.14, theta=-0.25, value=-0.15),
            dict(basis=0, cx=0.02, cy=-0.32, a=0.16, b=0.09, theta=0.0, value=0.08),
            # basis 1 ("bone"): skull ring = outer ellipse minus inner
            dict(basis=1, cx=0.0, cy=0.0, a=0.82, b=0.90, theta=0.0, value=1.0),
            dict(basis=1, cx=0.0, cy=0.0, a=0.70, b=0.78, theta=0.0, value=-1.0),
            # one small bone insert inside
            dict(basis=1, cx=0.18, cy=-0.28, a=0.07, b=0.07, theta=0.0, value=0.6),
        ],
        n_bases=2,
    )


@dataclass(frozen=True)
class BasisImages:
    """D stacked image vectors over a pixel grid, values in [0, 1]."""

    data: np.ndarray  # (D, n_pixels)
    nx: int
    ny: int

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 2 or d.shape[1] != self.nx * self.ny:
            raise DimensionMismatch("data must be (D, nx*ny)")
        if not np.all(np.isfinite(d)):
            raise OutOfDomain("basis images must be finite")
        if d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise OutOfDomain("basis images must take values in [0, 1]")
        object.__setattr__(self, "data", d)

    @property
    def n_bases(self):
        return int(self.data.shape[0])

    @property
    def n_pixels(self):
        return int(self.data.shape[1])

    def image(self, d):
        return self.data[d].reshape(self.ny, self.nx)


def rasterize(spec, grid, supersample=4):
    """Rasterize an ellipse spec onto a grid with subpixel area sampling.

    Pixel value = clamp(sum over ellipses of value * covered fraction), the
    fraction estimated on a supersample^2 point grid per pixel.
    """
    if supersample not in SUPERSAMPLE_CHOICES:
        raise OutOfDomain(f"supersample must be one of {SUPERSAMPLE_CHOICES}")
    ss = supersample
    nx, ny, h = grid.nx, grid.ny, grid.h
    # sub-sample point centers along each axis
    xs = grid.x0 + (np.arange(nx * ss) + 0.5) * (h / ss)
    ys = grid.y0 + (np.arange(ny * ss) + 0.5) * (h / ss)
    X, Y = np.meshgrid(xs, ys)
    out = np.zeros((spec.n_bases, ny, nx))
    for e in spec.ellipses:
        ct, st = np.cos(e.theta), np.sin(e.theta)
        u = ((X - e.cx) * ct + (Y - e.cy) * st) / e.a
        v = (-(X - e.cx) * st + (Y - e.cy) * ct) / e.b
        inside = (u * u + v * v) <= 1.0
        frac = inside.reshape(ny, ss, nx, ss).mean(axis=(1, 3))
        out[e.basis] += e.value * frac
    np.clip(out, 0.0, 1.0, out=out)
    return BasisImages(data=out.reshape(spec.n_bases, -1), nx=nx, ny=ny)


# ---------------------------------------------------------------------------
# file formats: raw f64 + JSON sidecar, optional PGM preview
# ---------------------------------------------------------------------------


def save_basis_images(images, path_base, pgm=False):
    """Write {base}.raw (basis-major little-endian f64), {base}.json sidecar,
    and optionally one 8-bit PGM preview per basis (min-max scaled)."""
    raw_path = f"{path_base}.raw"
    with open(raw_path, "wb") as fh:
        fh.write(np.ascontiguousarray(images.data, dtype="<f8").tobytes())
    sidecar = {
        "width": images.nx,
        "height": images.ny,
        "dtype": "f64le",
        "basis_count": images.n_bases,
    }
    with open(f"{path_base}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if pgm:
        for d in range(images.n_bases):
            _write_pgm(f"{path_base}_b{d}.pgm", images.image(d))
    return raw_path


def _write_pgm(path, img):
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    byte = np.round((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(byte.tobytes())


def load_basis_images(path_base):
    with open(f"{path_base}.json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    for key in ("width", "height", "dtype", "basis_count"):
        if key not in sidecar:
            raise SchemaError(f"{path_base}.json: missing key {key!r}")
    if sidecar["dtype"] != "f64le":
        raise SchemaError(f"{path_base}.json: unsupported dtype {sidecar['dtype']!r}")
    nx, ny, nb = sidecar["width"], sidecar["height"], sidecar["basis_count"]
    raw = np.fromfile(f"{path_base}.raw", dtype="<f8")
    if raw.size != nx * ny * nb:
        raise SchemaError(f"{path_base}.raw: size does not match sidecar")
    return BasisImages(data=raw.reshape(nb, nx * ny).astype(float), nx=nx, ny=ny)
