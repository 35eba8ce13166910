"""Experiment configuration: TOML in, resolved manifest JSON out.

A manifest records every parameter that affects numerics (including the
resolved spectra/decomposition tables inline), so re-running from the
manifest alone reproduces the outputs byte for byte.
"""

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import spectral
from .core import SelectionStrategy, StopRule
from .errors import ConfigError
from .phantom import EllipseSpec, demo_phantom
from .projector import PixelGrid, build_parallel_geometry

PRESETS = ("desk", "paper", "custom")
STRATEGIES = ("cyclic", "max_residual", "theta_residual", "positive_cyclic")


@dataclass
class ExperimentConfig:
    preset: str = "desk"
    seed: int = 0
    output_dir: str = "out"
    # grid
    grid_pixels: int = 32
    grid_extent_cm: float = 2.0
    # phantom
    phantom_path: str | None = None
    supersample: int = 4
    # spectra / materials
    spectra_mode: str = "synthetic"  # synthetic | files | inline
    n_bins: int = 16
    energy_lo_kev: float = 20.0
    energy_hi_kev: float = 140.0
    peaks_kvp: tuple = (80.0, 140.0)
    filters_cm: tuple = (0.0, 0.1)
    spectra_files: tuple = ()
    material_files: tuple = ()
    # geometry (shared view/detector counts; per-spectrum angle offsets)
    n_views: int = 48
    n_detectors: int = 49
    detector_extent_cm: float = 2.2
    angle_offsets: tuple = (0.0, math.pi / 96)
    # solver
    strategy: str = "max_residual"
    theta: float = 0.0
    tau: float = 0.5
    max_epochs: int = 200
    residual_tolerance: float = 0.0
    residual_tolerance_rel: float = 5e-3
    gradient_floor: float = 1e-14
    dd_max_epochs: int = 20000
    dd_residual_tolerance: float = 1e-13
    step2_max_epochs: int = 50
    step2_residual_tolerance: float = 0.0
    # resolved tables (manifest round-trip)
    spectra_inline: tuple | None = None
    materials_inline: tuple | None = None
    energies_inline: tuple | None = None

    @property
    def n_spectra(self):
        if self.spectra_mode == "inline":
            return len(self.spectra_inline)
        if self.spectra_mode == "files":
            return len(self.spectra_files)
        return len(self.peaks_kvp)

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"experiment.preset must be one of {PRESETS}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"solver.strategy must be one of {STRATEGIES}")
        if self.strategy == "theta_residual" and not 0.0 < self.theta <= 1.0:
            raise ConfigError("solver.theta must lie in (0, 1] for theta_residual")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("solver.tau must lie in (0, 1)")
        if self.supersample not in (1, 2, 4, 8):
            raise ConfigError("phantom.supersample must be one of 1, 2, 4, 8")
        if self.spectra_mode not in ("synthetic", "files", "inline"):
            raise ConfigError("spectra.mode must be synthetic, files, or inline")
        if self.spectra_mode == "synthetic" and len(self.peaks_kvp) != len(self.filters_cm):
            raise ConfigError("spectra.peaks_kvp and spectra.filters_cm lengths differ")
        if self.spectra_mode == "files":
            if not self.spectra_files or not self.material_files:
                raise ConfigError("spectra.files and materials.files are required in files mode")
            for key, paths in (("spectra.files", self.spectra_files),
                               ("materials.files", self.material_files)):
                for p in paths:
                    if not os.path.exists(p):
                        raise ConfigError(f"{key}: no such file: {p}")
        if self.spectra_mode == "inline" and (
            self.spectra_inline is None or self.materials_inline is None
            or self.energies_inline is None
        ):
            raise ConfigError("inline mode needs spectra/materials/energies tables")
        if len(self.angle_offsets) != self.n_spectra:
            raise ConfigError(
                f"geometry.angle_offsets needs one entry per spectrum "
                f"({self.n_spectra}), got {len(self.angle_offsets)}"
            )
        if self.phantom_path is not None and not os.path.exists(self.phantom_path):
            raise ConfigError(f"phantom.path: no such file: {self.phantom_path}")
        if self.max_epochs < 1 or self.dd_max_epochs < 1 or self.step2_max_epochs < 1:
            raise ConfigError("solver epoch budgets must be >= 1")
        return self


_PAPER_OVERRIDES = dict(
    grid_pixels=128,
    n_views=384,
    n_detectors=384,
    detector_extent_cm=3.0,
    angle_offsets=(0.0, math.pi / 512),
    n_bins=64,
    max_epochs=60,
)

# TOML [section] key -> dataclass field
_SCHEMA = {
    ("experiment", "preset"): "preset",
    ("experiment", "seed"): "seed",
    ("experiment", "output_dir"): "output_dir",
    ("grid", "pixels"): "grid_pixels",
    ("grid", "extent_cm"): "grid_extent_cm",
    ("phantom", "path"): "phantom_path",
    ("phantom", "supersample"): "supersample",
    ("spectra", "mode"): "spectra_mode",
    ("spectra", "bins"): "n_bins",
    ("spectra", "energy_lo_kev"): "energy_lo_kev",
    ("spectra", "energy_hi_kev"): "energy_hi_kev",
    ("spectra", "peaks_kvp"): "peaks_kvp",
    ("spectra", "filters_cm"): "filters_cm",
    ("spectra", "files"): "spectra_files",
    ("materials", "files"): "material_files",
    ("geometry", "views"): "n_views",
    ("geometry", "detectors"): "n_detectors",
    ("geometry", "detector_extent_cm"): "detector_extent_cm",
    ("geometry", "angle_offsets"): "angle_offsets",
    ("solver", "strategy"): "strategy",
    ("solver", "theta"): "theta",
    ("solver", "tau"): "tau",
    ("solver", "max_epochs"): "max_epochs",
    ("solver", "residual_tolerance"): "residual_tolerance",
    ("solver", "residual_tolerance_rel"): "residual_tolerance_rel",
    ("solver", "gradient_floor"): "gradient_floor",
    ("solver", "dd_max_epochs"): "dd_max_epochs",
    ("solver", "dd_residual_tolerance"): "dd_residual_tolerance",
    ("solver", "step2_max_epochs"): "step2_max_epochs",
    ("solver", "step2_residual_tolerance"): "step2_residual_tolerance",
}

_PATH_FIELDS = ("phantom_path", "output_dir")
_PATH_TUPLE_FIELDS = ("spectra_files", "material_files")


def _coerce(value):
    if isinstance(value, list):
        return tuple(_coerce(v) for v in value)
    return value


def load_config(path):
    """Parse a TOML config; paths resolve relative to the config file."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    preset = data.get("experiment", {}).get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"experiment.preset must be one of {PRESETS}")
    fields = {}
    if preset == "paper":
        fields.update(_PAPER_OVERRIDES)
    for section, table in data.items():
        if not isinstance(table, dict):
            raise ConfigError(f"top-level key {section!r} must be a section")
        for key, value in table.items():
            target = _SCHEMA.get((section, key))
            if target is None:
                raise ConfigError(f"unknown config key [{section}].{key}")
            fields[target] = _coerce(value)
    cfg = dataclasses.replace(ExperimentConfig(), **fields)

    base = os.path.dirname(os.path.abspath(path))
    for name in _PATH_FIELDS:
        val = getattr(cfg, name)
        if val is not None and not os.path.isabs(val):
            setattr(cfg, name, os.path.normpath(os.path.join(base, val)))
    for name in _PATH_TUPLE_FIELDS:
        vals = tuple(
            v if os.path.isabs(v) else os.path.normpath(os.path.join(base, v))
            for v in getattr(cfg, name)
        )
        setattr(cfg, name, vals)
    return cfg.validate()


def from_manifest(path):
    """Rebuild a config from a manifest written by a previous run."""
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest: {exc}") from exc
    if manifest.get("kind") != "nlkacz-manifest":
        raise ConfigError(f"{path}: not a manifest (missing kind marker)")
    raw = manifest.get("config", {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    fields = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"manifest config has unknown key {key!r}")
        fields[key] = _coerce(value)
    return dataclasses.replace(ExperimentConfig(), **fields).validate()


def load_any(path):
    """Dispatch on extension: .json is a manifest, anything else TOML."""
    if str(path).endswith(".json"):
        return from_manifest(path)
    return load_config(path)


def to_manifest(cfg, command):
    """Resolved-manifest dict; every numeric input appears here."""
    c = dataclasses.asdict(cfg)
    del c["output_dir"]  # placement does not affect numerics
    # freeze the model tables so the manifest alone reproduces the run
    model = build_model(cfg)
    c["spectra_mode"] = "inline"
    c["spectra_inline"] = model.spectra.tolist()
    c["materials_inline"] = model.b_matrix.tolist()
    c["energies_inline"] = model.energies.tolist()
    spec = build_phantom_spec(cfg)
    return {
        "kind": "nlkacz-manifest",
        "format_version": 1,
        "command": command,
        "config": c,
        "phantom_ellipses": [dataclasses.asdict(e) for e in spec.ellipses],
    }


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_grid(cfg):
    return PixelGrid.square(cfg.grid_pixels, cfg.grid_extent_cm)


def build_geometries(cfg):
    return [
        build_parallel_geometry(
            cfg.n_views, offset, cfg.n_detectors, cfg.detector_extent_cm
        )
        for offset in cfg.angle_offsets
    ]


def build_model(cfg):
    if cfg.spectra_mode == "inline":
        return spectral.SpectralModel(
            np.array(cfg.spectra_inline, dtype=float),
            np.array(cfg.materials_inline, dtype=float),
            np.array(cfg.energies_inline, dtype=float),
        )
    if cfg.spectra_mode == "files":
        return spectral.load_tables(cfg.spectra_files, cfg.material_files)
    return spectral.synthetic_model(
        n_bins=cfg.n_bins,
        energy_lo=cfg.energy_lo_kev,
        energy_hi=cfg.energy_hi_kev,
        peaks_kvp=cfg.peaks_kvp,
        filters_cm=cfg.filters_cm,
    )


def build_phantom_spec(cfg):
    if cfg.phantom_path is None:
        return demo_phantom()
    return EllipseSpec.from_json(cfg.phantom_path)


def build_strategy(cfg):
    if cfg.strategy == "theta_residual":
        return SelectionStrategy.theta_residual(cfg.theta)
    return SelectionStrategy(kind=cfg.strategy)


def onestep_stop(cfg, data_norm=None):
    tol = cfg.residual_tolerance
    if cfg.residual_tolerance_rel > 0.0 and data_norm is not None:
        tol = max(tol, cfg.residual_tolerance_rel * data_norm)
    return StopRule(
        max_epochs=cfg.max_epochs,
        residual_tolerance=tol,
        gradient_floor=cfg.gradient_floor,
    )


def dd_stop(cfg):
    return StopRule(
        max_epochs=cfg.dd_max_epochs,
        residual_tolerance=cfg.dd_residual_tolerance,
        gradient_floor=cfg.gradient_floor,
    )


def step2_stop(cfg):
    return StopRule(
        max_epochs=cfg.step2_max_epochs,
        residual_tolerance=cfg.step2_residual_tolerance,
        gradient_floor=cfg.gradient_floor,
    )
