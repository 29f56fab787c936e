"""Scenario configuration: a single JSON file with typed sections.

Sections mirror the pipeline phases: buildings_path, wind, mesh, transport,
rom, output.  Units are SI throughout (meters, seconds, m/s, m^2/s, ppm);
plume/probe coordinates are in the local metric frame whose origin is the
building-vertex centroid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class WindConfig:
    direction: tuple[float, float]
    base_speed: float
    nu: float
    mu: tuple[float, ...]         # factors solved by the wind phase
    mu_range: tuple[float, float]  # parameter range of the reduced model
    ramp_width: float = 0.0       # inflow-corner fade length; 0 = flat profile


@dataclass(frozen=True)
class MeshConfig:
    lc_building: float
    lc_gap: float
    lc_far: float
    gap_distance: float
    br_max: float = 0.17
    domain_bounds: tuple[float, float, float, float] | None = None  # manual override


@dataclass(frozen=True)
class PlumeConfig:
    x_c: tuple[float, float]
    amplitude: float
    radius: float
    width: float


@dataclass(frozen=True)
class TransportConfig:
    k: float
    dt: float
    t_final: float
    plume: PlumeConfig
    probes: tuple[tuple[float, float], ...] = ()
    dirichlet_inflow_zero: bool = False
    wind_mu: float | None = None  # defaults to the first wind.mu entry


@dataclass(frozen=True)
class RomConfig:
    n_snapshots: int = 50
    n_test: int = 20
    n_r: int = 10
    n_m: int = 20
    seed: int = 0


@dataclass(frozen=True)
class OutputConfig:
    directory: str
    save_interval: int = 10
    formats: tuple[str, ...] = ("vtk", "geojson", "csv")
    contour_levels: tuple[float, ...] = (10.0, 100.0, 1000.0)
    subdivide_p2: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    buildings_path: Path
    wind: WindConfig
    mesh: MeshConfig
    transport: TransportConfig
    rom: RomConfig
    output: OutputConfig
    config_dir: Path = field(default=Path("."))

    def resolved(self) -> dict:
        """Plain-dict snapshot of every resolved value (for the manifest)."""
        return {
            "buildings_path": str(self.buildings_path),
            "wind": {
                "direction": list(self.wind.direction),
                "base_speed": self.wind.base_speed,
                "nu": self.wind.nu,
                "mu": list(self.wind.mu),
                "mu_range": list(self.wind.mu_range),
                "ramp_width": self.wind.ramp_width,
            },
            "mesh": {
                "lc_building": self.mesh.lc_building,
                "lc_gap": self.mesh.lc_gap,
                "lc_far": self.mesh.lc_far,
                "gap_distance": self.mesh.gap_distance,
                "br_max": self.mesh.br_max,
                "domain_bounds": (list(self.mesh.domain_bounds)
                                  if self.mesh.domain_bounds else None),
            },
            "transport": {
                "k": self.transport.k,
                "dt": self.transport.dt,
                "t_final": self.transport.t_final,
                "plume": {
                    "x_c": list(self.transport.plume.x_c),
                    "amplitude": self.transport.plume.amplitude,
                    "radius": self.transport.plume.radius,
                    "width": self.transport.plume.width,
                },
                "probes": [list(p) for p in self.transport.probes],
                "dirichlet_inflow_zero": self.transport.dirichlet_inflow_zero,
                "wind_mu": self.transport.wind_mu,
            },
            "rom": {
                "n_snapshots": self.rom.n_snapshots,
                "n_test": self.rom.n_test,
                "n_r": self.rom.n_r,
                "n_m": self.rom.n_m,
                "seed": self.rom.seed,
            },
            "output": {
                "directory": self.output.directory,
                "save_interval": self.output.save_interval,
                "formats": list(self.output.formats),
                "contour_levels": list(self.output.contour_levels),
                "subdivide_p2": self.output.subdivide_p2,
            },
        }


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing required key '{key}' in section '{where}'")
    return section[key]


def _pair(value, where: str) -> tuple[float, float]:
    try:
        a, b = value
        return (float(a), float(b))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{where}' must be a pair of numbers, got {value!r}") from exc


def load_config(path) -> ScenarioConfig:
    """Parse and validate a scenario file; every error maps to ConfigError."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")

    cfg_dir = path.parent
    buildings = cfg_dir / str(_require(doc, "buildings_path", "<root>"))
    if not buildings.exists():
        raise InputError(f"buildings file does not exist: {buildings}")

    wind_doc = _require(doc, "wind", "<root>")
    mu_raw = wind_doc.get("mu", 1.0)
    mu = tuple(float(m) for m in (mu_raw if isinstance(mu_raw, (list, tuple)) else [mu_raw]))
    if not mu:
        raise ConfigError("wind.mu must list at least one inflow factor")
    mu_range = _pair(wind_doc.get("mu_range", (min(mu), max(mu))), "wind.mu_range")
    if not mu_range[1] > mu_range[0]:
        raise ConfigError(f"wind.mu_range must be a nonempty interval, got {mu_range}")
    wind = WindConfig(
        direction=_pair(_require(wind_doc, "direction", "wind"), "wind.direction"),
        base_speed=float(_require(wind_doc, "base_speed", "wind")),
        nu=float(_require(wind_doc, "nu", "wind")),
        mu=mu,
        mu_range=mu_range,
        ramp_width=float(wind_doc.get("ramp_width", 0.0)),
    )
    if wind.nu <= 0:
        raise ConfigError(f"wind.nu must be positive, got {wind.nu}")
    if wind.ramp_width < 0:
        raise ConfigError(f"wind.ramp_width must be non-negative, got {wind.ramp_width}")

    mesh_doc = _require(doc, "mesh", "<root>")
    try:
        bounds_raw = mesh_doc.get("domain_bounds")
        mesh = MeshConfig(
            lc_building=float(_require(mesh_doc, "lc_building", "mesh")),
            lc_gap=float(_require(mesh_doc, "lc_gap", "mesh")),
            lc_far=float(_require(mesh_doc, "lc_far", "mesh")),
            gap_distance=float(_require(mesh_doc, "gap_distance", "mesh")),
            br_max=float(mesh_doc.get("br_max", 0.17)),
            domain_bounds=(tuple(float(v) for v in bounds_raw)
                           if bounds_raw is not None else None),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid mesh section: {exc}") from exc
    if mesh.domain_bounds is not None and len(mesh.domain_bounds) != 4:
        raise ConfigError("mesh.domain_bounds must be [xmin, ymin, xmax, ymax]")
    if not (0 < mesh.lc_building <= mesh.lc_gap <= mesh.lc_far):
        raise ConfigError("mesh sizes must satisfy 0 < lc_building <= lc_gap <= lc_far")
    if not 0 < mesh.br_max < 1:
        raise ConfigError(f"mesh.br_max must lie in (0, 1), got {mesh.br_max}")

    tr_doc = _require(doc, "transport", "<root>")
    plume_doc = _require(tr_doc, "plume", "transport")
    plume = PlumeConfig(
        x_c=_pair(_require(plume_doc, "x_c", "transport.plume"), "plume.x_c"),
        amplitude=float(_require(plume_doc, "amplitude", "transport.plume")),
        radius=float(_require(plume_doc, "radius", "transport.plume")),
        width=float(_require(plume_doc, "width", "transport.plume")),
    )
    transport = TransportConfig(
        k=float(_require(tr_doc, "k", "transport")),
        dt=float(_require(tr_doc, "dt", "transport")),
        t_final=float(_require(tr_doc, "t_final", "transport")),
        plume=plume,
        probes=tuple(_pair(p, "transport.probes") for p in tr_doc.get("probes", [])),
        dirichlet_inflow_zero=bool(tr_doc.get("dirichlet_inflow_zero", False)),
        wind_mu=(float(tr_doc["wind_mu"]) if "wind_mu" in tr_doc else None),
    )
    if transport.dt <= 0 or transport.t_final < transport.dt:
        raise ConfigError("transport needs dt > 0 and t_final >= dt")
    if transport.k < 0:
        raise ConfigError(f"transport.k must be non-negative, got {transport.k}")

    rom_doc = doc.get("rom", {})
    rom = RomConfig(
        n_snapshots=int(rom_doc.get("n_snapshots", 50)),
        n_test=int(rom_doc.get("n_test", 20)),
        n_r=int(rom_doc.get("n_r", 10)),
        n_m=int(rom_doc.get("n_m", 20)),
        seed=int(rom_doc.get("seed", 0)),
    )
    if rom.n_snapshots < 2:
        raise ConfigError("rom.n_snapshots must be at least 2")
    if rom.n_r < 1 or rom.n_r > rom.n_snapshots:
        raise ConfigError("rom.n_r must lie in [1, n_snapshots]")
    if rom.n_m < 1 or rom.n_m > rom.n_snapshots:
        raise ConfigError("rom.n_m must lie in [1, n_snapshots]")

    out_doc = _require(doc, "output", "<root>")
    output = OutputConfig(
        directory=str(_require(out_doc, "directory", "output")),
        save_interval=int(out_doc.get("save_interval", 10)),
        formats=tuple(out_doc.get("formats", ["vtk", "geojson", "csv"])),
        contour_levels=tuple(float(v) for v in out_doc.get("contour_levels", [10.0, 100.0, 1000.0])),
        subdivide_p2=bool(out_doc.get("subdivide_p2", False)),
    )
    if output.save_interval < 1:
        raise ConfigError("output.save_interval must be >= 1")

    return ScenarioConfig(buildings_path=buildings, wind=wind, mesh=mesh,
                          transport=transport, rom=rom, output=output,
                          config_dir=cfg_dir)
