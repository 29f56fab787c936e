"""Phase drivers behind the CLI: mesh, wind, transport, rom, run-all.

Each phase reads its inputs from the output directory (persisted
intermediates), writes its products there, and refreshes manifest.json:
config snapshot, tool version, mesh hash, per-phase timings, and a sha256
inventory of every produced file.  Everything except wall-clock timings is
bit-reproducible for a fixed config and seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np

from . import __version__, fem, io as uio, rom as urom, transport as utr, wind as uw
from .config import ScenarioConfig
from .errors import InputError, NonconvergenceError
from .fem import Field, SpaceKind
from .errors import BlockageRatioError
from .geo import (
    blockage_ratio,
    compute_domain_bounds,
    domain_from_bounds,
    format_rejections,
    parse_building_file,
    project_to_local,
)
from .mesh import SizeField, load_mesh, mesh_quality, save_mesh, triangulate
from .wind import reynolds_number

MESH_FILE = "mesh.npz"
MANIFEST_FILE = "manifest.json"
ROM_ARTIFACT_FILE = "rom_artifacts.npz"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(config: ScenarioConfig, override=None) -> Path:
    out = Path(override) if override else Path(config.output.directory)
    if not out.is_absolute():
        out = config.config_dir / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def update_manifest(out: Path, config: ScenarioConfig, phase: str, elapsed: float,
                    extra: dict | None = None) -> dict:
    """Merge this phase into manifest.json and re-inventory the directory."""
    manifest_path = out / MANIFEST_FILE
    manifest: dict = {}
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError:
            manifest = {}
    manifest["tool_version"] = __version__
    manifest["config"] = config.resolved()
    manifest["seed"] = config.rom.seed
    timings = manifest.get("timings_s", {})
    timings[phase] = elapsed
    manifest["timings_s"] = timings
    if extra:
        manifest.update(extra)
    files = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != MANIFEST_FILE:
            files[str(path.relative_to(out))] = _sha256(path)
    manifest["files"] = files
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _load_buildings(config: ScenarioConfig):
    content = Path(config.buildings_path).read_bytes()
    buildings, rejected = parse_building_file(content)
    return project_to_local(buildings), rejected


def _load_mesh_state(out: Path):
    path = out / MESH_FILE
    if not path.exists():
        raise InputError(f"mesh file {path} not found; run the mesh phase first")
    mesh, domain, origin = load_mesh(path)
    if domain is None:
        raise InputError(f"mesh file {path} carries no domain metadata")
    return mesh, domain, origin


def _wind_setup(config: ScenarioConfig, mesh, domain):
    v_space = fem.build_space(mesh, SpaceKind.VELOCITY_P2_VECTOR)
    p_space = fem.build_space(mesh, SpaceKind.PRESSURE_P1)
    profile = uw.uniform_inflow_profile(domain, config.wind.base_speed,
                                        ramp_width=config.wind.ramp_width)
    lifting = uw.build_lifting((v_space, p_space), mesh, profile)
    return v_space, p_space, lifting


def _mu_tag(mu: float) -> str:
    return f"{mu:g}".replace("-", "m").replace(".", "p")


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------

def cmd_mesh(config: ScenarioConfig, output_dir=None) -> dict:
    """Buildings -> domain -> tagged mesh, plus VTK export and quality CSV."""
    t0 = time.perf_counter()
    out = _out_dir(config, output_dir)
    buildings, rejected = _load_buildings(config)
    if config.mesh.domain_bounds is not None:
        domain = domain_from_bounds(config.mesh.domain_bounds, config.wind.direction)
        br = blockage_ratio(buildings, domain)
        # the bound itself is admissible; only strict excess is rejected
        if br > config.mesh.br_max:
            raise BlockageRatioError(
                f"hand-crafted domain yields blockage ratio {br:.4f} "
                f"> admissible {config.mesh.br_max}")
    else:
        domain = compute_domain_bounds(buildings, config.wind.direction,
                                       br_max=config.mesh.br_max)
        br = blockage_ratio(buildings, domain)
    size = SizeField(config.mesh.lc_building, config.mesh.lc_gap,
                     config.mesh.lc_far, config.mesh.gap_distance)
    mesh = triangulate(domain, buildings, size)
    quality = mesh_quality(mesh)

    save_mesh(out / MESH_FILE, mesh, domain, buildings.origin)
    uio.write_mesh_vtk(mesh, out / "mesh.vtk")
    uio.write_csv(out / "mesh_quality.csv",
                  ["min_angle_deg", "max_circumradius_ratio", "triangle_count",
                   "vertex_count", "blockage_ratio", "domain_width_m", "domain_height_m"],
                  [[quality.min_angle_deg, quality.max_circumradius_ratio,
                    quality.triangle_count, quality.vertex_count, br,
                    domain.width, domain.height]])
    if rejected:
        (out / "rejected_features.txt").write_text(format_rejections(rejected) + "\n")
    update_manifest(out, config, "mesh", time.perf_counter() - t0,
                    {"mesh_hash": mesh.content_hash()})
    return {"mesh": str(out / MESH_FILE), "triangles": quality.triangle_count,
            "min_angle_deg": quality.min_angle_deg, "blockage_ratio": br}


def cmd_wind(config: ScenarioConfig, output_dir=None) -> dict:
    """Steady wind solves for every configured inflow factor."""
    t0 = time.perf_counter()
    out = _out_dir(config, output_dir)
    mesh, domain, _ = _load_mesh_state(out)
    v_space, p_space, lifting = _wind_setup(config, mesh, domain)
    rows = []
    solved = 0
    for mu in config.wind.mu:
        params = uw.InsParams(nu=config.wind.nu, mu=mu,
                              base_inflow_speed=config.wind.base_speed)
        tag = _mu_tag(mu)
        try:
            wind = uw.solve_steady_ins(mesh, (v_space, p_space), lifting, params)
        except NonconvergenceError as exc:
            rows.append([mu, math.nan, 0, math.nan, "failed"])
            (out / f"wind_mu_{tag}_failure.txt").write_text(str(exc) + "\n")
            continue
        re_val = reynolds_number(wind, domain, config.wind.nu)
        rows.append([mu, re_val, wind.newton_iterations,
                     wind.residual_history[-1], "ok"])
        np.savez(out / f"wind_mu_{tag}.npz", mu=np.array([mu]),
                 velocity=wind.velocity.values, pressure=wind.pressure.values,
                 newton_iterations=np.array([wind.newton_iterations]))
        if "vtk" in config.output.formats:
            uio.write_vtk({"velocity": wind.velocity, "pressure": wind.pressure},
                          mesh, out / f"wind_mu_{tag}.vtk",
                          subdivide_p2=config.output.subdivide_p2)
        solved += 1
    uio.write_csv(out / "wind_summary.csv",
                  ["mu", "reynolds", "newton_iterations", "final_relative_residual",
                   "status"], rows)
    update_manifest(out, config, "wind", time.perf_counter() - t0)
    return {"solved": solved, "requested": len(config.wind.mu)}


def _load_wind(out: Path, mesh, v_space, p_space, mu: float):
    path = out / f"wind_mu_{_mu_tag(mu)}.npz"
    if not path.exists():
        raise InputError(f"wind field {path} not found; run the wind phase first")
    with np.load(path) as data:
        return uw.WindField(
            velocity=Field(v_space, data["velocity"]),
            pressure=Field(p_space, data["pressure"]),
            mu=float(data["mu"][0]),
            newton_iterations=int(data["newton_iterations"][0]),
        )


def cmd_transport(config: ScenarioConfig, output_dir=None) -> dict:
    """Plume release and transient transport on the precomputed wind field."""
    t0 = time.perf_counter()
    out = _out_dir(config, output_dir)
    mesh, domain, origin = _load_mesh_state(out)
    v_space = fem.build_space(mesh, SpaceKind.VELOCITY_P2_VECTOR)
    p_space = fem.build_space(mesh, SpaceKind.PRESSURE_P1)
    scalar = fem.build_space(mesh, SpaceKind.SCALAR_P1)
    mu = config.transport.wind_mu if config.transport.wind_mu is not None \
        else config.wind.mu[0]
    wind = _load_wind(out, mesh, v_space, p_space, mu)

    plume = utr.InitialPlume(center=config.transport.plume.x_c,
                             amplitude=config.transport.plume.amplitude,
                             radius=config.transport.plume.radius,
                             width=config.transport.plume.width)
    initial = utr.gaussian_initial(mesh, scalar, plume)
    params = utr.AdParams(k=config.transport.k, dt=config.transport.dt,
                          t_final=config.transport.t_final,
                          dirichlet_value=0.0 if config.transport.dirichlet_inflow_zero else None)
    result = utr.run_transient(initial, wind, params,
                               probes=config.transport.probes,
                               save_interval=config.output.save_interval)

    for snap in result.saved:
        stamp = f"{snap.time:08.3f}".replace(".", "p")
        if "vtk" in config.output.formats:
            uio.write_vtk({"concentration": snap.field}, mesh,
                          out / f"conc_t{stamp}.vtk")
        if "geojson" in config.output.formats:
            doc = uio.contours_geojson(mesh, snap.field.values,
                                       config.output.contour_levels,
                                       snap.time, origin=origin)
            uio.write_geojson(doc, out / f"contours_t{stamp}.geojson")
    uio.write_csv(out / "transport_stats.csv",
                  ["time_s", "min_ppm", "max_ppm", "mass_ppm_m2"],
                  [[r.time, r.min_value, r.max_value, r.mass] for r in result.records])
    probe_rows = []
    for istep, rec in enumerate(result.records):
        for ip, (x, y) in enumerate(result.probe_points):
            probe_rows.append([rec.time, ip, float(x), float(y),
                               float(result.probe_traces[istep, ip])])
    uio.write_csv(out / "probes.csv",
                  ["time_s", "probe_id", "x_m", "y_m", "concentration_ppm"],
                  probe_rows)
    update_manifest(out, config, "transport", time.perf_counter() - t0)
    return {"steps": len(result.records), "saved_fields": len(result.saved),
            "final_max_ppm": result.records[-1].max_value if result.records else math.nan}


def _fom_context(config: ScenarioConfig, mesh, domain):
    v_space, p_space, lifting = _wind_setup(config, mesh, domain)
    return urom.FomContext(mesh=mesh, v_space=v_space, p_space=p_space,
                           lifting=lifting, nu=config.wind.nu,
                           base_inflow_speed=config.wind.base_speed)


def cmd_rom_offline(config: ScenarioConfig, output_dir=None) -> dict:
    """Snapshot sweep, POD + DEIM, operator projection, artifact container."""
    t0 = time.perf_counter()
    out = _out_dir(config, output_dir)
    mesh, domain, _ = _load_mesh_state(out)
    fom = _fom_context(config, mesh, domain)
    sampler = urom.ParameterSampler(config.wind.mu_range[0], config.wind.mu_range[1],
                                    config.rom.n_snapshots)
    snapshots = urom.collect_snapshots(sampler, fom)
    ops, basis, deim_data = urom.build_rom(fom, snapshots, config.rom.n_r, config.rom.n_m)
    urom.save_rom_artifacts(out / ROM_ARTIFACT_FILE, ops, deim_data)
    uio.write_csv(out / "rom_eigenvalues.csv",
                  ["mode", "eigenvalue", "normalized"],
                  [[i + 1, float(lam), float(norm)] for i, (lam, norm) in
                   enumerate(zip(basis.eigenvalues, basis.normalized_eigenvalues))])
    update_manifest(out, config, "rom_offline", time.perf_counter() - t0)
    return {"snapshots": len(snapshots.mus), "failures": len(snapshots.failures),
            "n_r": config.rom.n_r, "n_m": config.rom.n_m}


def cmd_rom_online(config: ScenarioConfig, output_dir=None, mu=None) -> dict:
    """One reduced solve with full-order reconstruction written like a wind field."""
    t0 = time.perf_counter()
    out = _out_dir(config, output_dir)
    mesh, domain, _ = _load_mesh_state(out)
    ops = urom.load_rom_artifacts(out / ROM_ARTIFACT_FILE)
    if ops.mesh_hash and ops.mesh_hash != mesh.content_hash():
        raise InputError("ROM artifact was built for a different mesh")
    mu_val = float(mu) if mu is not None else float(config.wind.mu[0])
    sol = urom.solve_rom(mu_val, ops)
    v_space = fem.build_space(mesh, SpaceKind.VELOCITY_P2_VECTOR)
    velocity = Field(v_space, sol.velocity_values())
    tag = _mu_tag(mu_val)
    np.savez(out / f"wind_rom_mu_{tag}.npz", mu=np.array([mu_val]),
             velocity=velocity.values, reduced_coords=sol.u_hat)
    if "vtk" in config.output.formats:
        uio.write_vtk({"velocity": velocity}, mesh, out / f"wind_rom_mu_{tag}.vtk",
                      subdivide_p2=config.output.subdivide_p2)
    update_manifest(out, config, "rom_online", time.perf_counter() - t0,
                    {"rom_generated": True})
    return {"mu": mu_val, "iterations": sol.iterations}


def cmd_rom_benchmark(config: ScenarioConfig, output_dir=None) -> dict:
    """Error/speedup study of the reduced model on a disjoint test set."""
    t0 = time.perf_counter()
    out = _out_dir(config, output_dir)
    mesh, domain, _ = _load_mesh_state(out)
    fom = _fom_context(config, mesh, domain)
    ops = urom.load_rom_artifacts(out / ROM_ARTIFACT_FILE)
    if ops.mesh_hash and ops.mesh_hash != mesh.content_hash():
        raise InputError("ROM artifact was built for a different mesh")
    sampler = urom.ParameterSampler(config.wind.mu_range[0], config.wind.mu_range[1],
                                    config.rom.n_snapshots)
    test_mus = sampler.midpoint_samples(config.rom.n_test)
    bench = urom.benchmark(test_mus, fom, ops)
    uio.write_csv(out / "rom_benchmark.csv",
                  ["mu", "error_rel", "t_fom_s", "t_rom_s", "speedup"],
                  [[float(m), float(e), float(tf), float(tr), float(s)]
                   for m, e, tf, tr, s in zip(bench.mus, bench.errors, bench.t_fom,
                                              bench.t_rom, bench.speedups)])
    uio.write_csv(out / "rom_error_vs_nr.csv",
                  ["n_r", "max_error_rel"],
                  [[int(r), float(e)] for r, e in
                   zip(bench.n_r_grid, bench.max_error_per_nr)])
    uio.write_csv(out / "rom_speedup_vs_nr.csv",
                  ["n_r", "min_speedup", "mean_speedup", "max_speedup"],
                  [[int(r), float(a), float(b), float(c)] for r, a, b, c in
                   zip(bench.n_r_grid, bench.min_speedup_per_nr,
                       bench.mean_speedup_per_nr, bench.max_speedup_per_nr)])
    lam1 = bench.eigenvalues[0] if len(bench.eigenvalues) else 1.0
    uio.write_csv(out / "rom_eigenvalues.csv",
                  ["mode", "eigenvalue", "normalized"],
                  [[i + 1, float(lam), float(lam / lam1) if lam1 > 0 else 0.0]
                   for i, lam in enumerate(bench.eigenvalues)])
    update_manifest(out, config, "rom_benchmark", time.perf_counter() - t0)
    return {"test_samples": len(bench.mus), "max_error": float(bench.errors.max()),
            "min_speedup": float(bench.speedups.min()),
            "excluded": len(bench.excluded)}


def cmd_run_all(config: ScenarioConfig, output_dir=None) -> dict:
    """mesh -> wind -> transport -> rom offline -> rom online.

    The benchmark phase is not part of run-all: its outputs embed wall-clock
    timings, which would break run-to-run reproducibility of the directory.
    """
    results = {"mesh": cmd_mesh(config, output_dir)}
    results["wind"] = cmd_wind(config, output_dir)
    results["transport"] = cmd_transport(config, output_dir)
    results["rom_offline"] = cmd_rom_offline(config, output_dir)
    results["rom_online"] = cmd_rom_online(config, output_dir)
    return results
