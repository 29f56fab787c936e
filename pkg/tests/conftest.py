"""Shared fixtures: the bundled two-building scenario at desk scale."""

from pathlib import Path

import numpy as np
import pytest

from urbanplume import fem, wind as uw
from urbanplume.fem import SpaceKind
from urbanplume.geo import (
    BuildingSet,
    DomainSpec,
    GeoPolygon,
    compute_domain_bounds,
    parse_building_file,
    project_to_local,
)
from urbanplume.mesh import SizeField, structured_rectangle_mesh, tag_boundaries, triangulate

DATA_DIR = Path(__file__).parent / "data"


def rect_polygon(x0, y0, w, h, pid="b"):
    ring = np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h], [x0, y0]],
                    dtype=float)
    return GeoPolygon(ring=ring, id=pid)


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


@pytest.fixture(scope="session")
def two_buildings():
    """The bundled GeoJSON fixture, parsed and projected to meters."""
    content = (DATA_DIR / "two_buildings.geojson").read_bytes()
    buildings, rejected = parse_building_file(content)
    assert not rejected
    return project_to_local(buildings)


@pytest.fixture(scope="session")
def urban_domain(two_buildings):
    return compute_domain_bounds(two_buildings, (0.0, 1.0))


@pytest.fixture(scope="session")
def urban_mesh(two_buildings, urban_domain):
    """Desk-scale mesh of the two-building fixture (shared, immutable)."""
    size = SizeField(lc_building=1.0, lc_gap=1.5, lc_far=6.0, gap_distance=3.0)
    return triangulate(urban_domain, two_buildings, size)


@pytest.fixture(scope="session")
def urban_spaces(urban_mesh):
    v2 = fem.build_space(urban_mesh, SpaceKind.VELOCITY_P2_VECTOR)
    p1 = fem.build_space(urban_mesh, SpaceKind.PRESSURE_P1)
    return v2, p1


@pytest.fixture(scope="session")
def urban_lifting(urban_mesh, urban_domain, urban_spaces):
    profile = uw.uniform_inflow_profile(urban_domain, 1.0)
    return uw.build_lifting(urban_spaces, urban_mesh, profile)


@pytest.fixture(scope="session")
def channel():
    """Straight channel [0,1]x[0,4], wind from the south, no buildings."""
    domain = DomainSpec(bounds=(0.0, 0.0, 1.0, 4.0), wind_direction=(0.0, 1.0),
                        inflow_edge="bottom", outflow_edge="top",
                        noslip_edges=("left", "right"), characteristic_length=1.0)
    mesh = tag_boundaries(structured_rectangle_mesh(domain.bounds, 10, 40), domain)
    v2 = fem.build_space(mesh, SpaceKind.VELOCITY_P2_VECTOR)
    p1 = fem.build_space(mesh, SpaceKind.PRESSURE_P1)
    lifting = uw.build_lifting((v2, p1), mesh, uw.uniform_inflow_profile(domain, 1.0))
    return {"domain": domain, "mesh": mesh, "v2": v2, "p1": p1, "lifting": lifting}


@pytest.fixture(scope="session")
def channel_flow(channel):
    params = uw.InsParams(nu=0.5, mu=1.0)
    return uw.solve_steady_ins(channel["mesh"], (channel["v2"], channel["p1"]),
                               channel["lifting"], params)
