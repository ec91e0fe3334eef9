import numpy as np
import pytest

from ctscatter import physics_data as pd
from ctscatter.geometry import ScanGeometry, VoxelPhantom


@pytest.fixture(scope="session")
def lib():
    return pd.MaterialLibrary.bundled()


@pytest.fixture(scope="session")
def water(lib):
    return lib["water"]


@pytest.fixture(scope="session")
def al(lib):
    return lib["al"]


@pytest.fixture(scope="session")
def fe(lib):
    return lib["fe"]


@pytest.fixture(scope="session")
def mono100():
    return pd.Spectrum.monochromatic(100.0)


@pytest.fixture(scope="session")
def ideal():
    return pd.DetectorResponse.ideal()


@pytest.fixture(scope="session")
def small_geometry():
    return ScanGeometry.uniform(100.0, 60.0, (16, 16), 0.3, 8)


def cube_phantom(material, n=8, size=4.0, density=None):
    ids = np.ones((n, n, n), np.uint8)
    rho = np.full((n, n, n), material.density_ref if density is None else density, np.float32)
    return VoxelPhantom.centered(ids, rho, size / n, {1: material})


@pytest.fixture(scope="session")
def water_cube(water):
    return cube_phantom(water)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
