import math

import numpy as np
import pytest

from ctscatter import phantoms as pht
from ctscatter.errors import ValidationError


def test_cylinder_volume_and_density(water):
    ph = pht.cylinder((40, 40, 10), 0.2, 3.0, water)
    area = np.sum(ph.material_id[:, :, 0] == 1) * 0.04
    assert area == pytest.approx(math.pi * 9.0, rel=0.02)
    assert np.all(ph.density[ph.material_id == 1] == np.float32(water.density_ref))
    assert ph.origin == pytest.approx((-4.0, -4.0, -1.0))
    short = pht.cylinder((40, 40, 10), 0.2, 3.0, water, height=1.0)
    # centres at z = +-0.5 lie on the closed boundary
    assert np.sum(short.material_id[20, 20] == 1) == 6


def test_rods_and_overlap_checks(lib):
    ph = pht.rods((60, 60, 4), 0.2, 5.0, lib["cement"], lib["fe"])
    assert set(np.unique(ph.material_id)) == {0, 1, 2}
    # 8 rods of radius 0.5 cm
    assert np.sum(ph.material_id[:, :, 0] == 2) * 0.04 == pytest.approx(8 * math.pi * 0.25, rel=0.1)
    with pytest.raises(ValidationError, match="overlap"):
        pht.rods((60, 60, 4), 0.2, 5.0, lib["cement"], lib["fe"], n_rods=40)
    with pytest.raises(ValidationError, match="inside"):
        pht.rods((60, 60, 4), 0.2, 5.0, lib["cement"], lib["fe"], ring_radius=4.8)


def test_head_like_has_three_classes_and_air_bores(lib):
    ph = pht.cylinder_head_like((50, 50, 4), 0.2, 4.0, lib["al"], lib["fe"])
    assert set(np.unique(ph.material_id)) == {0, 1, 2}
    ix = int(round(0.45 * 4.0 / 0.2 + 24.5))
    assert ph.material_id[ix, 25, 0] == 0  # bore centre is air


def test_two_material_inserts(lib):
    ph = pht.two_material((48, 48, 4), 0.15, 3.0, lib["al"], lib["fe"])
    n_ins = np.sum(ph.material_id[:, :, 0] == 2) * 0.15 ** 2
    assert n_ins == pytest.approx(2 * math.pi * 0.36, rel=0.1)


def test_cube_and_validation(water):
    ph = pht.cube((10, 10, 10), 0.5, 2.0, water)
    assert np.sum(ph.material_id == 1) == 64
    with pytest.raises(ValidationError):
        pht.cube((10, 10, 10), 0.5, -1.0, water)
    with pytest.raises(ValidationError):
        pht.cylinder((10, 10), 0.5, 1.0, water)
    assert set(pht.GENERATORS) == {"cylinder", "rods", "cube", "cylinder-head-like", "two-material"}
