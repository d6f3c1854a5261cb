import numpy as np
import pytest

from gscodec.model import (FIELDS, GROUPS, NUM_PARAMS, GaussianCloud, ParamGroup, assemble, group_view,
                           validate)


def _rows(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, NUM_PARAMS)).astype(np.float32)


def test_group_dims():
    assert [g.dim for g in GROUPS] == [3, 45, 3, 4]
    assert sum(g.dim for g in GROUPS) == 55
    assert sum(s.stop - s.start for s in FIELDS.values()) == 59


def test_group_view_single_row():
    rows = _rows(1)
    cloud = GaussianCloud.from_rows(rows)
    np.testing.assert_array_equal(group_view(cloud, ParamGroup.ROTATION), rows[:, 6:10])


def test_group_view_empty():
    assert group_view(GaussianCloud.zeros(0), ParamGroup.SH).shape == (0, 45)


def test_group_view_scale_block():
    scale_rows = [[0.1, 0.2, 0.3], [-1.0, -2.0, -3.0], [5.0, 6.0, 7.0]]
    cloud = GaussianCloud.from_fields(np.zeros((3, 3)), scale_rows, np.ones((3, 4)), np.zeros((3, 1)),
                                      np.zeros((3, 3)), np.zeros((3, 45)))
    view = group_view(cloud, ParamGroup.SCALE)
    for i in range(3):
        for j in range(3):
            assert view[i, j] == np.float32(scale_rows[i][j])


def test_views_are_zero_copy(cloud):
    for g in GROUPS:
        assert np.shares_memory(group_view(cloud, g), cloud.columns)


def test_views_tile_all_columns():
    cloud = GaussianCloud.from_rows(np.tile(np.arange(59, dtype=np.float32), (2, 1)))
    seen = []
    for name in ["position", "logit_opacity"] + [g.value for g in GROUPS]:
        seen.extend(cloud.field(name)[0].astype(int).tolist())
    assert sorted(seen) == list(range(59))


def test_assemble_roundtrip_bit_exact(cloud):
    rebuilt = assemble(cloud.position, cloud.logit_opacity, {g: group_view(cloud, g) for g in GROUPS})
    assert rebuilt.equals(cloud)


def test_validate_ok(cloud):
    assert validate(cloud) == []


def test_validate_nan_position(cloud):
    rows = cloud.rows()
    rows[17, 1] = np.nan
    errors = validate(GaussianCloud.from_rows(rows))
    assert len(errors) == 1
    assert errors[0].field == "position" and errors[0].row == 17 and errors[0].kind == "nonfinite"


def test_validate_rotation_shape():
    n = 4
    fields = dict(position=np.zeros((n, 3)), log_scale=np.zeros((n, 3)), rotation=np.zeros((n, 3)),
                  logit_opacity=np.zeros((n, 1)), color_dc=np.zeros((n, 3)), color_sh=np.zeros((n, 45)))
    errors = validate(fields)
    assert [(e.field, e.kind) for e in errors] == [("rotation", "shape")]
    with pytest.raises(ValueError):
        GaussianCloud.from_fields(**fields)


def test_param_group_parse():
    assert ParamGroup.parse("rot") is ParamGroup.ROTATION
    assert ParamGroup.parse("color_sh") is ParamGroup.SH
    assert [ParamGroup.from_code(g.code) for g in GROUPS] == list(GROUPS)
