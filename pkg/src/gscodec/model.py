"""Columnar data model for 3D Gaussian splat clouds.

All parameters live in one ``(59, N)`` float32 block, one row per scalar
parameter, so every field and every quantizable group is a zero-copy ``N x d``
view (the transpose of a row slice). Values are stored pre-activation:
``log_scale`` before ``exp``, ``rotation`` before normalization and
``logit_opacity`` before the sigmoid.

Column layout::

    0:3    position        x, y, z
    3:6    log_scale       scale_0..2
    6:10   rotation        rot_0..3 (w, x, y, z; not normalized)
    10:11  logit_opacity
    11:14  color_dc        f_dc_0..2
    14:59  color_sh        f_rest_0..44, channel-major (15 per channel)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

NUM_PARAMS = 59

FIELDS: dict[str, slice] = {
    "position": slice(0, 3),
    "log_scale": slice(3, 6),
    "rotation": slice(6, 10),
    "logit_opacity": slice(10, 11),
    "color_dc": slice(11, 14),
    "color_sh": slice(14, 59),
}
FIELD_DIMS = {name: s.stop - s.start for name, s in FIELDS.items()}


class ParamGroup(str, enum.Enum):
    """The four vector-quantized parameter groups."""

    COLOR_DC = "color_dc"
    SH = "color_sh"
    SCALE = "log_scale"
    ROTATION = "rotation"

    @property
    def dim(self) -> int:
        return FIELD_DIMS[self.value]

    @property
    def code(self) -> int:
        return list(ParamGroup).index(self)

    @classmethod
    def from_code(cls, code: int) -> "ParamGroup":
        return list(cls)[code]

    @classmethod
    def parse(cls, name: str) -> "ParamGroup":
        aliases = {"dc": cls.COLOR_DC, "sh": cls.SH, "scale": cls.SCALE, "rot": cls.ROTATION}
        if name in aliases:
            return aliases[name]
        return cls(name)


GROUPS = tuple(ParamGroup)
NON_QUANTIZED = ("position", "logit_opacity")


class FieldError(NamedTuple):
    field: str
    kind: str  # "shape" | "nonfinite" | "missing"
    row: int | None
    message: str


def validate(cloud: "GaussianCloud | Mapping[str, np.ndarray]") -> list[FieldError]:
    """Check shapes and finiteness. Returns an empty list when the cloud is valid."""
    if isinstance(cloud, GaussianCloud):
        fields = {name: cloud.field(name) for name in FIELDS}
    else:
        fields = dict(cloud)
    errors: list[FieldError] = []
    n = None
    for name, dim in FIELD_DIMS.items():
        if name not in fields:
            errors.append(FieldError(name, "missing", None, f"{name} is missing"))
            continue
        arr = np.asarray(fields[name])
        if arr.ndim == 1 and dim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[1] != dim:
            errors.append(FieldError(name, "shape", None, f"{name} has shape {arr.shape}, expected (N, {dim})"))
            continue
        if n is None:
            n = arr.shape[0]
        elif arr.shape[0] != n:
            errors.append(FieldError(name, "shape", None, f"{name} has {arr.shape[0]} rows, expected {n}"))
            continue
        bad = ~np.isfinite(arr).all(axis=1)
        for row in np.flatnonzero(bad):
            errors.append(FieldError(name, "nonfinite", int(row), f"{name} row {row} is not finite"))
    return errors


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """N Gaussians stored column-wise in a ``(59, N)`` float32 block."""

    columns: np.ndarray

    def __post_init__(self):
        if self.columns.ndim != 2 or self.columns.shape[0] != NUM_PARAMS:
            raise ValueError(f"column block must be (59, N), got {self.columns.shape}")
        if self.columns.dtype != np.float32:
            raise TypeError("column block must be float32")

    @classmethod
    def from_fields(cls, position, log_scale, rotation, logit_opacity, color_dc, color_sh) -> "GaussianCloud":
        fields = dict(position=position, log_scale=log_scale, rotation=rotation,
                      logit_opacity=logit_opacity, color_dc=color_dc, color_sh=color_sh)
        errors = validate(fields)
        if errors:
            raise ValueError("; ".join(e.message for e in errors[:5]))
        n = np.asarray(position).shape[0]
        columns = np.empty((NUM_PARAMS, n), dtype=np.float32)
        for name, s in FIELDS.items():
            columns[s] = np.asarray(fields[name], dtype=np.float32).reshape(n, s.stop - s.start).T
        return cls(columns)

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "GaussianCloud":
        """Build from an ``N x 59`` row-major matrix in the documented column layout."""
        rows = np.asarray(rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[1] != NUM_PARAMS:
            raise ValueError(f"expected (N, 59) rows, got {rows.shape}")
        return cls(np.ascontiguousarray(rows.T))

    @classmethod
    def zeros(cls, n: int) -> "GaussianCloud":
        return cls(np.zeros((NUM_PARAMS, n), dtype=np.float32))

    @classmethod
    def random(cls, n: int, seed: int = 0, extent: float = 10.0) -> "GaussianCloud":
        """Synthetic cloud with roughly 3DGS-like value ranges."""
        rng = np.random.default_rng(seed)
        return cls.from_fields(
            position=rng.uniform(-extent, extent, (n, 3)),
            log_scale=rng.normal(-4.0, 1.0, (n, 3)),
            rotation=rng.normal(0.0, 1.0, (n, 4)),
            logit_opacity=rng.normal(0.0, 2.0, (n, 1)),
            color_dc=rng.normal(0.0, 1.0, (n, 3)),
            color_sh=rng.normal(0.0, 0.1, (n, 45)),
        )

    @property
    def count(self) -> int:
        return self.columns.shape[1]

    def __len__(self) -> int:
        return self.count

    def field(self, name: str) -> np.ndarray:
        return self.columns[FIELDS[name]].T

    position = property(lambda self: self.field("position"))
    log_scale = property(lambda self: self.field("log_scale"))
    rotation = property(lambda self: self.field("rotation"))
    logit_opacity = property(lambda self: self.field("logit_opacity"))
    color_dc = property(lambda self: self.field("color_dc"))
    color_sh = property(lambda self: self.field("color_sh"))

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logit_opacity[:, 0].astype(np.float64)))

    def rows(self) -> np.ndarray:
        """Row-major ``N x 59`` copy."""
        return np.ascontiguousarray(self.columns.T)

    def take(self, index: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(np.ascontiguousarray(self.columns[:, index]))

    def with_fields(self, **replacements: np.ndarray) -> "GaussianCloud":
        """Copy with whole fields replaced."""
        columns = self.columns.copy()
        for name, values in replacements.items():
            width = FIELDS[name].stop - FIELDS[name].start
            columns[FIELDS[name]] = np.asarray(values, dtype=np.float32).reshape(self.count, width).T
        return GaussianCloud(columns)

    def equals(self, other: "GaussianCloud") -> bool:
        """Bit-exact equality (distinguishes -0.0 and NaN payloads)."""
        return (self.columns.shape == other.columns.shape
                and self.columns.view(np.uint32).tobytes() == other.columns.view(np.uint32).tobytes())


def group_view(cloud: GaussianCloud, group: ParamGroup | str) -> np.ndarray:
    """Zero-copy ``N x d`` view of one parameter group."""
    return cloud.field(ParamGroup(group).value)


def assemble(position, logit_opacity, groups: Mapping[ParamGroup, np.ndarray]) -> GaussianCloud:
    """Inverse of taking the group views plus position and opacity."""
    return GaussianCloud.from_fields(
        position=position,
        logit_opacity=logit_opacity,
        **{ParamGroup(g).value: v for g, v in groups.items()},
    )
