"""Symmetric absmax scalar quantization, one scale per scalar column."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import FIELDS, GaussianCloud

VALID_BITS = (4, 8, 16)


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class BitQuantChannel:
    bits: int
    scale: float
    values: np.ndarray  # int32 codes in [-qmax, qmax]

    def dequantize(self) -> np.ndarray:
        return absmax_dequantize(self)

    @property
    def nbytes(self) -> int:
        """Packed payload plus the float32 scale."""
        return (len(self.values) * self.bits + 7) // 8 + 4


def absmax_quantize(channel: np.ndarray, bits: int) -> BitQuantChannel:
    if bits not in VALID_BITS:
        raise ValueError(f"bits must be one of {VALID_BITS}")
    x = np.asarray(channel, dtype=np.float64).ravel()
    if not np.isfinite(x).all():
        raise ValueError("channel contains non-finite values")
    scale = float(np.abs(x).max()) if x.size else 0.0
    if scale == 0.0:
        return BitQuantChannel(bits, 0.0, np.zeros(x.shape, dtype=np.int32))
    q = round_half_away(x * (qmax(bits) / scale))
    return BitQuantChannel(bits, scale, np.clip(q, -qmax(bits), qmax(bits)).astype(np.int32))


def absmax_dequantize(channel: BitQuantChannel) -> np.ndarray:
    # (q / qmax) * scale keeps full-range codes exactly at +-scale
    return (channel.values / qmax(channel.bits)) * channel.scale


@dataclass
class BitQuantPolicy:
    """Bit width per cloud field; ``None`` keeps float32."""

    name: str = "float32"
    bits: dict[str, int | None] = field(default_factory=dict)

    def __post_init__(self):
        for fname, b in self.bits.items():
            if fname not in FIELDS:
                raise ValueError(f"unknown field {fname!r}")
            if b is not None and b not in VALID_BITS:
                raise ValueError(f"{fname}: bits must be one of {VALID_BITS} or None")

    def bits_for(self, fname: str) -> int | None:
        return self.bits.get(fname)

    @property
    def include_position(self) -> bool:
        return self.bits_for("position") is not None

    @classmethod
    def uniform(cls, name: str, bits: int, include_position: bool = True) -> "BitQuantPolicy":
        return cls(name, {f: (bits if include_position or f != "position" else None) for f in FIELDS})

    @classmethod
    def preset(cls, name: str) -> "BitQuantPolicy":
        key = name.lower().replace("_", "-")
        if key == "float32":
            return cls("float32", {})
        if key == "compgs-bitq":
            return cls("compgs-bitq", {"position": 16, "logit_opacity": 8})
        table = {
            "int16": (16, True), "int8": (8, True), "int4": (4, True),
            "int16-no-pos": (16, False), "int8-no-pos": (8, False), "int4-no-pos": (4, False),
        }
        if key not in table:
            raise ValueError(f"unknown policy {name!r}; choose from float32, compgs-bitq, {', '.join(table)}")
        return cls.uniform(key, *table[key])


PRESETS = ("float32", "compgs-bitq", "int16", "int8", "int4", "int16-no-pos", "int8-no-pos", "int4-no-pos")


def apply_policy(cloud: GaussianCloud, policy: BitQuantPolicy) -> tuple[GaussianCloud, dict[str, int]]:
    """Quantize-dequantize the selected fields column by column.

    Returns the reconstructed cloud and bytes per field as stored (packed codes
    plus one float32 scale per column, or raw float32).
    """
    replacements = {}
    report = {}
    n = cloud.count
    for fname in FIELDS:
        bits = policy.bits_for(fname)
        values = cloud.field(fname)
        if bits is None:
            report[fname] = 4 * n * values.shape[1]
            continue
        cols = [absmax_quantize(values[:, j], bits) for j in range(values.shape[1])]
        replacements[fname] = np.stack([c.dequantize() for c in cols], axis=1)
        report[fname] = sum(c.nbytes for c in cols)
    out = cloud.with_fields(**replacements) if replacements else cloud
    report["total"] = sum(report.values())
    return out, report
