"""Image quality (PSNR, PSNR-AM, SSIM) and codebook / size statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .codec import SizeReport, index_width, packed_bytes

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, max_value: float = 1.0) -> float:
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / err)


def psnr(a, b, max_value: float = 1.0) -> float:
    """PSNR in dB over all channels jointly; identical images give ``math.inf``."""
    return psnr_from_mse(mse(a, b), max_value)


def psnr_am(pairs: Iterable[tuple[np.ndarray, np.ndarray]], max_value: float = 1.0) -> float:
    """PSNR of the arithmetic-mean MSE over all pairs."""
    errors = [mse(a, b) for a, b in pairs]
    if not errors:
        raise ValueError("psnr_am needs at least one image pair")
    return psnr_from_mse(float(np.mean(errors)), max_value)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-x ** 2 / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation over the first two axes
    out = sliding_window_view(img, len(w), axis=0) @ w
    out = sliding_window_view(out, len(w), axis=1) @ w
    return out


def _filter_adjoint(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    p = len(w) - 1
    pad = [(p, p), (p, p)] + [(0, 0)] * (g.ndim - 2)
    return _filter_valid(np.pad(g, pad), w[::-1])


def _as_hwc(img: np.ndarray) -> np.ndarray:
    return img[..., None] if img.ndim == 2 else img


def ssim_with_grad(a, b, need_grad: bool = True):
    """Mean SSIM over valid window positions and channels, plus dSSIM/da."""
    a, b = _check_pair(a, b)
    squeeze = a.ndim == 2
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    w = gaussian_window()
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    e_aa, e_bb, e_ab = _filter_valid(a * a, w), _filter_valid(b * b, w), _filter_valid(a * b, w)
    var_a, var_b, cov = e_aa - mu_a ** 2, e_bb - mu_b ** 2, e_ab - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not need_grad:
        return value, None
    n = smap.size
    # partials of the map w.r.t. the filtered moments of a
    d_mu = (2 * mu_b * a2 - 2 * mu_b * a1) / (b1 * b2) - smap * (2 * mu_a / b1 - 2 * mu_a / b2)
    d_eaa = -smap / b2
    d_eab = 2 * a1 / (b1 * b2)
    grad = (_filter_adjoint(d_mu, w) + 2 * a * _filter_adjoint(d_eaa, w) + b * _filter_adjoint(d_eab, w)) / n
    return value, (grad[..., 0] if squeeze else grad)


def ssim(a, b) -> float:
    return ssim_with_grad(a, b, need_grad=False)[0]


@dataclass
class QualityReport:
    names: list[str]
    psnr_per_image: list[float]
    ssim_per_image: list[float]
    psnr_mean: float
    psnr_am: float
    ssim_mean: float

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(pairs: Sequence[tuple[np.ndarray, np.ndarray]], names: Sequence[str] | None = None,
             max_value: float = 1.0) -> QualityReport:
    if not pairs:
        raise ValueError("no image pairs to evaluate")
    names = list(names) if names is not None else [str(i) for i in range(len(pairs))]
    psnrs = [psnr(a, b, max_value) for a, b in pairs]
    ssims = [ssim(a, b) for a, b in pairs]
    return QualityReport(names, psnrs, ssims, float(np.mean(psnrs)), psnr_am(pairs, max_value),
                         float(np.mean(ssims)))


@dataclass
class CodebookStats:
    k: int
    n: int
    histogram: np.ndarray = field(repr=False)  # cluster sizes, descending
    max_share: float
    entropy_bits: float
    entropy_bytes: float  # N * H / 8
    packed_bytes: int

    def as_dict(self) -> dict:
        return {
            "k": self.k, "n": self.n, "max_share": self.max_share,
            "entropy_bits": self.entropy_bits, "entropy_bytes": self.entropy_bytes,
            "packed_bytes": self.packed_bytes, "used_codes": int(np.count_nonzero(self.histogram)),
        }


def entropy_bits(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(max(0.0, -(p * np.log2(p)).sum()))


def codebook_stats(assignments: np.ndarray, k: int) -> CodebookStats:
    assignments = np.asarray(assignments, dtype=np.int64)
    n = len(assignments)
    counts = np.bincount(assignments, minlength=k)
    if len(counts) > k:
        raise ValueError(f"assignment {assignments.max()} >= k={k}")
    hist = np.sort(counts)[::-1]
    h = entropy_bits(counts)
    return CodebookStats(k, n, hist, float(hist[0] / n) if n else 0.0, h, n * h / 8,
                         packed_bytes(n, index_width(k)))


def memory_breakdown(report: SizeReport) -> dict:
    """Fractions of total storage: non-quantized vs quantized, and index vs codebook."""
    out = report.as_dict()
    out["quantized_fraction"] = report.quantized / report.total if report.total else 0.0
    return out


def format_breakdown(report: SizeReport) -> str:
    rows = [
        ("header", report.header),
        ("codebooks", report.codebooks),
        ("rle counts", report.rle),
        ("packed indices", report.indices),
        ("residuals (pos+opacity)", report.residuals),
        ("total", report.total),
    ]
    lines = [f"{name:<26}{nbytes:>14,d}  {nbytes / report.total:7.2%}" for name, nbytes in rows]
    lines.append(f"non-quantized fraction    {report.nonquantized_fraction:.2%}  ({report.accounting} accounting)")
    lines.append(f"index share of quantized  {report.index_share:.2%}")
    return "\n".join(lines)
