"""Desk-scale differentiable 2D Gaussian splatting with quantization-aware training.

A 2D stand-in for the 3D pipeline: each Gaussian has a pixel-space mean, a
covariance ``R S S^T R^T`` built from ``log_scale`` and ``angle``, a logit
opacity and an RGB color. Gaussians composite front to back in index order
(there is no depth in 2D). Color, scale and angle are vector quantized during
the QAT phase; position and opacity always train directly.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import _raster
from .metrics import psnr, ssim_with_grad
from .vq import Codebook, Init, QatSchedule, VqConfig, init_codebook, qat_update

log = logging.getLogger(__name__)

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
L1_WEIGHT = 0.8
SSIM_WEIGHT = 0.2

# quantized 2D groups and the VqConfig size each one uses
QUANT_GROUPS = ("color", "log_scale", "angle")
_K_FIELD = {"color": "k_dc", "log_scale": "k_scale", "angle": "k_rot"}

DEFAULT_LR = {"position": 0.05, "log_scale": 0.02, "angle": 0.02, "logit_opacity": 0.05, "color": 0.02}


@dataclass
class Scene2D:
    position: np.ndarray       # M x 2, pixels (x, y)
    log_scale: np.ndarray      # M x 2
    angle: np.ndarray          # M x 1, radians
    logit_opacity: np.ndarray  # M x 1
    color: np.ndarray          # M x 3, clamped to [0, 1] when rendered

    PARAMS = ("position", "log_scale", "angle", "logit_opacity", "color")

    def __post_init__(self):
        for name in self.PARAMS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        m = self.position.shape[0]
        for name, d in zip(self.PARAMS, (2, 2, 1, 1, 3)):
            arr = getattr(self, name)
            if arr.ndim == 1 and d == 1:
                arr = arr[:, None]
                setattr(self, name, arr)
            if arr.shape != (m, d):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({m}, {d})")

    @property
    def count(self) -> int:
        return self.position.shape[0]

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logit_opacity[:, 0]))

    def copy(self) -> "Scene2D":
        return Scene2D(*(getattr(self, n).copy() for n in self.PARAMS))

    def take(self, keep: np.ndarray) -> "Scene2D":
        return Scene2D(*(getattr(self, n)[keep] for n in self.PARAMS))

    @classmethod
    def empty(cls) -> "Scene2D":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 3)))

    @classmethod
    def random(cls, m: int, width: int, height: int, seed: int = 0,
               scale_range=(1.0, 4.0), opacity_logit=(0.5, 1.0)) -> "Scene2D":
        rng = np.random.default_rng(seed)
        return cls(
            position=rng.uniform([0, 0], [width - 1, height - 1], (m, 2)),
            log_scale=np.log(rng.uniform(*scale_range, (m, 2))),
            angle=rng.uniform(0, np.pi, (m, 1)),
            logit_opacity=rng.normal(*opacity_logit, (m, 1)),
            color=rng.uniform(0, 1, (m, 3)),
        )

    def covariance(self) -> np.ndarray:
        """M x 2 x 2 covariance matrices R S S^T R^T."""
        c, s = np.cos(self.angle[:, 0]), np.sin(self.angle[:, 0])
        rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
        sc = np.exp(self.log_scale)
        rs = rot * sc[:, None, :]
        return rs @ rs.transpose(0, 2, 1)


@dataclass
class SceneGrad:
    position: np.ndarray
    log_scale: np.ndarray
    angle: np.ndarray
    logit_opacity: np.ndarray
    color: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in Scene2D.PARAMS])


def render(scene: Scene2D, width: int, height: int) -> np.ndarray:
    """H x W x 3 image on a black background; pixel (row y, col x) samples point (x, y)."""
    return _raster.forward(scene.position, scene.log_scale, scene.angle, scene.logit_opacity,
                           scene.color, height, width, ALPHA_MIN, T_MIN)


def render_backward(scene: Scene2D, image_grad: np.ndarray) -> SceneGrad:
    """Gradients of ``sum(image_grad * render(scene))`` w.r.t. every scene parameter."""
    image_grad = np.ascontiguousarray(image_grad, dtype=np.float64)
    return SceneGrad(*_raster.backward(scene.position, scene.log_scale, scene.angle, scene.logit_opacity,
                                       scene.color, image_grad, ALPHA_MIN, T_MIN))


@dataclass
class LossResult:
    value: float
    l1: float
    ssim: float
    reg: float
    image_grad: np.ndarray
    logit_opacity_grad: np.ndarray


def loss(image: np.ndarray, target: np.ndarray, scene: Scene2D, reg_lambda: float) -> LossResult:
    """0.8 * L1 + 0.2 * (1 - SSIM) + reg_lambda * sum(opacity)."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {target.shape}")
    diff = image - target
    l1 = float(np.abs(diff).mean())
    s, ds = ssim_with_grad(image, target)
    sig = scene.opacity
    reg = reg_lambda * float(sig.sum())
    grad = L1_WEIGHT * np.sign(diff) / diff.size - SSIM_WEIGHT * ds
    d_lo = (reg_lambda * sig * (1.0 - sig))[:, None]
    return LossResult(L1_WEIGHT * l1 + SSIM_WEIGHT * (1.0 - s) + reg, l1, s, reg, grad, d_lo)


class Adam:
    """Adam with one learning rate per parameter class; state rows follow pruning."""

    def __init__(self, scene: Scene2D, lr: dict[str, float] | None = None,
                 betas=(0.9, 0.999), eps: float = 1e-15):
        self.lr = dict(DEFAULT_LR, **(lr or {}))
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(getattr(scene, n)) for n in Scene2D.PARAMS}
        self.v = {n: np.zeros_like(getattr(scene, n)) for n in Scene2D.PARAMS}

    def step(self, scene: Scene2D, grads: SceneGrad) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in Scene2D.PARAMS:
            g = grads[n]
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            update = self.lr[n] * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            setattr(scene, n, getattr(scene, n) - update)

    def keep(self, mask: np.ndarray) -> None:
        for n in Scene2D.PARAMS:
            self.m[n] = self.m[n][mask]
            self.v[n] = self.v[n][mask]


def quantized_view(scene: Scene2D, codebooks: dict[str, Codebook]) -> Scene2D:
    """Scene whose quantized groups are replaced by their assigned centroids."""
    view = scene.copy()
    for name, book in codebooks.items():
        setattr(view, name, np.asarray(book.centroids, dtype=np.float64)[book.assignments])
    return view


def build_codebooks(scene: Scene2D, vq_config: VqConfig) -> dict[str, Codebook]:
    books = {}
    for i, name in enumerate(QUANT_GROUPS):
        k = getattr(vq_config, _K_FIELD[name])
        books[name] = init_codebook(getattr(scene, name), k, vq_config.init, vq_config.seed + i, name)
    return books


def prune(scene: Scene2D, min_opacity: float, codebooks: dict[str, Codebook] | None = None
          ) -> tuple[Scene2D, np.ndarray]:
    """Drop Gaussians with sigmoid(logit_opacity) < min_opacity, including their codebook assignments."""
    if not 0 < min_opacity < 1:
        raise ValueError("min_opacity must be in (0, 1)")
    keep = scene.opacity >= min_opacity
    if codebooks:
        for book in codebooks.values():
            book.assignments = book.assignments[keep]
    return scene.take(keep), keep


@dataclass
class StepInfo:
    step: int
    loss: float
    quantized: bool
    reg_lambda: float
    grads: SceneGrad | None = None


@dataclass
class TraceRow:
    iter: int
    loss: float
    psnr: float
    count: int


class Trainer:
    """Holds the shadow scene, codebooks and optimizer for one training run."""

    def __init__(self, target: np.ndarray, scene: Scene2D, schedule: QatSchedule,
                 vq_config: VqConfig | None = None, lr: dict[str, float] | None = None,
                 keep_grads: bool = False):
        self.target = np.asarray(target, dtype=np.float64)
        if self.target.ndim != 3 or self.target.shape[2] != 3:
            raise ValueError("target must be H x W x 3")
        self.height, self.width = self.target.shape[:2]
        self.scene = scene.copy()
        self.schedule = schedule
        self.vq_config = vq_config or VqConfig(k_dc=64, k_sh=64, k_scale=64, k_rot=64)
        self.optimizer = Adam(self.scene, lr)
        self.codebooks: dict[str, Codebook] | None = None
        self.keep_grads = keep_grads
        self.losses: list[float] = []

    def reg_lambda_at(self, step: int) -> float:
        s = self.schedule
        return s.reg_lambda if s.reg_start_step <= step < s.reg_end_step else 0.0

    def ste_step(self, step: int) -> StepInfo:
        """One optimization step; quantized forward with straight-through gradients once QAT starts."""
        quantized = step >= self.schedule.qat_start_step
        if quantized:
            if self.codebooks is None:
                self.codebooks = build_codebooks(self.scene, self.vq_config)
            view = quantized_view(self.scene, self.codebooks)
        else:
            view = self.scene
        lam = self.reg_lambda_at(step)
        image = render(view, self.width, self.height)
        res = loss(image, self.target, self.scene, lam)
        grads = render_backward(view, res.image_grad)
        # straight-through: gradients at the centroids land unchanged on the shadow rows
        grads.logit_opacity = grads.logit_opacity + res.logit_opacity_grad
        self.optimizer.step(self.scene, grads)
        if quantized:
            for name, book in self.codebooks.items():
                qat_update(book, getattr(self.scene, name), step, self.schedule)
        return StepInfo(step, res.value, quantized, lam, grads if self.keep_grads else None)

    def prune(self, min_opacity: float | None = None) -> int:
        before = self.scene.count
        self.scene, keep = prune(self.scene, min_opacity or self.schedule.min_opacity, self.codebooks)
        self.optimizer.keep(keep)
        return before - self.scene.count

    def current_view(self) -> Scene2D:
        return quantized_view(self.scene, self.codebooks) if self.codebooks else self.scene

    def run(self, checkpoint_every: int = 100, start: int = 0, stop: int | None = None) -> list[TraceRow]:
        s = self.schedule
        stop = s.total_iters if stop is None else stop
        trace = []
        for step in range(start, stop):
            info = self.ste_step(step)
            self.losses.append(info.loss)
            if s.reg_start_step <= step < s.reg_end_step and (step + 1) % s.prune_every == 0:
                removed = self.prune()
                log.debug("step %d: pruned %d", step, removed)
            if (step + 1) % checkpoint_every == 0 or step + 1 == stop:
                trace.append(TraceRow(step + 1, info.loss, self.psnr(), self.scene.count))
        if stop == s.total_iters:
            self.prune()
            if trace:
                trace[-1] = replace(trace[-1], psnr=self.psnr(), count=self.scene.count)
        return trace

    def render(self) -> np.ndarray:
        return render(self.current_view(), self.width, self.height)

    def psnr(self) -> float:
        return psnr(self.render(), self.target)


@dataclass
class TrainResult:
    scene: Scene2D
    codebooks: dict[str, Codebook] | None
    trace: list[TraceRow]
    image: np.ndarray
    losses: list[float] = field(default_factory=list)


def train(target: np.ndarray, scene: Scene2D, schedule: QatSchedule, vq_config: VqConfig | None = None,
          lr: dict[str, float] | None = None, checkpoint_every: int = 100) -> TrainResult:
    """Run the full schedule; deterministic for fixed inputs."""
    trainer = Trainer(target, scene, schedule, vq_config, lr)
    trace = trainer.run(checkpoint_every)
    return TrainResult(trainer.scene, trainer.codebooks, trace, trainer.render(), trainer.losses)


def post_train_quantize(scene: Scene2D, k: int, iters: int = 30, seed: int = 0,
                        init: Init | str = Init.KMEANS_PLUS_PLUS) -> tuple[Scene2D, dict[str, Codebook]]:
    """Lloyd-quantize color, scale and angle of a trained scene."""
    from .vq import lloyd

    books = {name: lloyd(getattr(scene, name), k, iters, init, seed + i, name)
             for i, name in enumerate(QUANT_GROUPS)}
    return quantized_view(scene, books), books


_CKPT = struct.Struct("<4sHHI")
CKPT_MAGIC = b"S2D1"


def save_scene(scene: Scene2D) -> bytes:
    """Versioned little-endian checkpoint: header then float64 fields in PARAMS order."""
    parts = [_CKPT.pack(CKPT_MAGIC, 1, 0, scene.count)]
    parts += [getattr(scene, n).astype("<f8").tobytes() for n in Scene2D.PARAMS]
    return b"".join(parts)


def load_scene(blob: bytes) -> Scene2D:
    if len(blob) < _CKPT.size or blob[:4] != CKPT_MAGIC:
        raise ValueError("not a 2D scene checkpoint")
    _, version, _, m = _CKPT.unpack_from(blob, 0)
    if version != 1:
        raise ValueError(f"checkpoint version {version} unsupported")
    if len(blob) != _CKPT.size + 8 * 9 * m:
        raise ValueError("checkpoint size does not match its header")
    arrays = []
    pos = _CKPT.size
    for d in (2, 2, 1, 1, 3):
        arrays.append(np.frombuffer(blob, dtype="<f8", count=m * d, offset=pos).reshape(m, d).copy())
        pos += 8 * m * d
    return Scene2D(*arrays)


def write_trace_csv(trace: list[TraceRow], stream) -> None:
    stream.write("iter,loss,psnr,count\n")
    for row in trace:
        stream.write(f"{row.iter},{row.loss:.9g},{row.psnr:.6f},{row.count}\n")
