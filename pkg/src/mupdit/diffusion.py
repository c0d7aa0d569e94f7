"""Desk-scale diffusion objectives and the single-trial training loop."""

from __future__ import annotations

import functools
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .arch import Batch, DiffusionTransformer, ModelSpec, init_params
from .autodiff import Tensor
from .errors import ConfigError, NumericError
from .mup import BaseHPs, ParamPlan
from .optim import AdamWState, OptimConfig, Schedule, adamw_step, clip_global_norm

_CHUNK = 256


@dataclass(frozen=True)
class ToyDataset:
    """Class-conditioned Gaussian blobs on a small grid, values in [-1, 1].

    Sample ``i`` depends only on ``(seed, i)``: its class is ``i % num_classes``
    and its jitter and pixel noise come from a chunked named random stream.
    """

    seed: int = 0
    image_side: int = 8
    channels: int = 1
    num_classes: int = 4
    blob_width: float = 1.2
    pixel_noise: float = 0.05

    def centers(self) -> np.ndarray:
        s = self.image_side
        lo, hi = 0.25 * (s - 1), 0.75 * (s - 1)
        base = [(lo, lo), (lo, hi), (hi, lo), (hi, hi)]
        k = self.num_classes
        if k <= 4:
            return np.array(base[:k])
        ang = 2 * np.pi * np.arange(k) / k
        c = (s - 1) / 2
        return np.stack([c + 0.3 * s * np.cos(ang), c + 0.3 * s * np.sin(ang)], axis=1)

    def _chunk(self, chunk: int) -> np.ndarray:
        return _dataset_chunk(self, chunk)

    def sample(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            return np.zeros((0, self.channels, self.image_side, self.image_side)), np.zeros(0, np.int64)
        out = np.empty((idx.size, self.channels, self.image_side, self.image_side))
        for c in np.unique(idx // _CHUNK):
            sel = (idx // _CHUNK) == c
            out[sel] = self._chunk(int(c))[idx[sel] % _CHUNK]
        return out, idx % self.num_classes


@functools.lru_cache(maxsize=64)
def _dataset_chunk(ds: ToyDataset, chunk: int) -> np.ndarray:
    rng = ad.SeededRng(ds.seed, f"data/{chunk}").generator
    idx = chunk * _CHUNK + np.arange(_CHUNK)
    labels = idx % ds.num_classes
    s = ds.image_side
    centers = ds.centers()[labels] + rng.uniform(-0.75, 0.75, size=(_CHUNK, 2))
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    blob = np.exp(-d2 / (2 * ds.blob_width**2))
    img = -1.0 + 2.0 * blob + ds.pixel_noise * rng.standard_normal((_CHUNK, s, s))
    img = np.clip(img, -1.0, 1.0)
    return np.repeat(img[:, None], ds.channels, axis=1)


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "ddpm"
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    num_steps: int = 1000

    def __post_init__(self):
        if self.kind not in ("ddpm", "fm"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.num_steps < 1 or not (0 <= self.beta_start <= self.beta_end < 1):
            raise ConfigError("invalid DDPM schedule constants")

    @functools.cached_property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.num_steps)

    @functools.cached_property
    def alphas_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)


def ddpm_corrupt(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` for integer ``t`` in ``[1, T]``."""
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > schedule.num_steps):
        raise ConfigError(f"DDPM step must lie in [1, {schedule.num_steps}]")
    ab = schedule.alphas_bar[t - 1].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def fm_corrupt(x0: np.ndarray, t, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rectified-flow interpolation (data at t=0, noise at t=1) and its velocity target."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ConfigError("flow-matching time must lie in [0, 1]")
    tt = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - tt) * x0 + tt * eps, eps - x0


@dataclass(frozen=True)
class TaskSpec:
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    data_seed: int = 0
    num_classes: int = 4
    divergence_factor: float = 10.0
    smoothing: float = 0.1


# Aux losses take (prediction, target) and return a scalar Tensor.
AUX_LOSSES: dict[str, Callable[[Tensor, np.ndarray], Tensor]] = {
    "pred_l2": lambda pred, target: ad.mean_all(ad.mul(pred, pred)),
}


def make_batch(dataset: ToyDataset, schedule: NoiseSchedule, step: int, batch: int, seed: int, dtype=np.float64):
    """Inputs and regression target for one training step; pure in ``(seed, step)``."""
    x0, y = dataset.sample(np.arange(step * batch, (step + 1) * batch))
    rng = ad.SeededRng(seed, f"noise/{step}").generator
    eps = rng.standard_normal(x0.shape)
    if schedule.kind == "ddpm":
        t = rng.integers(1, schedule.num_steps + 1, size=batch)
        xt = ddpm_corrupt(x0, t, eps, schedule)
        target, t_in = eps, t.astype(np.float64)
    else:
        t = rng.uniform(0.0, 1.0, size=batch)
        xt, target = fm_corrupt(x0, t, eps)
        t_in = t * schedule.num_steps
    return Batch(xt.astype(dtype), t_in, y), target.astype(dtype)


def diffusion_loss(
    model: DiffusionTransformer,
    params: dict[str, Tensor],
    plan: ParamPlan | None,
    batch: Batch,
    target: np.ndarray,
    loss_weights: Mapping[str, float] | None = None,
) -> tuple[Tensor, Tensor]:
    """Returns ``(total, main)``: MSE to the target plus weighted aux terms."""
    pred = model.forward(params, plan, batch)
    main = ad.mse(pred, Tensor(target))
    total = main
    for name, w in sorted((loss_weights or {}).items()):
        if w == 0:
            continue
        if name not in AUX_LOSSES:
            raise ConfigError(f"no aux loss registered under {name!r}")
        total = ad.add(total, ad.scale(AUX_LOSSES[name](pred, target), w))
    if not math.isfinite(float(total.data)):
        raise NumericError("non-finite loss")
    return total, main


@dataclass
class TrialResult:
    trace: list[float]
    final_loss: float
    diverged: bool
    wall_time: float
    seed: int
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "trace": self.trace,
            "final_loss": self.final_loss,
            "diverged": self.diverged,
            "wall_time": self.wall_time,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


def smoothed_final(trace: list[float], fraction: float = 0.1) -> float:
    if not trace:
        return math.inf
    k = max(1, int(math.ceil(len(trace) * fraction)))
    return float(np.mean(trace[-k:]))


class Trainer:
    """Owns one model's parameters and optimiser state."""

    def __init__(
        self,
        spec: ModelSpec,
        plan: ParamPlan,
        seed: int,
        batch: int,
        hps: BaseHPs | None = None,
        task: TaskSpec | None = None,
        dtype=np.float64,
        optim: OptimConfig | None = None,
    ):
        self.spec, self.plan, self.seed, self.batch = spec, plan, seed, batch
        self.hps = hps or BaseHPs()
        self.task = task or TaskSpec(num_classes=spec.num_classes)
        self.dtype = dtype
        self.model = DiffusionTransformer(spec)
        self.params = init_params(self.model.graph, plan, seed, dtype=dtype)
        self.dataset = ToyDataset(
            seed=self.task.data_seed,
            image_side=spec.patch.image_side,
            channels=spec.patch.channels,
            num_classes=spec.num_classes,
        )
        self.optim = optim or OptimConfig(
            weight_decay=self.hps.weight_decay,
            clip_max_norm=self.hps.grad_clip,
            schedule=Schedule(self.hps.warmup_steps),
        )
        self.state = AdamWState()
        self.lrs = plan.lrs()
        self.decay_lrs = {w.name: self.hps.group(w.group).eta for w in self.model.graph}
        self.step_index = 0

    def step(self) -> float:
        """One optimisation step; raises :class:`NumericError` on divergence."""
        batch, target = make_batch(
            self.dataset, self.task.schedule, self.step_index, self.batch, self.seed, self.dtype
        )
        tape = ad.Tape()
        with tape:
            total, main = diffusion_loss(self.model, self.params, self.plan, batch, target, self.hps.loss_weights)
        for p in self.params.values():
            p.grad = None
        ad.backward(total, tape)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        if self.optim.clip_max_norm is not None:
            clip_global_norm(grads, self.optim.clip_max_norm)
        arrays = {k: p.data for k, p in self.params.items()}
        adamw_step(arrays, grads, self.state, self.lrs, self.optim, decay_lr=self.decay_lrs)
        self.step_index += 1
        return float(main.data)


def config_hash(doc: Mapping) -> str:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def train_run(
    spec: ModelSpec,
    plan: ParamPlan,
    steps: int,
    batch: int,
    seed: int,
    hps: BaseHPs | None = None,
    task: TaskSpec | None = None,
    dtype=np.float64,
    config_hash: str = "",
) -> TrialResult:
    """Train for ``steps`` iterations, stopping early on divergence."""
    return train_trainer(Trainer(spec, plan, seed, batch, hps=hps, task=task, dtype=dtype), steps, config_hash)


def train_trainer(trainer: Trainer, steps: int, config_hash: str = "") -> TrialResult:
    """Advance an existing trainer by ``steps`` iterations (or until divergence)."""
    t0 = time.perf_counter()
    factor = trainer.task.divergence_factor
    trace: list[float] = []
    diverged = False
    first = None
    for _ in range(steps):
        try:
            loss = trainer.step()
        except (NumericError, FloatingPointError):
            diverged = True
            break
        if not math.isfinite(loss) or (first is not None and loss > factor * first):
            trace.append(loss)
            diverged = True
            break
        if first is None:
            first = loss
        trace.append(loss)
    final = math.inf if diverged else smoothed_final(trace, trainer.task.smoothing)
    return TrialResult(trace, final, diverged, time.perf_counter() - t0, trainer.seed, config_hash)
