"""Desk-scale experiment definitions shared by the tests, CLI and examples."""

from __future__ import annotations

from .arch import ModelSpec, PatchSpec
from .mup import BaseHPs, WidthSpec
from .transfer import GridSpec

LR_GRID = tuple(2.0**e for e in range(-12, -5))
WIDTHS = (32, 64, 128)
BATCHES = (32, 64, 128)
STEPS = (500, 1000, 2000)
SEEDS = (0, 1, 2)
# base lr used where a single tuned value is needed (coordinate check)
TUNED_ETA = 2.0**-7


def desk_model(variant: str = "dit", n: int = 32, n_base: int = 32, head_dim: int = 8, depth: int = 2) -> ModelSpec:
    """Toy model on 8x8 single-channel images cut into four 4x4 patches."""
    return ModelSpec(variant, WidthSpec(n_base, n, head_dim), depth=depth, patch=PatchSpec(8, 4, 1))


def width_grid(steps: int = 2000, seeds=SEEDS, base: BaseHPs | None = None) -> GridSpec:
    return GridSpec("width", WIDTHS, "eta", LR_GRID, desk_model(), base or BaseHPs(), tuple(seeds), batch=64, steps=steps)


def batch_grid(steps: int = 2000, seeds=SEEDS, base: BaseHPs | None = None) -> GridSpec:
    return GridSpec("batch", BATCHES, "eta", LR_GRID, desk_model(), base or BaseHPs(), tuple(seeds), steps=steps)


def steps_grid(points=STEPS, seeds=SEEDS, base: BaseHPs | None = None) -> GridSpec:
    return GridSpec("steps", tuple(points), "eta", LR_GRID, desk_model(), base or BaseHPs(), tuple(seeds), batch=64)
