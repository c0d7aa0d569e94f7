"""Coordinate check: are activation and update sizes stable across widths?

For every width the model is trained for ``T`` steps on the same data order.
Before each step (and after the last) a fixed probe batch is pushed through
the model and two statistics are recorded per layer:

* ``act_rms``: RMS of the layer's output;
* ``upd_rms``: RMS of the change that training has made to that output,
  ``x @ (W_t - W_0)`` for a weight matrix applied to its current input ``x``
  (or the raw effective change for vector-shaped weights), and the change of
  the block output itself for recorded activations.

Statistics are averaged over seeds. A layer passes when the max/min ratio
across widths stays at or below ``C`` at every step.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .arch import ModelSpec, build_graph
from .diffusion import TaskSpec, Trainer, make_batch
from .errors import ConfigError, NumericError
from .mup import BaseHPs, Scheme, make_plan

STATS = ("act", "upd")


def _rms(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.mean(a * a))) if a.size else 0.0


@dataclass
class CoordReport:
    """``cells[(layer, step, width)] = (act_rms, upd_rms)``, seed-averaged."""

    widths: list[int]
    scheme: str
    steps: int
    cells: dict[tuple[str, int, int], tuple[float, float]] = field(default_factory=dict)
    diverged: dict[int, bool] = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError("coordinate-check widths must be strictly increasing")

    @property
    def layers(self) -> list[str]:
        return sorted({k[0] for k in self.cells})

    def series(self, layer: str, stat: str, step: int) -> list[float]:
        i = STATS.index(stat)
        return [self.cells[(layer, step, w)][i] for w in self.widths]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["width", "layer", "step", "act_rms", "upd_rms"])
        for layer, step, w in sorted(self.cells, key=lambda k: (k[2], k[0], k[1])):
            a, u = self.cells[(layer, step, w)]
            wr.writerow([w, layer, step, repr(a), repr(u)])
        return buf.getvalue()


def spread(values: Sequence[float]) -> float:
    """max/min over widths; 1 when all are zero, inf when only some are."""
    vals = [float(v) for v in values]
    if any(not math.isfinite(v) for v in vals):
        return math.inf
    hi, lo = max(vals), min(vals)
    if hi == 0.0:
        return 1.0
    if lo <= 0.0:
        return math.inf
    return hi / lo


def verdict(report: CoordReport, C: float = 4.0, stats: Iterable[str] = STATS) -> dict:
    """Per-layer pass/fail plus a summary ``pass`` flag."""
    if not C >= 1:
        raise ConfigError("ratio threshold must be at least 1")
    stats = tuple(stats)
    layers = {}
    for layer in report.layers:
        worst = 1.0
        for step in range(report.steps + 1):
            for st in stats:
                worst = max(worst, spread(report.series(layer, st, step)))
        layers[layer] = {"max_ratio": worst, "pass": worst <= C}
    diverged = any(report.diverged.values())
    return {
        "scheme": report.scheme,
        "widths": list(report.widths),
        "C": C,
        "stats": list(stats),
        "layers": layers,
        "diverged": diverged,
        "pass": (not diverged) and all(v["pass"] for v in layers.values()),
    }


def verdict_json(v: dict) -> str:
    def enc(x):
        if isinstance(x, float) and not math.isfinite(x):
            return "inf"
        return x

    def walk(o):
        if isinstance(o, dict):
            return {k: walk(v) for k, v in o.items()}
        if isinstance(o, list):
            return [walk(v) for v in o]
        return enc(o)

    return json.dumps(walk(v), indent=1, sort_keys=True)


def _probe(trainer: Trainer, batch, init: dict[str, np.ndarray], init_act: dict[str, np.ndarray]):
    """Forward the probe batch and return ``{layer: (act_rms, upd_rms)}`` plus raw activations."""
    model = trainer.model
    model.record = {}
    model.taps = {}
    acts: dict[str, np.ndarray] = {}
    # block outputs are captured by wrapping the RMS recorder
    orig = model._rec

    def rec(key, x):
        acts[key] = x.data.copy()
        orig(key, x)

    model._rec = rec
    try:
        model.forward(trainer.params, trainer.plan, batch)
    finally:
        model._rec = orig
        taps, model.taps, model.record = model.taps, None, None

    out: dict[str, tuple[float, float]] = {}
    for key, a in acts.items():
        base = init_act.get(key)
        out[key] = (_rms(a), _rms(a - base) if base is not None else 0.0)
    for name, p in trainer.params.items():
        mult = trainer.plan[name].multiplier
        w = p.data.astype(np.float64) * mult
        dw = (p.data.astype(np.float64) - init[name]) * mult
        x = taps.get(name)
        if x is not None:
            x = x.astype(np.float64)
            out[f"w:{name}"] = (_rms(x @ w), _rms(x @ dw))
        else:
            out[f"w:{name}"] = (_rms(w), _rms(dw))
    return out, acts


def _run_width(spec: ModelSpec, steps: int, base: BaseHPs, scheme, seed: int, batch_size: int, task, dtype):
    plan = make_plan(build_graph(spec), spec.widths, base, scheme)
    trainer = Trainer(spec, plan, seed, batch_size, hps=base, task=task, dtype=dtype)
    probe, _ = make_batch(trainer.dataset, trainer.task.schedule, 0, batch_size, seed + 10_000, dtype)
    init = {k: p.data.astype(np.float64).copy() for k, p in trainer.params.items()}
    rows = {}
    stats, init_act = _probe(trainer, probe, init, {})
    rows[0] = stats
    diverged = False
    for t in range(1, steps + 1):
        try:
            loss = trainer.step()
        except (NumericError, FloatingPointError):
            diverged = True
            break
        if not math.isfinite(loss):
            diverged = True
            break
        rows[t], _ = _probe(trainer, probe, init, init_act)
    return rows, diverged


def run_coordcheck(
    spec: ModelSpec,
    widths: Sequence[int],
    steps: int = 10,
    base: BaseHPs | None = None,
    scheme="mup",
    seeds: Sequence[int] = (0, 1, 2),
    batch_size: int = 32,
    task: TaskSpec | None = None,
    dtype=np.float64,
) -> CoordReport:
    """Train each width for ``steps`` steps and collect seed-averaged RMS cells."""
    if steps < 1:
        raise ConfigError("coordinate check needs at least one step")
    if not seeds:
        raise ConfigError("coordinate check needs at least one seed")
    base = base or BaseHPs()
    scheme = Scheme.parse(scheme)
    widths = list(widths)
    report = CoordReport(widths, scheme.value, steps)
    for n in widths:
        s_n = spec.at_width(n)
        acc: dict[tuple[str, int], np.ndarray] = {}
        diverged = False
        for seed in seeds:
            rows, div = _run_width(s_n, steps, base, scheme, seed, batch_size, task, dtype)
            diverged |= div
            for t, layer_stats in rows.items():
                for layer, v in layer_stats.items():
                    acc.setdefault((layer, t), np.zeros(2))
                    acc[(layer, t)] += np.asarray(v)
        report.diverged[n] = diverged
        for (layer, t), v in acc.items():
            mean = v / len(seeds)
            # a diverged width has incomplete cells; mark them all infinite
            report.cells[(layer, t, n)] = (math.inf, math.inf) if diverged else (float(mean[0]), float(mean[1]))
    # layers present at one width only (none in practice) would break verdicts
    layers = {k[0] for k in report.cells}
    for layer in layers:
        for n in widths:
            for t in range(steps + 1):
                report.cells.setdefault((layer, t, n), (math.inf, math.inf))
    return report
