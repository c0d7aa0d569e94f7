"""Hyperparameter-transfer experiments.

A grid sweep trains every (axis point, HP value, seed) combination and asks
whether the loss-minimising HP index stays put as the axis (width, batch size
or step count) changes. Random search samples base HPs on a proxy and selects
by the lowest-loss envelope. :func:`mu_transfer` resolves the selected base HPs
at a target width and trains the target.

Trials are appended to a JSON-lines log keyed by ``(config_hash, seed)``;
re-running over an existing log only schedules what is missing. Wall-clock
times go to a sidecar file so the log itself is deterministic.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .arch import ModelSpec, build_graph
from .autodiff import SeededRng
from .diffusion import TaskSpec, TrialResult, config_hash, train_run
from .errors import ConfigError, SelectionError
from .mup import BaseHPs, CostInputs, GroupHPs, ParamPlan, Scheme, cost_ratio, make_plan

AXES = ("width", "batch", "steps")
TIE_DELTA = 1e-4
DTYPES = {"float32": np.float32, "float64": np.float64}


# ---------------------------------------------------------------------------
# HP addressing


def apply_hp(base: BaseHPs, name: str, value: float) -> BaseHPs:
    """Return ``base`` with one hyperparameter replaced.

    Names: ``eta``, ``sigma_out``, ``grad_clip``, ``warmup_steps``,
    ``weight_decay``, ``eta.<group>``, ``sigma.<group>``, ``phi.<group>``,
    ``loss_weights.<aux>``.
    """
    head, _, tail = name.partition(".")
    if not tail:
        if name == "warmup_steps":
            return base.replace(warmup_steps=int(round(value)))
        if name in ("eta", "sigma_out", "grad_clip", "weight_decay"):
            return base.replace(**{name: float(value)})
    elif head == "loss_weights":
        return base.replace(loss_weights={**base.loss_weights, tail: float(value)})
    elif head == "eta":
        return base.replace(eta_overrides={**base.eta_overrides, tail: float(value)})
    elif head in ("sigma", "phi"):
        g = base.groups.get(tail) or GroupHPs()
        return base.replace(groups={**base.groups, tail: dataclasses.replace(g, **{head: float(value)})})
    raise ConfigError(f"unknown hyperparameter {name!r}")


def hp_value(base: BaseHPs, name: str) -> float:
    head, _, tail = name.partition(".")
    if not tail:
        return float(getattr(base, name))
    if head == "loss_weights":
        return float(base.loss_weights.get(tail, 0.0))
    if head == "eta":
        return float(base.group(tail).eta)
    return float(getattr(base.group(tail), head))


def lr_of(hps: Mapping[str, float]) -> float:
    """The learning rate used for tie-breaking in envelope selection."""
    for k in ("eta", "lr"):
        if k in hps:
            return float(hps[k])
    etas = [v for k, v in hps.items() if k.startswith("eta.")]
    return float(min(etas)) if etas else 0.0


# ---------------------------------------------------------------------------
# single trials


@dataclass(frozen=True)
class TrialTask:
    spec: ModelSpec
    scheme: str
    base: BaseHPs
    batch: int
    steps: int
    seed: int
    task: TaskSpec = field(default_factory=TaskSpec)
    dtype: str = "float32"
    meta: Mapping[str, object] = field(default_factory=dict)

    def config_doc(self) -> dict:
        return {
            "model": _spec_doc(self.spec),
            "scheme": Scheme.parse(self.scheme).value,
            "base_hps": self.base.to_dict(),
            "batch": self.batch,
            "steps": self.steps,
            "task": dataclasses.asdict(self.task),
            "dtype": self.dtype,
        }

    @property
    def config_hash(self) -> str:
        return config_hash(self.config_doc())

    @property
    def key(self) -> tuple[str, int]:
        return (self.config_hash, self.seed)


def _spec_doc(spec: ModelSpec) -> dict:
    return dataclasses.asdict(spec)


def run_trial(t: TrialTask) -> tuple[dict, TrialResult]:
    """Train one trial; returns its log record and the full result."""
    plan = make_plan(build_graph(t.spec), t.spec.widths, t.base, t.scheme)
    with np.errstate(all="ignore"):
        res = train_run(t.spec, plan, t.steps, t.batch, t.seed, hps=t.base, task=t.task, dtype=DTYPES[t.dtype], config_hash=t.config_hash)
    record = {
        "config_hash": t.config_hash,
        "seed": t.seed,
        **{k: v for k, v in t.meta.items()},
        "final_loss": res.final_loss if math.isfinite(res.final_loss) else None,
        "diverged": res.diverged,
        "steps_completed": len(res.trace),
    }
    return record, res


# ---------------------------------------------------------------------------
# trial log


class TrialLog:
    """Append-only JSON-lines log with an optional trace directory.

    Records are keyed by ``(config_hash, seed)``. When a sweep reuses a trial
    that another sweep already ran, an alias record carrying the new sweep's
    labels (axis, point, HP) is appended instead of retraining.
    """

    LABELS = ("axis", "axis_point", "hp_name", "hp_value", "hps", "scheme")

    def __init__(self, path: str | os.PathLike | None):
        self.path = Path(path) if path is not None else None
        self.lines: list[dict] = []
        self.records: dict[tuple[str, int], dict] = {}
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self._index(json.loads(line))

    def _index(self, rec: dict) -> None:
        self.lines.append(rec)
        self.records.setdefault((rec["config_hash"], int(rec["seed"])), rec)

    def __contains__(self, key) -> bool:
        return key in self.records

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.lines.clear()
        self.records.clear()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")
            timings = self._timings_path()
            if timings.exists():
                timings.unlink()

    def _timings_path(self) -> Path:
        return self.path.with_name(self.path.stem + ".timings.jsonl")

    def _write(self, record: dict) -> None:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._index(record)

    def append(self, record: dict, result: TrialResult | None = None) -> dict:
        record = dict(record)
        if self.path is not None and result is not None:
            rel = Path("traces") / f"{record['config_hash']}-{record['seed']}.json"
            trace_file = self.path.parent / rel
            trace_file.parent.mkdir(parents=True, exist_ok=True)
            trace_file.write_text(json.dumps([float(x) for x in result.trace]))
            record["trace_path"] = rel.as_posix()
            with self._timings_path().open("a") as fh:
                fh.write(json.dumps({"config_hash": record["config_hash"], "seed": record["seed"], "wall_time": result.wall_time}) + "\n")
        self._write(record)
        return record

    def labelled(self, key: tuple[str, int], meta: Mapping) -> dict | None:
        """The record for ``key`` carrying exactly these labels, if logged."""
        want = {k: meta.get(k) for k in self.LABELS}
        for rec in self.lines:
            if (rec["config_hash"], int(rec["seed"])) == key and {k: rec.get(k) for k in self.LABELS} == want:
                return rec
        return None

    def alias(self, key: tuple[str, int], meta: Mapping) -> dict:
        rec = {k: v for k, v in self.records[key].items() if k not in self.LABELS}
        rec.update(meta)
        self._write(rec)
        return rec

    def wall_times(self) -> dict[tuple[str, int], float]:
        out = {}
        if self.path is not None and self._timings_path().exists():
            for line in self._timings_path().read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    out[(d["config_hash"], int(d["seed"]))] = float(d["wall_time"])
        return out


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MUPDIT_WORKERS", "1")))
    except ValueError:
        raise ConfigError("MUPDIT_WORKERS must be an integer") from None


def execute(tasks: Sequence[TrialTask], log: TrialLog, workers: int | None = None) -> list[dict]:
    """Run every task whose key is not yet logged and return one record per task.

    Records are written in task order whatever the completion order, so the
    log is a deterministic function of the task list and its prior contents.
    """
    keys = [t.key for t in tasks]
    to_run: dict[tuple[str, int], TrialTask] = {}
    for t, k in zip(tasks, keys):
        if k not in log and k not in to_run:
            to_run[k] = t
    workers = default_workers() if workers is None else max(1, int(workers))
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 and len(to_run) > 1 else None
    try:
        futures = {k: pool.submit(run_trial, t) for k, t in to_run.items()} if pool else {}
        out = []
        for t, k in zip(tasks, keys):
            if k in to_run and k not in log:
                rec, res = futures[k].result() if pool else run_trial(t)
                out.append(log.append(rec, res))
                continue
            rec = log.labelled(k, t.meta)
            out.append(rec if rec is not None else log.alias(k, t.meta))
        return out
    finally:
        if pool is not None:
            pool.shutdown()


def trials_to_run(tasks: Sequence[TrialTask], log: TrialLog) -> int:
    return len({t.key for t in tasks} - set(log.records))


# ---------------------------------------------------------------------------
# grid sweeps


@dataclass(frozen=True)
class GridSpec:
    """One axis of a transfer experiment.

    ``model`` carries ``n_base`` and ``head_dim``; ``batch`` and ``steps`` are
    the fixed values for the axes not under test.
    """

    axis: str
    points: tuple[int, ...]
    hp_name: str
    hp_values: tuple[float, ...]
    model: ModelSpec
    base: BaseHPs = field(default_factory=BaseHPs)
    seeds: tuple[int, ...] = (0, 1, 2)
    batch: int = 64
    steps: int = 2000
    task: TaskSpec = field(default_factory=TaskSpec)
    dtype: str = "float32"
    tolerance: int = 1

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}")
        if len(self.points) < 2:
            raise ConfigError("a transfer grid needs at least two axis points")
        if len(self.hp_values) < 3:
            raise ConfigError("a transfer grid needs at least three HP values")
        if list(self.hp_values) != sorted(self.hp_values):
            raise ConfigError("HP values must be sorted ascending")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.tolerance < 0:
            raise ConfigError("tolerance must be nonnegative")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        object.__setattr__(self, "points", tuple(int(p) for p in self.points))
        object.__setattr__(self, "hp_values", tuple(float(v) for v in self.hp_values))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def tasks(self, scheme) -> list[TrialTask]:
        scheme = Scheme.parse(scheme).value
        out = []
        for p in self.points:
            spec, batch, steps = self.model, self.batch, self.steps
            if self.axis == "width":
                spec = self.model.at_width(p)
            elif self.axis == "batch":
                batch = p
            else:
                steps = p
            for j, v in enumerate(self.hp_values):
                base = apply_hp(self.base, self.hp_name, v)
                for s in self.seeds:
                    meta = {"axis": self.axis, "axis_point": p, "hp_name": self.hp_name, "hp_value": v, "scheme": scheme}
                    out.append(TrialTask(spec, scheme, base, batch, steps, s, self.task, self.dtype, meta))
        return out


@dataclass
class TransferVerdict:
    axis: str
    axis_points: list[int]
    hp_name: str
    hp_values: list[float]
    argmin_indices: list[int | None]
    tolerance: int
    passed: bool
    reason: str = ""
    # cells[point][value] = (seed-mean loss or inf, n_seeds, diverged_count)
    cells: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "axis_points": self.axis_points,
            "hp_name": self.hp_name,
            "hp_values": self.hp_values,
            "argmin_indices": self.argmin_indices,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "reason": self.reason,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def strictly_decreasing(self) -> bool:
        idx = self.argmin_indices
        return all(i is not None for i in idx) and all(b < a for a, b in zip(idx, idx[1:]))


def aggregate(records: Iterable[dict]) -> dict[tuple[str, int, float], tuple[float, int, int]]:
    """``(axis, point, hp_value) -> (seed-mean loss, n_seeds, diverged_count)``.

    A cell with any diverged seed is itself diverged (mean ``inf``).
    """
    groups: dict[tuple[str, int, float], list[dict]] = {}
    for r in records:
        groups.setdefault((r["axis"], int(r["axis_point"]), float(r["hp_value"])), []).append(r)
    out = {}
    for key, rs in groups.items():
        div = sum(1 for r in rs if r["diverged"] or r["final_loss"] is None)
        mean = math.inf if div else float(np.mean([r["final_loss"] for r in rs]))
        out[key] = (mean, len(rs), div)
    return out


def argmin_index(losses: Sequence[float]) -> int | None:
    """Index of the smallest finite loss (first on ties); None if all diverged."""
    best, idx = math.inf, None
    for i, v in enumerate(losses):
        if v is not None and math.isfinite(v) and v < best:
            best, idx = v, i
    return idx


def fold_verdict(
    records: Iterable[dict],
    axis: str,
    points: Sequence[int],
    hp_name: str,
    hp_values: Sequence[float],
    tolerance: int = 1,
) -> TransferVerdict:
    """Pure reduction of trial records to a :class:`TransferVerdict`."""
    records = [r for r in records if r.get("axis") == axis and r.get("hp_name") == hp_name]
    cells = aggregate(records)
    argmins: list[int | None] = []
    table: dict = {}
    reason = ""
    for p in points:
        row = []
        table[p] = {}
        for v in hp_values:
            cell = cells.get((axis, int(p), float(v)))
            if cell is None:
                raise ConfigError(f"missing trials for {axis}={p}, {hp_name}={v}")
            table[p][v] = cell
            row.append(cell[0])
        idx = argmin_index(row)
        if idx is None and not reason:
            reason = f"every {hp_name} value diverged at {axis}={p}"
        argmins.append(idx)
    if reason:
        passed = False
    else:
        passed = max(argmins) - min(argmins) <= tolerance
        if not passed:
            reason = f"argmin indices {argmins} spread beyond tolerance {tolerance}"
    return TransferVerdict(axis, [int(p) for p in points], hp_name, [float(v) for v in hp_values], argmins, tolerance, passed, reason, table)


def sweep_axis(
    grid: GridSpec,
    scheme,
    log_path: str | os.PathLike | None = None,
    workers: int | None = None,
    resume: bool = True,
) -> TransferVerdict:
    """Run (or resume) a grid sweep and return its verdict."""
    log = TrialLog(log_path)
    if not resume:
        log.reset()
    tasks = grid.tasks(scheme)
    globals_ = {json.dumps(t.base.global_hps(), sort_keys=True) for t in tasks if t.meta["hp_value"] == grid.hp_values[0]}
    if len(globals_) != 1:
        raise ConfigError("global hyperparameters differ across axis points")
    recs = execute(tasks, log, workers)
    return fold_verdict(recs, grid.axis, grid.points, grid.hp_name, grid.hp_values, grid.tolerance)


def scheduled_count(grid: GridSpec, scheme, log_path) -> int:
    """How many trials a resumed sweep would still run."""
    return trials_to_run(grid.tasks(scheme), TrialLog(log_path))


# ---------------------------------------------------------------------------
# random search and selection


@dataclass(frozen=True)
class HPRange:
    lo: float
    hi: float
    scale: str = "log"

    def __post_init__(self):
        if self.scale not in ("log", "linear"):
            raise ConfigError("scale must be 'log' or 'linear'")
        if self.hi < self.lo:
            raise ConfigError("range upper bound below lower bound")
        if self.scale == "log" and self.lo <= 0:
            raise ConfigError("log-scaled ranges must be positive")

    def sample(self, rng: np.random.Generator) -> float:
        if self.scale == "log":
            return float(math.exp(rng.uniform(math.log(self.lo), math.log(self.hi))))
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class SearchSpec:
    n_trials: int
    ranges: Mapping[str, HPRange]
    model: ModelSpec
    base: BaseHPs = field(default_factory=BaseHPs)
    seeds: tuple[int, ...] = (0,)
    batch: int = 64
    steps: int = 2000
    task: TaskSpec = field(default_factory=TaskSpec)
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigError("n_trials must be at least 1")
        if not self.ranges:
            raise ConfigError("a search needs at least one HP range")


@dataclass
class SearchResult:
    records: list[dict]
    trials: list[dict]
    selected: dict[str, float]


def sample_hps(spec: SearchSpec, seed: int) -> list[dict[str, float]]:
    rng = SeededRng(seed, "search").generator
    out = []
    for _ in range(spec.n_trials):
        hp = {}
        for name in sorted(spec.ranges):
            v = spec.ranges[name].sample(rng)
            hp[name] = float(round(v)) if name == "warmup_steps" else v
        out.append(hp)
    return out


def envelope_select(trials: Sequence[Mapping], delta: float = TIE_DELTA) -> dict[str, float]:
    """Pick the HPs of the lowest-loss surviving trial.

    Each trial maps ``hps`` to a dict of values, ``final_loss`` to a float and
    optionally ``diverged``. Losses within ``delta`` of the best are treated
    as ties and resolved toward the smaller learning rate.
    """
    alive = [
        t
        for t in trials
        if not t.get("diverged") and t.get("final_loss") is not None and math.isfinite(t["final_loss"])
    ]
    if not alive:
        raise SelectionError("every trial diverged")
    best = min(t["final_loss"] for t in alive)
    tied = [t for t in alive if t["final_loss"] <= best + delta]
    pick = min(tied, key=lambda t: (lr_of(t["hps"]), t["final_loss"]))
    return dict(pick["hps"])


def random_search(
    spec: SearchSpec,
    seed: int = 0,
    log_path: str | os.PathLike | None = None,
    workers: int | None = None,
    scheme="mup",
    resume: bool = True,
) -> SearchResult:
    log = TrialLog(log_path)
    if not resume:
        log.reset()
    scheme = Scheme.parse(scheme).value
    hps_list = sample_hps(spec, seed)
    tasks: list[TrialTask] = []
    groups: list[list[TrialTask]] = []
    for i, hps in enumerate(hps_list):
        base = spec.base
        for k, v in hps.items():
            base = apply_hp(base, k, v)
        g = []
        for s in spec.seeds:
            meta = {"axis": "search", "axis_point": i, "hp_name": "search", "hp_value": float(i), "hps": hps, "scheme": scheme}
            t = TrialTask(spec.model, scheme, base, spec.batch, spec.steps, s, spec.task, spec.dtype, meta)
            g.append(t)
            tasks.append(t)
        groups.append(g)
    recs_all = execute(tasks, log, workers)
    by_task = iter(recs_all)
    trials = []
    for hps, g in zip(hps_list, groups):
        recs = [next(by_task) for _ in g]
        div = any(r["diverged"] or r["final_loss"] is None for r in recs)
        loss = math.inf if div else float(np.mean([r["final_loss"] for r in recs]))
        trials.append({"hps": hps, "final_loss": loss, "diverged": div})
    selected = envelope_select(trials)
    return SearchResult(recs_all, trials, selected)


# ---------------------------------------------------------------------------
# muTransfer


@dataclass(frozen=True)
class TargetSpec:
    n: int
    batch: int
    steps: int


@dataclass
class TransferResult:
    base: BaseHPs
    selected: dict[str, float]
    target_spec: ModelSpec
    plan: ParamPlan
    result: TrialResult | None
    proxy_trials: int
    cost: float


def param_count(spec: ModelSpec) -> int:
    return int(sum(int(np.prod(w.shape)) for w in build_graph(spec)))


def mu_transfer(
    search: GridSpec | SearchSpec,
    target: TargetSpec,
    scheme="mup",
    seed: int = 0,
    log_path: str | os.PathLike | None = None,
    workers: int | None = None,
    train_target: bool = True,
) -> TransferResult:
    """Select base HPs on the proxy, resolve them at the target width, train the target."""
    if isinstance(search, GridSpec):
        if search.axis != "width":
            raise ConfigError("grid-based transfer needs a width grid")
        verdict = sweep_axis(search, scheme, log_path, workers)
        idx = verdict.argmin_indices[0]
        if idx is None:
            raise SelectionError("no surviving proxy trial")
        selected = {search.hp_name: search.hp_values[idx]}
        proxy_spec = search.model.at_width(search.points[0])
        n_trials = len(search.hp_values)
        proxy_batch, proxy_steps = search.batch, search.steps
    else:
        res = random_search(search, seed, log_path, workers, scheme)
        selected = res.selected
        proxy_spec = search.model
        n_trials = search.n_trials
        proxy_batch, proxy_steps = search.batch, search.steps
    if proxy_spec.widths.head_dim != search.model.widths.head_dim:
        raise ConfigError("proxy and target must share head_dim")
    base = search.base
    for k, v in selected.items():
        base = apply_hp(base, k, v)
    target_spec = search.model.at_width(target.n)
    plan = make_plan(build_graph(target_spec), target_spec.widths, base, scheme)
    cost = cost_ratio(
        CostInputs(
            R=n_trials,
            S_proxy=param_count(proxy_spec),
            S_target=param_count(target_spec),
            B_proxy=proxy_batch,
            T_proxy=proxy_steps,
            B_target=target.batch,
            T_target=target.steps,
        )
    )
    result = None
    if train_target:
        with np.errstate(all="ignore"):
            result = train_run(
                target_spec, plan, target.steps, target.batch, seed, hps=base, task=search.task, dtype=DTYPES[search.dtype]
            )
    return TransferResult(base, selected, target_spec, plan, result, n_trials, cost)
