"""TOML experiment configuration.

A config is a TOML document with the tables below; every key is optional
and unknown keys are rejected.

.. code-block:: toml

    [model]        # variant, n, head_dim, depth, image_side, patch_side, channels,
                   # num_classes, text_tokens, text_dim, mlp_ratio, freq_dim, bias,
                   # scale_offset, attention
    [mup]          # scheme ("mup" | "sp"), n_base, sigma_out_zero
    [base_hps]     # eta, sigma_out, grad_clip, warmup_steps, weight_decay,
                   # loss_weights = {aux = w}, groups.<name> = {eta, sigma, phi}
    [task]         # schedule ("ddpm" | "fm"), beta_start, beta_end, num_steps,
                   # data_seed, divergence_factor, smoothing
    [run]          # steps, batch, seeds, precision (32 | 64), workers
    [sweep]        # axis, points, hp, values | log2_values, tolerance
    [search]       # n_trials, seed, ranges.<hp> = {lo, hi, scale}
    [transfer]     # target_n, target_batch, target_steps, source ("sweep" | "search")
    [coordcheck]   # widths, steps, C, eta, seeds, batch
    [cost]         # R, S_proxy, S_target, B_proxy, T_proxy, B_target, T_target,
                   # E_proxy, E_target, or phases = [[R, S, work], ...], target = [S, work]
    [output]       # dir

The config hash is computed over the canonical (sorted, fully resolved) form,
so key order and omitted defaults do not change it.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .arch import ModelSpec, PatchSpec
from .diffusion import NoiseSchedule, TaskSpec, config_hash
from .errors import ConfigError
from .mup import DEFAULT_GROUPS, BaseHPs, CostInputs, GroupHPs, Scheme, WidthSpec
from .transfer import GridSpec, HPRange, SearchSpec

MODEL_KEYS = {
    "variant": str,
    "n": int,
    "head_dim": int,
    "depth": int,
    "image_side": int,
    "patch_side": int,
    "channels": int,
    "num_classes": int,
    "text_tokens": int,
    "text_dim": int,
    "mlp_ratio": float,
    "freq_dim": int,
    "bias": bool,
    "scale_offset": float,
    "attention": str,
}
MUP_KEYS = {"scheme": str, "n_base": int, "sigma_out_zero": bool}
BASE_KEYS = {
    "eta": float,
    "sigma_out": float,
    "grad_clip": float,
    "warmup_steps": int,
    "weight_decay": float,
    "loss_weights": dict,
    "groups": dict,
}
GROUP_KEYS = {"eta": float, "sigma": float, "phi": float}
TASK_KEYS = {
    "schedule": str,
    "beta_start": float,
    "beta_end": float,
    "num_steps": int,
    "data_seed": int,
    "divergence_factor": float,
    "smoothing": float,
}
RUN_KEYS = {"steps": int, "batch": int, "seeds": list, "precision": int, "workers": int}
SWEEP_KEYS = {"axis": str, "points": list, "hp": str, "values": list, "log2_values": list, "tolerance": int}
SEARCH_KEYS = {"n_trials": int, "seed": int, "ranges": dict}
RANGE_KEYS = {"lo": float, "hi": float, "scale": str}
TRANSFER_KEYS = {"target_n": int, "target_batch": int, "target_steps": int, "source": str}
COORD_KEYS = {"widths": list, "steps": int, "C": float, "eta": float, "seeds": list, "batch": int}
COST_KEYS = {
    "R": float,
    "S_proxy": float,
    "S_target": float,
    "B_proxy": float,
    "T_proxy": float,
    "B_target": float,
    "T_target": float,
    "E_proxy": float,
    "E_target": float,
    "phases": list,
    "target": list,
}
OUTPUT_KEYS = {"dir": str}
SECTIONS = {
    "model": MODEL_KEYS,
    "mup": MUP_KEYS,
    "base_hps": BASE_KEYS,
    "task": TASK_KEYS,
    "run": RUN_KEYS,
    "sweep": SWEEP_KEYS,
    "search": SEARCH_KEYS,
    "transfer": TRANSFER_KEYS,
    "coordcheck": COORD_KEYS,
    "cost": COST_KEYS,
    "output": OUTPUT_KEYS,
}


def _check(table: Mapping, allowed: Mapping[str, type], where: str) -> dict:
    if not isinstance(table, Mapping):
        raise ConfigError(f"[{where}] must be a table")
    out = {}
    for k, v in table.items():
        if k not in allowed:
            raise ConfigError(f"unknown key {where}.{k}")
        want = allowed[k]
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if want is int and isinstance(v, bool) or not isinstance(v, want):
            raise ConfigError(f"{where}.{k} must be of type {want.__name__}")
        out[k] = v
    return out


def _num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where} must be numeric")
    return float(v)


@dataclass
class ExperimentConfig:
    doc: dict
    source: str | None = None

    @classmethod
    def from_toml(cls, text: str, source: str | None = None) -> "ExperimentConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML: {e}") from None
        return cls.from_dict(raw, source)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e}") from None
        return cls.from_toml(text, str(p))

    @classmethod
    def from_dict(cls, raw: Mapping, source: str | None = None) -> "ExperimentConfig":
        doc: dict[str, Any] = {}
        for section, table in raw.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            doc[section] = _check(table, SECTIONS[section], section)
        base = doc.get("base_hps", {})
        for name, g in base.get("groups", {}).items():
            base["groups"][name] = _check(g, GROUP_KEYS, f"base_hps.groups.{name}")
        for name, w in base.get("loss_weights", {}).items():
            _num(w, f"base_hps.loss_weights.{name}")
        for name, r in doc.get("search", {}).get("ranges", {}).items():
            doc["search"]["ranges"][name] = _check(r, RANGE_KEYS, f"search.ranges.{name}")
        cfg = cls(doc, source)
        cfg.model_spec()
        cfg.base_hps()
        cfg.task_spec()
        cfg.scheme
        cfg.run
        cfg.precision
        return cfg

    def section(self, name: str) -> dict:
        return dict(self.doc.get(name, {}))

    # -- resolved objects --------------------------------------------------

    def model_spec(self, n: int | None = None) -> ModelSpec:
        m = self.section("model")
        mup = self.section("mup")
        n_base = mup.get("n_base", m.get("n", 32))
        width = n if n is not None else m.get("n", n_base)
        head_dim = m.get("head_dim", 8)
        patch = PatchSpec(m.get("image_side", 8), m.get("patch_side", 4), m.get("channels", 1))
        kw = {k: m[k] for k in ("depth", "num_classes", "text_tokens", "text_dim", "mlp_ratio", "freq_dim", "bias", "scale_offset", "attention") if k in m}
        return ModelSpec(m.get("variant", "dit"), WidthSpec(n_base, width, head_dim), patch=patch, **kw)

    @property
    def scheme(self) -> Scheme:
        return Scheme.parse(self.section("mup").get("scheme", "mup"))

    def base_hps(self) -> BaseHPs:
        b = self.section("base_hps")
        groups = dict(DEFAULT_GROUPS)
        for name, g in b.get("groups", {}).items():
            d = DEFAULT_GROUPS.get(name, GroupHPs())
            groups[name] = GroupHPs(eta=g.get("eta", d.eta), sigma=g.get("sigma", d.sigma), phi=g.get("phi", d.phi))
        overrides = {name: g["eta"] for name, g in b.get("groups", {}).items() if "eta" in g}
        if "sigma_out" in b:
            sigma_out = b["sigma_out"]
        elif self.section("mup").get("sigma_out_zero", True):
            sigma_out = 0.0
        else:
            # matches the SP output init at the base width
            n_base = self.model_spec().widths.n_base
            sigma_out = groups["output"].sigma / n_base**0.5
        grad_clip = b.get("grad_clip", 1.0)
        return BaseHPs(
            eta=b.get("eta", 2.0**-10),
            groups=groups,
            sigma_out=sigma_out,
            grad_clip=None if grad_clip == 0 else grad_clip,
            warmup_steps=b.get("warmup_steps", 0),
            weight_decay=b.get("weight_decay", 0.0),
            loss_weights={k: float(v) for k, v in b.get("loss_weights", {}).items()},
            eta_overrides=overrides,
        )

    def task_spec(self) -> TaskSpec:
        t = self.section("task")
        sched = NoiseSchedule(
            kind=t.get("schedule", "ddpm"),
            beta_start=t.get("beta_start", 1e-4),
            beta_end=t.get("beta_end", 2e-2),
            num_steps=t.get("num_steps", 1000),
        )
        return TaskSpec(
            schedule=sched,
            data_seed=t.get("data_seed", 0),
            num_classes=self.model_spec().num_classes,
            divergence_factor=t.get("divergence_factor", 10.0),
            smoothing=t.get("smoothing", 0.1),
        )

    @property
    def run(self) -> dict:
        r = self.section("run")
        seeds = r.get("seeds", [0])
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("run.seeds must be a non-empty list of integers")
        return {
            "steps": r.get("steps", 2000),
            "batch": r.get("batch", 64),
            "seeds": tuple(seeds),
            "workers": r.get("workers"),
        }

    @property
    def precision(self) -> int:
        p = self.section("run").get("precision", 32)
        if p not in (32, 64):
            raise ConfigError("run.precision must be 32 or 64")
        return p

    @property
    def dtype_name(self) -> str:
        return f"float{self.precision}"

    def grid_spec(self) -> GridSpec:
        s = self.section("sweep")
        if not s:
            raise ConfigError("config has no [sweep] table")
        if "values" in s and "log2_values" in s:
            raise ConfigError("give sweep.values or sweep.log2_values, not both")
        if "log2_values" in s:
            values = [2.0 ** _num(v, "sweep.log2_values") for v in s["log2_values"]]
        else:
            values = [_num(v, "sweep.values") for v in s.get("values", [])]
        run = self.run
        return GridSpec(
            axis=s.get("axis", "width"),
            points=tuple(int(_num(p, "sweep.points")) for p in s.get("points", [])),
            hp_name=s.get("hp", "eta"),
            hp_values=tuple(values),
            model=self.model_spec(),
            base=self.base_hps(),
            seeds=run["seeds"],
            batch=run["batch"],
            steps=run["steps"],
            task=self.task_spec(),
            dtype=self.dtype_name,
            tolerance=s.get("tolerance", 1),
        )

    def search_spec(self) -> SearchSpec:
        s = self.section("search")
        if not s:
            raise ConfigError("config has no [search] table")
        ranges = {
            name: HPRange(_num(r.get("lo"), f"{name}.lo"), _num(r.get("hi"), f"{name}.hi"), r.get("scale", "log"))
            for name, r in s.get("ranges", {}).items()
        }
        run = self.run
        return SearchSpec(
            n_trials=s.get("n_trials", 16),
            ranges=ranges,
            model=self.model_spec(),
            base=self.base_hps(),
            seeds=run["seeds"][:1],
            batch=run["batch"],
            steps=run["steps"],
            task=self.task_spec(),
            dtype=self.dtype_name,
        )

    def cost_inputs(self) -> CostInputs | tuple[list, tuple]:
        c = self.section("cost")
        if not c:
            raise ConfigError("config has no [cost] table")
        if "phases" in c:
            if "target" not in c or len(c["target"]) != 2:
                raise ConfigError("cost.phases needs cost.target = [S, work]")
            phases = []
            for ph in c["phases"]:
                if not isinstance(ph, list) or len(ph) != 3:
                    raise ConfigError("each cost phase must be [R, S, work]")
                phases.append(tuple(_num(v, "cost.phases") for v in ph))
            return phases, tuple(_num(v, "cost.target") for v in c["target"])
        fields = {f.name for f in dataclasses.fields(CostInputs)}
        missing = {"R", "S_proxy", "S_target"} - set(c)
        if missing:
            raise ConfigError(f"cost table missing {sorted(missing)}")
        return CostInputs(**{k: v for k, v in c.items() if k in fields})

    @property
    def out_dir(self) -> Path:
        return Path(self.section("output").get("dir", "out"))

    # -- hashing -----------------------------------------------------------

    def canonical(self) -> dict:
        """Fully resolved document: defaults filled in, keys sorted."""
        spec = self.model_spec()
        doc = {
            "model": dataclasses.asdict(spec),
            "scheme": self.scheme.value,
            "base_hps": self.base_hps().to_dict(),
            "task": dataclasses.asdict(self.task_spec()),
            "run": {**self.run, "seeds": list(self.run["seeds"]), "precision": self.precision},
        }
        for extra in ("sweep", "search", "transfer", "coordcheck", "cost"):
            if extra in self.doc:
                doc[extra] = self.doc[extra]
        return json.loads(json.dumps(doc, sort_keys=True, default=str))

    @property
    def hash(self) -> str:
        return config_hash(self.canonical())
