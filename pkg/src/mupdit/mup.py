"""abc-parameterization tables and the width-ratio plan resolver.

Each weight is ``W = mult * W~`` with ``W~ ~ N(0, std**2)`` trained at ``lr``.
Under SP and muP the exponents (a, b, c) come from :data:`ABC_TABLE`; in
practice the raw width ``n`` is replaced by ``n / n_base`` wherever the two
schemes disagree, so that a muP model at ``n == n_base`` is the SP model.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError


class WeightRole(str, enum.Enum):
    INPUT = "input"
    HIDDEN = "hidden"
    OUTPUT = "output"
    SCALAR = "scalar"


class Scheme(str, enum.Enum):
    SP = "sp"
    MUP = "mup"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, Scheme):
            return value
        v = str(value).lower().replace("μ", "mu")
        if v in ("mup", "mu", "mu_p"):
            return cls.MUP
        if v in ("sp", "standard"):
            return cls.SP
        raise ConfigError(f"unknown scheme {value!r}")


def classify_role(fan_in_widthlike: bool, fan_out_widthlike: bool) -> WeightRole:
    """Weight type from whether fan-in / fan-out grow with width."""
    if fan_in_widthlike:
        return WeightRole.HIDDEN if fan_out_widthlike else WeightRole.OUTPUT
    return WeightRole.INPUT if fan_out_widthlike else WeightRole.SCALAR


F = Fraction
# (role, scheme) -> (a, b, c)
ABC_TABLE: dict[tuple[WeightRole, Scheme], tuple[Fraction, Fraction, Fraction]] = {
    (WeightRole.INPUT, Scheme.MUP): (F(0), F(0), F(0)),
    (WeightRole.INPUT, Scheme.SP): (F(0), F(0), F(0)),
    (WeightRole.HIDDEN, Scheme.MUP): (F(0), F(1, 2), F(1)),
    (WeightRole.HIDDEN, Scheme.SP): (F(0), F(1, 2), F(0)),
    (WeightRole.OUTPUT, Scheme.MUP): (F(1), F(0), F(0)),
    (WeightRole.OUTPUT, Scheme.SP): (F(0), F(1, 2), F(0)),
    (WeightRole.SCALAR, Scheme.MUP): (F(0), F(0), F(0)),
    (WeightRole.SCALAR, Scheme.SP): (F(0), F(0), F(0)),
}


def abc_lookup(role: WeightRole, scheme: Scheme) -> tuple[Fraction, Fraction, Fraction]:
    return ABC_TABLE[(WeightRole(role), Scheme.parse(scheme))]


@dataclass(frozen=True)
class WidthSpec:
    n_base: int
    n: int
    head_dim: int

    def __post_init__(self):
        for k in ("n_base", "n", "head_dim"):
            v = getattr(self, k)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{k} must be a positive integer, got {v!r}")
        if self.n % self.head_dim or self.n_base % self.head_dim:
            raise ConfigError(f"widths {self.n_base}/{self.n} must be multiples of head_dim {self.head_dim}")

    @property
    def n_heads(self) -> int:
        return self.n // self.head_dim

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.n, self.n_base)

    def with_width(self, n: int) -> "WidthSpec":
        return WidthSpec(self.n_base, n, self.head_dim)


@dataclass(frozen=True)
class WeightInfo:
    """One named trainable tensor of a model."""

    name: str
    shape: tuple[int, ...]
    role: WeightRole | None
    fan_in: int
    fan_out: int
    group: str
    init_mean: float = 0.0


@dataclass
class WeightGraph:
    weights: dict[str, WeightInfo] = field(default_factory=dict)
    blocks: dict[str, list[str]] = field(default_factory=dict)

    def add(self, block: str, info: WeightInfo) -> WeightInfo:
        if info.name in self.weights:
            raise ConfigError(f"duplicate weight name {info.name!r}")
        self.weights[info.name] = info
        self.blocks.setdefault(block, []).append(info.name)
        return info

    def __iter__(self):
        return iter(self.weights.values())

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, name: str) -> WeightInfo:
        return self.weights[name]

    def names(self) -> list[str]:
        return list(self.weights)


@dataclass(frozen=True)
class GroupHPs:
    eta: float = 2.0**-10
    sigma: float = 1.0
    phi: float = 1.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be nonnegative, got {self.sigma}")


# Default per-group base HPs. Biases, adaLN maps and output layers start at zero;
# gains start at one (init_mean) with no noise.
DEFAULT_GROUPS: dict[str, GroupHPs] = {
    "input": GroupHPs(sigma=0.5),
    "hidden": GroupHPs(sigma=1.0),
    "adaln": GroupHPs(sigma=0.0),
    "output": GroupHPs(sigma=1.0),
    "bias": GroupHPs(sigma=0.0),
    "gain": GroupHPs(sigma=0.0),
    "table": GroupHPs(sigma=0.5),
}


@dataclass(frozen=True)
class BaseHPs:
    """Width-independent hyperparameters.

    ``eta`` is the shared base learning rate; a group may override it through
    ``groups``. ``sigma_out`` is the muP output-layer init std (0 by default).
    """

    eta: float = 2.0**-10
    groups: Mapping[str, GroupHPs] = field(default_factory=lambda: dict(DEFAULT_GROUPS))
    sigma_out: float = 0.0
    grad_clip: float | None = 1.0
    warmup_steps: int = 0
    weight_decay: float = 0.0
    loss_weights: Mapping[str, float] = field(default_factory=dict)
    eta_overrides: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.sigma_out < 0:
            raise ConfigError("sigma_out must be nonnegative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or None")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_steps and weight_decay must be nonnegative")

    def group(self, name: str) -> GroupHPs:
        g = self.groups.get(name) or DEFAULT_GROUPS.get(name) or GroupHPs()
        eta = self.eta_overrides.get(name, self.eta)
        return GroupHPs(eta=eta, sigma=g.sigma, phi=g.phi)

    def replace(self, **kw) -> "BaseHPs":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return BaseHPs(**d)

    def global_hps(self) -> dict:
        """The knobs that must stay identical at every width."""
        return {
            "grad_clip": self.grad_clip,
            "warmup_steps": self.warmup_steps,
            "weight_decay": self.weight_decay,
            "loss_weights": dict(sorted(self.loss_weights.items())),
        }

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "sigma_out": self.sigma_out,
            "groups": {k: {"eta": v.eta, "sigma": v.sigma, "phi": v.phi} for k, v in sorted(self.groups.items())},
            "eta_overrides": dict(sorted(self.eta_overrides.items())),
            **self.global_hps(),
        }


@dataclass(frozen=True)
class PlanEntry:
    multiplier: float
    init_std: float
    lr: float
    role: WeightRole
    init_mean: float = 0.0


class ParamPlan(dict):
    """``name -> PlanEntry`` with JSON (de)serialisation."""

    def to_json(self) -> str:
        doc = {
            k: {"mult": e.multiplier, "std": e.init_std, "lr": e.lr, "role": e.role.value}
            for k, e in sorted(self.items())
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ParamPlan":
        return cls(
            {
                k: PlanEntry(float(v["mult"]), float(v["std"]), float(v["lr"]), WeightRole(v["role"]))
                for k, v in json.loads(text).items()
            }
        )

    def lrs(self) -> dict[str, float]:
        return {k: e.lr for k, e in self.items()}


def make_plan(graph: WeightGraph | Iterable[WeightInfo], widths: WidthSpec, base: BaseHPs, scheme) -> ParamPlan:
    """Resolve base HPs at width ``widths.n``.

    Only the entries where muP departs from SP pick up the ratio
    ``r = n / n_base``: hidden lr ``eta / r``, output multiplier ``phi / r`` and
    output init ``sigma_out``.
    """
    scheme = Scheme.parse(scheme)
    r = widths.n / widths.n_base
    plan = ParamPlan()
    for w in graph:
        if w.role is None:
            raise ConfigError(f"weight {w.name!r} has no role assigned")
        hp = base.group(w.group)
        role = WeightRole(w.role)
        if role is WeightRole.HIDDEN:
            mult, std = hp.phi, hp.sigma / math.sqrt(w.fan_in)
            lr = hp.eta / r if scheme is Scheme.MUP else hp.eta
        elif role is WeightRole.OUTPUT:
            if scheme is Scheme.MUP:
                mult, std, lr = hp.phi / r, base.sigma_out, hp.eta
            else:
                mult, std, lr = hp.phi, hp.sigma / math.sqrt(w.fan_in), hp.eta
        else:
            mult, std, lr = hp.phi, hp.sigma, hp.eta
        plan[w.name] = PlanEntry(mult, std, lr, role, w.init_mean)
    return plan


# ---------------------------------------------------------------------------
# tuning cost


@dataclass(frozen=True)
class CostInputs:
    """Proxy/target sizes. Give either (B, T) pairs or epoch counts E."""

    R: float
    S_proxy: float
    S_target: float
    B_proxy: float | None = None
    T_proxy: float | None = None
    B_target: float | None = None
    T_target: float | None = None
    E_proxy: float | None = None
    E_target: float | None = None


def _q(v) -> Fraction:
    # decimal literals such as 0.18 are meant exactly
    return v if isinstance(v, Fraction) else Fraction(str(v))


def cost_ratio(c: CostInputs) -> float:
    """Tuning FLOPs over one target pretraining run, in exact rational arithmetic."""
    vals = [v for v in vars(c).values() if v is not None]
    if any(v <= 0 for v in vals):
        raise ConfigError("cost inputs must be positive")
    if c.E_proxy is not None and c.E_target is not None:
        num = _q(c.R) * _q(c.S_proxy) * _q(c.E_proxy)
        den = _q(c.S_target) * _q(c.E_target)
    elif None not in (c.B_proxy, c.T_proxy, c.B_target, c.T_target):
        num = _q(c.R) * _q(c.S_proxy) * _q(c.B_proxy) * _q(c.T_proxy)
        den = _q(c.S_target) * _q(c.B_target) * _q(c.T_target)
    else:
        raise ConfigError("cost_ratio needs either both epoch counts or all batch/iteration sizes")
    return float(num / den)


def cost_ratio_phases(phases: Sequence[tuple[float, float, float]], target: tuple[float, float]) -> float:
    """Sum of ``R * S * work`` over search phases, divided by ``S * work`` of the target.

    ``work`` is whatever per-run data volume the caller uses consistently
    (epochs, steps, or batch*steps).
    """
    s_t, w_t = target
    if s_t <= 0 or w_t <= 0:
        raise ConfigError("target size and work must be positive")
    if not phases:
        raise ConfigError("at least one search phase is required")
    total = Fraction(0)
    for R, S, work in phases:
        if R <= 0 or S <= 0 or work <= 0:
            raise ConfigError("phase entries must be positive")
        total += _q(R) * _q(S) * _q(work)
    return float(total / (_q(s_t) * _q(w_t)))
