"""A finite-width interpreter for tensor-program instructions.

Values are scalars or length-``n`` vectors; matrices appear only as bindings
consumed by ``MatMul``. The four instruction kinds are

* ``Avg(x)``: the scalar ``(1/n) sum_a x_a``;
* ``MatMul(W, x, transposed)``: ``W x`` (or ``W.T x``);
* ``OuterNonlin(psi, X, c, r)``:
  ``y_a = n^-r sum_{b_1..b_r} psi(X_a; X_{b_1}; ...; X_{b_r}; c)``;
* ``ScalarFn(psi, c)``: a scalar function of scalars.

Nonlinearities are looked up by name in :data:`PSI_CATALOG` so programs
serialise to plain JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np
from scipy.special import expit

from .errors import ProgramError, ShapeError

# ---------------------------------------------------------------------------
# nonlinearity catalogue
#
# OuterNonlin functions receive ``slots`` (r + 1 arrays of shape (..., k), one
# per summed index, the first being the free index alpha), the scalar vector
# ``c`` and keyword params. They return an array of shape (...).

PsiFn = Callable[..., np.ndarray]


def _col(slots, i=0, slot=0):
    return slots[slot][..., i]


def _silu(x):
    return x * expit(x)


def _gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x * x * x)))


PSI_CATALOG: dict[str, PsiFn] = {
    # w_a * c_0: a width-n weight vector applied to a scalar input
    "scale_by_scalar": lambda s, c: _col(s) * c[0],
    "add": lambda s, c: np.sum(s[0], axis=-1),
    "mul": lambda s, c: np.prod(s[0], axis=-1),
    "silu": lambda s, c: _silu(_col(s)),
    "gelu": lambda s, c: _gelu(_col(s)),
    "sq_dev": lambda s, c: (_col(s) - c[0]) ** 2,
    # scalars [E, V, eps]; eps defaults to 0 when omitted
    "layer_norm": lambda s, c: (_col(s) - c[0]) / np.sqrt(c[1] + (c[2] if len(c) > 2 else 0.0)),
    # [x, beta, gamma] -> gamma * x + beta
    "modulate": lambda s, c: _col(s, 2) * _col(s, 0) + _col(s, 1),
    # [a, theta, x] -> x + theta * a
    "gated_residual": lambda s, c: _col(s, 2) + _col(s, 1) * _col(s, 0),
    # [a, b] -> a b / |a|
    "qk_norm": lambda s, c: _col(s, 0) * _col(s, 1) / np.abs(_col(s, 0)),
    # [a, b, c, d, e] -> a b c + a d e
    "joint_attn": lambda s, c: _col(s, 0) * (_col(s, 1) * _col(s, 2) + _col(s, 3) * _col(s, 4)),
    # r = 1 product of the free and summed coordinates
    "outer_mul": lambda s, c: _col(s, 0, 0) * _col(s, 0, 1),
}

SCALAR_CATALOG: dict[str, Callable[..., float]] = {
    "sin": lambda c: math.sin(c[0]),
    "identity": lambda c: float(c[0]),
    "sum": lambda c: float(sum(c)),
}


# ---------------------------------------------------------------------------
# instructions


@dataclass(frozen=True)
class Avg:
    out: str
    x: str


@dataclass(frozen=True)
class MatMul:
    out: str
    W: str
    x: str
    transposed: bool = False


@dataclass(frozen=True)
class OuterNonlin:
    out: str
    psi: str
    X: tuple[str, ...]
    c: tuple[str, ...] = ()
    r: int = 0
    params: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class ScalarFn:
    out: str
    psi: str
    c: tuple[str, ...]


Instruction = Union[Avg, MatMul, OuterNonlin, ScalarFn]
_KINDS = {"Avg": Avg, "MatMul": MatMul, "OuterNonlin": OuterNonlin, "ScalarFn": ScalarFn}


@dataclass
class TPValue:
    kind: str  # "scalar" or "vector"
    value: Union[float, np.ndarray]


@dataclass
class TPProgram:
    instructions: list[Instruction] = field(default_factory=list)
    output: str | None = None

    def add(self, ins: Instruction) -> str:
        self.instructions.append(ins)
        return ins.out

    # small builders used by the program constructors
    def avg(self, out, x):
        return self.add(Avg(out, x))

    def matmul(self, out, W, x, transposed=False):
        return self.add(MatMul(out, W, x, transposed))

    def outer(self, out, psi, X, c=(), r=0, **params):
        return self.add(OuterNonlin(out, psi, tuple(X), tuple(c), r, tuple(sorted(params.items()))))

    def scalar_fn(self, out, psi, c):
        return self.add(ScalarFn(out, psi, tuple(c)))

    def census(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for ins in self.instructions:
            k = type(ins).__name__
            counts[k] = counts.get(k, 0) + 1
        return counts

    def free_names(self) -> set[str]:
        """Names read before (or without) being defined by an instruction."""
        defined: set[str] = set()
        free: set[str] = set()
        for ins in self.instructions:
            for name in _reads(ins):
                if name not in defined:
                    free.add(name)
            defined.add(ins.out)
        return free

    def to_json(self) -> str:
        doc = {
            "output": self.output,
            "instructions": [{"op": type(i).__name__, **_ins_fields(i)} for i in self.instructions],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TPProgram":
        doc = json.loads(text)
        prog = cls(output=doc.get("output"))
        for d in doc["instructions"]:
            d = dict(d)
            kind = _KINDS.get(d.pop("op", None))
            if kind is None:
                raise ProgramError("unknown instruction kind")
            for k in ("X", "c"):
                if k in d:
                    d[k] = tuple(d[k])
            if "params" in d:
                d["params"] = tuple((str(a), float(b)) for a, b in d["params"])
            prog.add(kind(**d))
        return prog


def _ins_fields(ins: Instruction) -> dict:
    d = dict(vars(ins))
    for k in ("X", "c"):
        if k in d:
            d[k] = list(d[k])
    if "params" in d:
        d["params"] = [list(p) for p in d["params"]]
    return d


def _reads(ins: Instruction) -> list[str]:
    if isinstance(ins, Avg):
        return [ins.x]
    if isinstance(ins, MatMul):
        return [ins.W, ins.x]
    if isinstance(ins, OuterNonlin):
        return list(ins.X) + list(ins.c)
    return list(ins.c)


# ---------------------------------------------------------------------------
# interpreter


def _outer_nonlin(psi: PsiFn, X: np.ndarray, c: np.ndarray, r: int, n: int, params: dict) -> np.ndarray:
    """Evaluate ``n^-r sum_{b_1..b_r} psi(X_a; X_b1; ...; c)`` for every ``a``."""
    if r == 0:
        return np.asarray(psi([X], c, **params), dtype=np.float64)
    slots = []
    for i in range(r + 1):
        shape = [1] * (r + 1) + [X.shape[1]]
        shape[i] = n
        slots.append(X.reshape(shape))
    full = np.broadcast_shapes(*(s.shape[:-1] for s in slots))
    vals = np.broadcast_to(np.asarray(psi(slots, c, **params), dtype=np.float64), full)
    return vals.reshape(n, -1).sum(axis=1) / float(n) ** r


def run(program: TPProgram, n: int, bindings: Mapping[str, object]) -> dict[str, object]:
    """Execute ``program`` at width ``n``; returns every defined value.

    Bindings may be floats (scalars), length-``n`` vectors or ``n x n``
    matrices.
    """
    if n < 1:
        raise ShapeError("width must be positive")
    env: dict[str, object] = {}
    for k, v in bindings.items():
        a = np.asarray(v, dtype=np.float64)
        if a.ndim == 0:
            env[k] = float(a)
        elif a.ndim == 1:
            if a.shape[0] != n:
                raise ShapeError(f"vector {k!r} has length {a.shape[0]}, expected {n}")
            env[k] = a
        elif a.ndim == 2:
            if a.shape != (n, n):
                raise ShapeError(f"matrix {k!r} has shape {a.shape}, expected {(n, n)}")
            env[k] = a
        else:
            raise ShapeError(f"binding {k!r} has unsupported rank {a.ndim}")

    def get(name: str, want: str):
        if name not in env:
            raise ProgramError(f"undefined reference {name!r}")
        v = env[name]
        kind = "scalar" if isinstance(v, float) else ("matrix" if np.ndim(v) == 2 else "vector")
        if kind != want:
            raise ShapeError(f"{name!r} is a {kind}, expected a {want}")
        return v

    for ins in program.instructions:
        if isinstance(ins, Avg):
            env[ins.out] = float(np.mean(get(ins.x, "vector")))
        elif isinstance(ins, MatMul):
            W = get(ins.W, "matrix")
            x = get(ins.x, "vector")
            env[ins.out] = (W.T if ins.transposed else W) @ x
        elif isinstance(ins, OuterNonlin):
            psi = PSI_CATALOG.get(ins.psi)
            if psi is None:
                raise ProgramError(f"unknown nonlinearity {ins.psi!r}")
            if ins.r < 0:
                raise ProgramError("OuterNonlin order must be nonnegative")
            X = np.stack([get(x, "vector") for x in ins.X], axis=1)
            c = np.array([get(s, "scalar") for s in ins.c], dtype=np.float64)
            env[ins.out] = _outer_nonlin(psi, X, c, ins.r, n, dict(ins.params))
        elif isinstance(ins, ScalarFn):
            fn = SCALAR_CATALOG.get(ins.psi)
            if fn is None:
                raise ProgramError(f"unknown scalar function {ins.psi!r}")
            env[ins.out] = float(fn([get(s, "scalar") for s in ins.c]))
        else:
            raise ProgramError(f"unknown instruction {ins!r}")
    return env


# ---------------------------------------------------------------------------
# DiT construction

DIT_MODS = ("theta_attn", "beta_attn", "gamma_attn", "theta_mlp", "beta_mlp", "gamma_mlp")


def _layer_norm(p: TPProgram, x: str, tag: str) -> str:
    e = p.avg(f"E[{tag}]", x)
    d = p.outer(f"dev2[{tag}]", "sq_dev", [x], [e])
    v = p.avg(f"V[{tag}]", d)
    return p.outer(f"{tag}_norm", "layer_norm", [x], [e, v, "eps"])


def build_dit_program() -> TPProgram:
    """Single-block DiT forward with every constant dimension equal to one.

    Free names: scalars ``x``, ``t``, ``y``, ``eps``; vectors ``w_cnn``,
    ``x_pos``, ``w_t1``, ``w_y``, ``w_final``; matrices ``W_t2``,
    ``W_<mod>`` for each adaLN output, ``W_K``, ``W_Q``, ``W_V``, ``W_1``,
    ``W_2``, ``W_beta_final``, ``W_gamma_final``. Matrices act as ``W x``.
    """
    p = TPProgram()
    # input latent: one-layer CNN then fixed positional embedding
    p.outer("x_cnn", "scale_by_scalar", ["w_cnn"], ["x"])
    p.outer("x_embed", "add", ["x_cnn", "x_pos"])
    # timestep: frequency feature then two-layer SiLU MLP
    p.scalar_fn("t_freq", "sin", ["t"])
    p.outer("t1", "scale_by_scalar", ["w_t1"], ["t_freq"])
    p.outer("h1", "silu", ["t1"])
    p.matmul("t_embed", "W_t2", "h1")
    # label and condition merge
    p.outer("y_embed", "scale_by_scalar", ["w_y"], ["y"])
    p.outer("c", "add", ["t_embed", "y_embed"])
    # adaLN
    p.outer("c_act", "silu", ["c"])
    for m in DIT_MODS:
        p.matmul(m, f"W_{m}", "c_act")
    # attention branch
    xn = _layer_norm(p, "x_embed", "x")
    p.outer("x_mod", "modulate", [xn, "beta_attn", "gamma_attn"])
    for m in ("K", "Q", "V"):
        p.matmul(m.lower(), f"W_{m}", "x_mod")
    p.outer("x_attn", "mul", ["k", "q", "v"])
    p.outer("h", "gated_residual", ["x_attn", "theta_attn", "x_embed"])
    # MLP branch
    hn = _layer_norm(p, "h", "h")
    p.outer("h_mod", "modulate", [hn, "beta_mlp", "gamma_mlp"])
    p.matmul("h_fc1", "W_1", "h_mod")
    p.outer("h_act", "gelu", ["h_fc1"])
    p.matmul("h_mlp", "W_2", "h_act")
    p.outer("h_block", "gated_residual", ["h_mlp", "theta_mlp", "h"])
    # final layer
    p.matmul("beta_final", "W_beta_final", "c_act")
    p.matmul("gamma_final", "W_gamma_final", "c_act")
    zn = _layer_norm(p, "h_block", "z")
    p.outer("z_mod", "modulate", [zn, "beta_final", "gamma_final"])
    p.outer("z_final_coords", "mul", ["w_final", "z_mod"])
    p.output = p.avg("z_final", "z_final_coords")
    return p


# ---------------------------------------------------------------------------
# equivalence with the direct forward

# program matrix name -> direct-model weight name
_DIT_MATRICES = {
    "W_t2": "t_embed.fc2.w",
    "W_theta_attn": "blocks.0.adaln.gate_msa.w",
    "W_beta_attn": "blocks.0.adaln.shift_msa.w",
    "W_gamma_attn": "blocks.0.adaln.scale_msa.w",
    "W_theta_mlp": "blocks.0.adaln.gate_mlp.w",
    "W_beta_mlp": "blocks.0.adaln.shift_mlp.w",
    "W_gamma_mlp": "blocks.0.adaln.scale_mlp.w",
    "W_K": "blocks.0.attn.k.w",
    "W_Q": "blocks.0.attn.q.w",
    "W_V": "blocks.0.attn.v.w",
    "W_1": "blocks.0.mlp.fc1.w",
    "W_2": "blocks.0.mlp.fc2.w",
    "W_beta_final": "final.adaln.shift.w",
    "W_gamma_final": "final.adaln.scale.w",
}


def simplified_dit_spec(n: int, ln_eps: float = 1e-6):
    """The direct-model configuration matching :func:`build_dit_program`."""
    from .arch import ModelSpec, PatchSpec
    from .mup import WidthSpec

    return ModelSpec(
        "dit",
        WidthSpec(1, n, 1),
        depth=1,
        patch=PatchSpec(1, 1, 1),
        num_classes=1,
        mlp_ratio=1.0,
        freq_dim=1,
        bias=False,
        scale_offset=0.0,
        attention="product",
        ln_eps=ln_eps,
    )


def random_dit_bindings(n: int, seed: int, ln_eps: float = 1e-6) -> dict[str, object]:
    """Random program bindings; matrices have entries of variance ``1/n``."""
    from .arch import pos_embed_2d
    from .autodiff import SeededRng

    rng = SeededRng(seed, f"tp/{n}").generator
    b: dict[str, object] = {
        "x": float(rng.standard_normal()),
        "t": float(rng.uniform(0, 1000)),
        "y": 1.0,
        "eps": float(ln_eps),
        "x_pos": pos_embed_2d(n, 1)[0],
    }
    for v in ("w_cnn", "w_t1", "w_y", "w_final"):
        b[v] = rng.standard_normal(n)
    for m in _DIT_MATRICES:
        b[m] = rng.standard_normal((n, n)) / math.sqrt(n)
    return b


def direct_dit_forward(n: int, bindings: Mapping[str, object], ln_eps: float = 1e-6) -> float:
    """Evaluate the simplified DiT through the ordinary model code.

    The muP plan at ``n_base = 1`` supplies the ``1/n`` output multiplier that
    turns the final projection into an average. The attention output
    projection, absent from the program, is bound to the identity.
    """
    from .arch import Batch, DiffusionTransformer
    from .autodiff import Tensor
    from .mup import BaseHPs, Scheme, make_plan

    spec = simplified_dit_spec(n, ln_eps)
    model = DiffusionTransformer(spec)
    plan = make_plan(model.graph, spec.widths, BaseHPs(), Scheme.MUP)
    params = {
        "x_embed.w": np.asarray(bindings["w_cnn"]).reshape(1, n),
        "t_embed.fc1.w": np.asarray(bindings["w_t1"]).reshape(1, n),
        "y_embed.table": np.asarray(bindings["w_y"]).reshape(1, n) * float(bindings["y"]),
        "final.proj.w": np.asarray(bindings["w_final"]).reshape(n, 1),
        "blocks.0.attn.o.w": np.eye(n),
    }
    for prog_name, model_name in _DIT_MATRICES.items():
        # the model applies x @ W, the program W x
        params[model_name] = np.asarray(bindings[prog_name]).T
    tensors = {k: Tensor(np.array(v, dtype=np.float64)) for k, v in params.items()}
    pos = np.asarray(bindings["x_pos"])
    if not np.array_equal(pos, model._pos[0]):
        raise ProgramError("positional binding differs from the model's fixed table")
    batch = Batch(
        x=np.full((1, 1, 1, 1), float(bindings["x"])),
        t=np.array([float(bindings["t"])]),
        y=np.zeros(1, dtype=np.int64),
    )
    out = model.forward(tensors, plan, batch)
    return float(out.data.reshape(-1)[0])


def equivalence_check(
    program: TPProgram | None = None,
    direct_forward: Callable[[int, Mapping[str, object]], float] | None = None,
    widths: Sequence[int] = (4, 16, 64),
    seeds: Sequence[int] = tuple(range(10)),
    bindings_fn: Callable[[int, int], dict] | None = None,
) -> float:
    """Max absolute difference between program output and direct forward."""
    program = program or build_dit_program()
    direct_forward = direct_forward or direct_dit_forward
    bindings_fn = bindings_fn or random_dit_bindings
    worst = 0.0
    for n in widths:
        for s in seeds:
            b = bindings_fn(n, s)
            tp_out = run(program, n, b)[program.output]
            worst = max(worst, abs(tp_out - direct_forward(n, b)))
    return worst
