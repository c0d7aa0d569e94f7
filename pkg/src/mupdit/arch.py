"""Diffusion-Transformer variants as role-tagged weight graphs.

Four variants share one builder: DiT (adaLN-zero blocks), PixArt-alpha
(adaLN-single plus per-block tables and cross-attention), U-ViT (conditions as
tokens, long skip connections) and MMDiT (two streams, joint attention with
QK-norm). Weights are laid out ``(fan_in, fan_out)`` and applied as ``x @ W``;
every weight is tagged with the role implied by which of its fans grow with
the width ``n``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .mup import ParamPlan, WeightGraph, WeightInfo, WeightRole, WidthSpec, classify_role

VARIANTS = ("dit", "pixart", "uvit", "mmdit")
_ALIASES = {"pixartalpha": "pixart", "pixart-alpha": "pixart", "pixart_alpha": "pixart", "u-vit": "uvit"}


@dataclass(frozen=True)
class PatchSpec:
    image_side: int = 8
    patch_side: int = 2
    channels: int = 1

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ConfigError(f"image side {self.image_side} not divisible by patch side {self.patch_side}")

    @property
    def num_tokens(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side**2 * self.channels


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``attention="product"`` with ``bias=False`` and ``scale_offset=0`` gives the
    simplified forward used by the tensor-program equivalence check; the
    defaults give the practical model.
    """

    variant: str
    widths: WidthSpec
    depth: int = 2
    patch: PatchSpec = field(default_factory=PatchSpec)
    num_classes: int = 4
    text_tokens: int = 4
    text_dim: int = 16
    mlp_ratio: float = 4.0
    freq_dim: int = 16
    bias: bool = True
    scale_offset: float = 1.0
    attention: str = "softmax"
    ln_eps: float = 1e-6
    qk_eps: float = 1e-6

    def __post_init__(self):
        v = _ALIASES.get(self.variant.lower(), self.variant.lower())
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "variant", v)
        if self.depth < 1:
            raise ConfigError("depth must be positive")
        if self.attention not in ("softmax", "product"):
            raise ConfigError(f"unknown attention mode {self.attention!r}")
        if self.mlp_ratio <= 0 or int(round(self.mlp_ratio * self.widths.n)) < 1:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def n(self) -> int:
        return self.widths.n

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.widths.n))

    def at_width(self, n: int) -> "ModelSpec":
        return replace(self, widths=self.widths.with_width(n))


# ---------------------------------------------------------------------------
# fixed (non-trainable) embeddings


def timestep_features(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal timestep features ``[sin(t f_i)..., cos(t f_j)...]``, width independent."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    n_sin, n_cos = (dim + 1) // 2, dim // 2
    half = max(n_sin, 1)
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args[:, :n_sin]), np.cos(args[:, :n_cos])], axis=1)


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / max(dim / 2.0, 1.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def pos_embed_2d(n: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine positional table of shape ``(grid*grid, n)``."""
    gh, gw = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    half = n // 2
    emb = np.concatenate([_sincos_1d(half, gh), _sincos_1d(half, gw)], axis=1)
    if emb.shape[1] < n:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], n - emb.shape[1]))], axis=1)
    return emb


def text_tokens_for(labels: np.ndarray, spec: ModelSpec, seed: int = 1234) -> np.ndarray:
    """Synthetic caption embeddings: a fixed random table keyed by class."""
    rng = np.random.Generator(np.random.PCG64(seed))
    table = rng.standard_normal((spec.num_classes, spec.text_tokens, spec.text_dim))
    return table[np.asarray(labels, dtype=np.int64)]


def patchify(x: np.ndarray, p: PatchSpec) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, tokens, patch_side**2 * C)``."""
    B, C, H, W = x.shape
    if (C, H, W) != (p.channels, p.image_side, p.image_side):
        raise ShapeError(f"image shape {(C, H, W)} does not match patch spec {p}")
    g, s = H // p.patch_side, p.patch_side
    x = x.reshape(B, C, g, s, g, s).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(B, g * g, s * s * C)


def unpatchify(tokens: Tensor, p: PatchSpec) -> Tensor:
    B = tokens.shape[0]
    g, s, C = p.image_side // p.patch_side, p.patch_side, p.channels
    x = ad.reshape(tokens, (B, g, g, s, s, C))
    x = ad.transpose(x, (0, 5, 1, 3, 2, 4))
    return ad.reshape(x, (B, C, p.image_side, p.image_side))


# ---------------------------------------------------------------------------
# graph construction


class _Builder:
    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.graph = WeightGraph()

    def weight(self, block, name, fan_in, fan_out, in_wide, out_wide, group, shape=None, init_mean=0.0):
        role = classify_role(in_wide, out_wide)
        shape = tuple(shape) if shape is not None else (fan_in, fan_out)
        self.graph.add(block, WeightInfo(name, shape, role, fan_in, fan_out, group, init_mean))

    def linear(self, block, name, fan_in, fan_out, in_wide, out_wide, group):
        self.weight(block, f"{name}.w", fan_in, fan_out, in_wide, out_wide, group)
        if self.spec.bias:
            self.weight(block, f"{name}.b", 1, fan_out, False, out_wide, "bias", shape=(fan_out,))

    def vector(self, block, name, group, init_mean=0.0):
        n = self.spec.n
        self.weight(block, name, 1, n, False, True, group, shape=(n,), init_mean=init_mean)


ADALN_KEYS = ("shift_msa", "scale_msa", "gate_msa", "shift_mlp", "scale_mlp", "gate_mlp")


def build_graph(spec: ModelSpec) -> WeightGraph:
    b = _Builder(spec)
    n, F, P = spec.n, spec.freq_dim, spec.patch.patch_dim
    hid = spec.mlp_hidden
    v = spec.variant

    b.linear("x_embed", "x_embed", P, n, False, True, "input")
    b.linear("t_embed", "t_embed.fc1", F, n, False, True, "input")
    b.linear("t_embed", "t_embed.fc2", n, n, True, True, "hidden")
    if v in ("dit", "uvit", "mmdit"):
        b.weight("y_embed", "y_embed.table", spec.num_classes, n, False, True, "table")
    if v in ("pixart", "mmdit"):
        b.linear("text_embed", "text_embed", spec.text_dim, n, False, True, "input")
    if v == "pixart":
        for k in ADALN_KEYS:
            b.linear("t_block", f"t_block.{k}", n, n, True, True, "adaln")

    def attn(blk, pre):
        for m in ("q", "k", "v", "o"):
            if m == "k":
                # under softmax a key bias shifts a whole logit row, so it gets no gradient
                b.weight(blk, f"{pre}.k.w", n, n, True, True, "hidden")
            else:
                b.linear(blk, f"{pre}.{m}", n, n, True, True, "hidden")

    def mlp(blk, pre):
        b.linear(blk, f"{pre}.fc1", n, hid, True, True, "hidden")
        b.linear(blk, f"{pre}.fc2", hid, n, True, True, "hidden")

    for i in range(spec.depth):
        blk = f"blocks.{i}"
        if v == "dit":
            for k in ADALN_KEYS:
                b.linear(blk, f"{blk}.adaln.{k}", n, n, True, True, "adaln")
            attn(blk, f"{blk}.attn")
            mlp(blk, f"{blk}.mlp")
        elif v == "pixart":
            for k in ADALN_KEYS:
                b.vector(blk, f"{blk}.table.{k}", "table")
            attn(blk, f"{blk}.attn")
            attn(blk, f"{blk}.cross")
            mlp(blk, f"{blk}.mlp")
        elif v == "uvit":
            attn(blk, f"{blk}.attn")
            mlp(blk, f"{blk}.mlp")
        else:
            for s in ("x", "c"):
                for k in ADALN_KEYS:
                    b.linear(blk, f"{blk}.{s}.adaln.{k}", n, n, True, True, "adaln")
                for m in ("q", "k", "v"):
                    b.linear(blk, f"{blk}.{s}.{m}", n, n, True, True, "hidden")
                for m in ("q", "k"):
                    b.vector(blk, f"{blk}.{s}.{m}_gain", "gain", init_mean=1.0)
                b.linear(blk, f"{blk}.{s}.o", n, n, True, True, "hidden")
                mlp(blk, f"{blk}.{s}.mlp")
    if v == "uvit":
        for j in range(spec.depth // 2):
            b.weight(f"skip.{j}", f"skip.{j}.main", n, n, True, True, "hidden")
            b.weight(f"skip.{j}", f"skip.{j}.skip", n, n, True, True, "hidden")
            if spec.bias:
                b.weight(f"skip.{j}", f"skip.{j}.b", 1, n, False, True, "bias", shape=(n,))

    if v == "pixart":
        for k in ("shift", "scale"):
            b.vector("final", f"final.table.{k}", "table")
    elif v != "uvit":
        for k in ("shift", "scale"):
            b.linear("final", f"final.adaln.{k}", n, n, True, True, "adaln")
    b.linear("final", "final.proj", n, P, True, False, "output")
    return b.graph


def audit_roles(spec: ModelSpec) -> dict[str, tuple[WeightRole, WeightRole]]:
    """Re-derive every role from fan sizes at ``n`` and ``2n``; return the mismatches."""
    g1 = build_graph(spec)
    g2 = build_graph(spec.at_width(2 * spec.n))
    bad = {}
    for w in g1:
        w2 = g2[w.name]
        derived = classify_role(w2.fan_in != w.fan_in, w2.fan_out != w.fan_out)
        if derived is not w.role:
            bad[w.name] = (w.role, derived)
    return bad


# ---------------------------------------------------------------------------
# parameters


def init_params(graph: WeightGraph, plan: ParamPlan, seed: int, dtype=np.float64) -> dict[str, Tensor]:
    rng = ad.SeededRng(seed, "init")
    params = {}
    for w in graph:
        e = plan[w.name]
        t = ad.init_normal(w.shape, e.init_std, rng.child(w.name), dtype=dtype, name=w.name)
        if w.init_mean:
            t.data += w.init_mean
        params[w.name] = t
    return params


# ---------------------------------------------------------------------------
# forward


@dataclass
class Batch:
    """Model inputs: noisy images, timestep values fed to the embedder, labels."""

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray


class DiffusionTransformer:
    """Executable forward pass for one :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.graph = build_graph(spec)
        g = spec.patch.image_side // spec.patch.patch_side
        self._pos = pos_embed_2d(spec.n, g)
        self._p: dict[str, Tensor] = {}
        self._mult: dict[str, float] = {}
        self.record: dict[str, float] | None = None
        # weight name -> the input it was applied to in the last forward
        self.taps: dict[str, np.ndarray] | None = None

    # -- helpers -----------------------------------------------------------

    def _w(self, name: str) -> Tensor:
        w = self._p[name]
        m = self._mult.get(name, 1.0)
        return w if m == 1.0 else ad.scale(w, m)

    def _linear(self, x: Tensor, name: str) -> Tensor:
        if self.taps is not None:
            self.taps[f"{name}.w"] = x.data
        y = ad.matmul(x, self._w(f"{name}.w"))
        bname = f"{name}.b"
        if bname in self._p:
            y = ad.add(y, ad.broadcast_to(self._w(bname), y.shape))
        return y

    def _rec(self, key: str, x: Tensor) -> None:
        if self.record is not None:
            d = x.data
            self.record[key] = float(np.sqrt(np.mean(d * d)))

    def _tok(self, v: Tensor, T: int) -> Tensor:
        """(B, n) -> (B, T, n)."""
        B, n = v.shape
        return ad.broadcast_to(ad.reshape(v, (B, 1, n)), (B, T, n))

    def _modulate(self, xn: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
        T = xn.shape[1]
        gamma = self._tok(scale_, T)
        if self.spec.scale_offset:
            gamma = ad.add(gamma, self.spec.scale_offset)
        return ad.add(ad.mul(xn, gamma), self._tok(shift, T))

    def _gate(self, x: Tensor, gate: Tensor, branch: Tensor) -> Tensor:
        return ad.add(x, ad.mul(self._tok(gate, x.shape[1]), branch))

    def _heads(self, x: Tensor) -> Tensor:
        B, T, n = x.shape
        h = self.spec.widths.n_heads
        return ad.transpose(ad.reshape(x, (B, T, h, n // h)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        B, h, T, d = x.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, T, h * d))

    def attention_core(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        """Multi-head attention on ``(B, T, n)`` projections; returns merged heads."""
        qh, kh, vh = self._heads(q), self._heads(k), self._heads(v)
        logits = ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2)))
        if self.spec.attention == "softmax":
            w = ad.softmax_lastdim(ad.scale(logits, 1.0 / math.sqrt(self.spec.widths.head_dim)))
            if self.record is not None:
                self.record.setdefault("_attn_rowsum_err", 0.0)
                err = float(np.max(np.abs(w.data.sum(-1) - 1.0)))
                self.record["_attn_rowsum_err"] = max(self.record["_attn_rowsum_err"], err)
        else:
            w = logits
        return self._merge(ad.matmul(w, vh))

    def _self_attn(self, x: Tensor, pre: str) -> Tensor:
        q, k, v = (self._linear(x, f"{pre}.{m}") for m in ("q", "k", "v"))
        return self._linear(self.attention_core(q, k, v), f"{pre}.o")

    def _mlp(self, x: Tensor, pre: str) -> Tensor:
        return self._linear(ad.gelu(self._linear(x, f"{pre}.fc1")), f"{pre}.fc2")

    def _ln(self, x: Tensor) -> Tensor:
        return ad.layer_norm_nolearn(x, self.spec.ln_eps)

    def _adaln(self, c_act: Tensor, pre: str) -> dict[str, Tensor]:
        return {k: self._linear(c_act, f"{pre}.{k}") for k in ADALN_KEYS}

    # -- embedders ---------------------------------------------------------

    def patch_embed(self, x_img: np.ndarray) -> Tensor:
        tokens = Tensor(patchify(np.asarray(x_img), self.spec.patch).astype(self._dtype))
        h = self._linear(tokens, "x_embed")
        pos = Tensor(np.broadcast_to(self._pos.astype(self._dtype), h.shape))
        return ad.add(h, pos)

    def timestep_embed(self, t: np.ndarray) -> Tensor:
        feats = Tensor(timestep_features(t, self.spec.freq_dim).astype(self._dtype))
        return self._linear(ad.silu(self._linear(feats, "t_embed.fc1")), "t_embed.fc2")

    def label_embed(self, y: np.ndarray) -> Tensor:
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.size and (y.min() < 0 or y.max() >= self.spec.num_classes):
            raise ConfigError(f"class index out of range [0, {self.spec.num_classes})")
        return ad.take_rows(self._w("y_embed.table"), y)

    def text_embed(self, y: np.ndarray) -> Tensor:
        tok = text_tokens_for(y, self.spec).astype(self._dtype)
        if tok.shape[-1] != self.spec.text_dim:
            raise ShapeError("text embedding width mismatch")
        return self._linear(Tensor(tok), "text_embed")

    # -- blocks ------------------------------------------------------------

    def dit_block(self, x: Tensor, mods: dict[str, Tensor], pre: str) -> Tensor:
        h = self._modulate(self._ln(x), mods["shift_msa"], mods["scale_msa"])
        x = self._gate(x, mods["gate_msa"], self._self_attn(h, f"{pre}.attn"))
        h = self._modulate(self._ln(x), mods["shift_mlp"], mods["scale_mlp"])
        return self._gate(x, mods["gate_mlp"], self._mlp(h, f"{pre}.mlp"))

    def pixart_block(self, x: Tensor, text: Tensor, shared: dict[str, Tensor], pre: str) -> Tensor:
        mods = {
            k: ad.add(ad.broadcast_to(ad.reshape(self._w(f"{pre}.table.{k}"), (1, -1)), shared[k].shape), shared[k])
            for k in ADALN_KEYS
        }
        h = self._modulate(self._ln(x), mods["shift_msa"], mods["scale_msa"])
        x = self._gate(x, mods["gate_msa"], self._self_attn(h, f"{pre}.attn"))
        q = self._linear(x, f"{pre}.cross.q")
        k = self._linear(text, f"{pre}.cross.k")
        v = self._linear(text, f"{pre}.cross.v")
        x = ad.add(x, self._linear(self.attention_core(q, k, v), f"{pre}.cross.o"))
        h = self._modulate(self._ln(x), mods["shift_mlp"], mods["scale_mlp"])
        return self._gate(x, mods["gate_mlp"], self._mlp(h, f"{pre}.mlp"))

    def uvit_block(self, x: Tensor, pre: str) -> Tensor:
        x = ad.add(x, self._self_attn(self._ln(x), f"{pre}.attn"))
        return ad.add(x, self._mlp(self._ln(x), f"{pre}.mlp"))

    def uvit_skip(self, h_main: Tensor, h_skip: Tensor, j: int) -> Tensor:
        if self.taps is not None:
            self.taps[f"skip.{j}.main"] = h_main.data
            self.taps[f"skip.{j}.skip"] = h_skip.data
        out = ad.add(ad.matmul(h_main, self._w(f"skip.{j}.main")), ad.matmul(h_skip, self._w(f"skip.{j}.skip")))
        if f"skip.{j}.b" in self._p:
            out = ad.add(out, ad.broadcast_to(self._w(f"skip.{j}.b"), out.shape))
        return out

    def qk_norm(self, x: Tensor, gain: str) -> Tensor:
        """Per-head RMS normalisation followed by a learnable width-n gain."""
        B, T, n = x.shape
        dh = self.spec.widths.head_dim
        xh = ad.rms_norm_lastdim(ad.reshape(x, (B, T, n // dh, dh)), self.spec.qk_eps)
        return ad.mul(ad.reshape(xh, (B, T, n)), ad.broadcast_to(self._w(gain), (B, T, n)))

    def mmdit_block(self, x: Tensor, c: Tensor, cond: Tensor, pre: str) -> tuple[Tensor, Tensor]:
        act = ad.silu(cond)
        streams = {"x": x, "c": c}
        mods, qs, ks, vs = {}, {}, {}, {}
        for s, h in streams.items():
            mods[s] = self._adaln(act, f"{pre}.{s}.adaln")
            hn = self._modulate(self._ln(h), mods[s]["shift_msa"], mods[s]["scale_msa"])
            qs[s] = self.qk_norm(self._linear(hn, f"{pre}.{s}.q"), f"{pre}.{s}.q_gain")
            ks[s] = self.qk_norm(self._linear(hn, f"{pre}.{s}.k"), f"{pre}.{s}.k_gain")
            vs[s] = self._linear(hn, f"{pre}.{s}.v")
        Tx = x.shape[1]
        Tc = c.shape[1]
        joint = self.attention_core(
            ad.concat([qs["x"], qs["c"]], axis=1),
            ad.concat([ks["x"], ks["c"]], axis=1),
            ad.concat([vs["x"], vs["c"]], axis=1),
        )
        parts = {"x": ad.slice_axis(joint, 1, 0, Tx), "c": ad.slice_axis(joint, 1, Tx, Tx + Tc)}
        out = {}
        for s, h in streams.items():
            m = mods[s]
            h = self._gate(h, m["gate_msa"], self._linear(parts[s], f"{pre}.{s}.o"))
            hn = self._modulate(self._ln(h), m["shift_mlp"], m["scale_mlp"])
            out[s] = self._gate(h, m["gate_mlp"], self._mlp(hn, f"{pre}.{s}.mlp"))
        return out["x"], out["c"]

    def final_layer(self, z: Tensor, shift: Tensor | None, scale_: Tensor | None) -> Tensor:
        zn = self._ln(z)
        if shift is not None:
            zn = self._modulate(zn, shift, scale_)
        return self._linear(zn, "final.proj")

    # -- full model --------------------------------------------------------

    def bind(self, params: dict[str, Tensor], plan: ParamPlan | None = None) -> None:
        missing = [k for k in self.graph.names() if k not in params]
        if missing:
            raise ConfigError(f"missing parameters {missing[:5]}")
        self._p = params
        self._mult = {k: e.multiplier for k, e in plan.items()} if plan is not None else {}

    @property
    def _dtype(self):
        for t in self._p.values():
            return t.dtype
        return np.float64

    def forward(self, params: dict[str, Tensor], plan: ParamPlan | None, batch: Batch) -> Tensor:
        """Predict the regression target for ``batch``; output has the image shape."""
        self.bind(params, plan)
        spec = self.spec
        v = spec.variant
        x = self.patch_embed(batch.x)
        self._rec("x_embed", x)
        temb = self.timestep_embed(batch.t)
        T = x.shape[1]

        if v == "dit":
            c = ad.add(temb, self.label_embed(batch.y))
            self._rec("cond", c)
            act = ad.silu(c)
            for i in range(spec.depth):
                x = self.dit_block(x, self._adaln(act, f"blocks.{i}.adaln"), f"blocks.{i}")
                self._rec(f"blocks.{i}", x)
            out = self.final_layer(x, self._linear(act, "final.adaln.shift"), self._linear(act, "final.adaln.scale"))
        elif v == "pixart":
            self._rec("cond", temb)
            tact = ad.silu(temb)
            shared = {k: self._linear(tact, f"t_block.{k}") for k in ADALN_KEYS}
            text = self.text_embed(batch.y)
            for i in range(spec.depth):
                x = self.pixart_block(x, text, shared, f"blocks.{i}")
                self._rec(f"blocks.{i}", x)
            sh = ad.add(ad.broadcast_to(ad.reshape(self._w("final.table.shift"), (1, -1)), temb.shape), temb)
            sc = ad.add(ad.broadcast_to(ad.reshape(self._w("final.table.scale"), (1, -1)), temb.shape), temb)
            out = self.final_layer(x, sh, sc)
        elif v == "uvit":
            B, n = temb.shape
            ctx = [ad.reshape(temb, (B, 1, n)), ad.reshape(self.label_embed(batch.y), (B, 1, n))]
            h = ad.concat(ctx + [x], axis=1)
            n_in = spec.depth // 2
            skips = []
            for i in range(n_in):
                h = self.uvit_block(h, f"blocks.{i}")
                self._rec(f"blocks.{i}", h)
                skips.append(h)
            if spec.depth % 2:
                h = self.uvit_block(h, f"blocks.{n_in}")
                self._rec(f"blocks.{n_in}", h)
            for j in range(n_in):
                i = n_in + spec.depth % 2 + j
                h = self.uvit_skip(h, skips.pop(), j)
                h = self.uvit_block(h, f"blocks.{i}")
                self._rec(f"blocks.{i}", h)
            x = ad.slice_axis(h, 1, 2, 2 + T)
            out = self.final_layer(x, None, None)
        else:
            c = ad.add(temb, self.label_embed(batch.y))
            self._rec("cond", c)
            ctx = self.text_embed(batch.y)
            for i in range(spec.depth):
                x, ctx = self.mmdit_block(x, ctx, c, f"blocks.{i}")
                self._rec(f"blocks.{i}", x)
            act = ad.silu(c)
            out = self.final_layer(x, self._linear(act, "final.adaln.shift"), self._linear(act, "final.adaln.scale"))
        self._rec("final", out)
        return unpatchify(out, spec.patch)


def build_model(spec: ModelSpec) -> DiffusionTransformer:
    return DiffusionTransformer(spec)



# ---------------------------------------------------------------------------
# weight snapshots: raw little-endian floats plus a JSON index
#
#   {"dtype": "float64", "weights": {name: {"offset": k, "shape": [...]}}}
#
# ``offset`` counts elements (not bytes) from the start of the binary file.


def save_snapshot(params: dict[str, Tensor | np.ndarray], path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` and ``<path>.json``; names are stored in sorted order."""
    path = Path(path)
    arrays = {k: np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    dtypes = {a.dtype for a in arrays.values()}
    if len(dtypes) > 1:
        raise ShapeError("snapshot parameters must share one dtype")
    dtype = np.dtype(dtypes.pop() if dtypes else np.float64)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError("snapshots hold 32- or 64-bit floats only")
    index, offset = {}, 0
    bin_path, idx_path = path.with_suffix(".bin"), path.with_suffix(".json")
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    with bin_path.open("wb") as fh:
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype=dtype.newbyteorder("<"))
            fh.write(a.tobytes())
            index[name] = {"offset": offset, "shape": list(a.shape)}
            offset += a.size
    idx_path.write_text(json.dumps({"dtype": dtype.name, "weights": index}, indent=1, sort_keys=True) + "\n")
    return bin_path, idx_path


def load_snapshot(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype=np.dtype(meta["dtype"]).newbyteorder("<"))
    out = {}
    for name, ent in meta["weights"].items():
        size = int(np.prod(ent["shape"], dtype=np.int64))
        if ent["offset"] + size > flat.size:
            raise ShapeError(f"snapshot entry {name} runs past the end of the binary")
        out[name] = flat[ent["offset"] : ent["offset"] + size].reshape(ent["shape"]).astype(meta["dtype"])
    return out
