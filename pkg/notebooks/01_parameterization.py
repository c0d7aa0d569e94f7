# %% [markdown]
# # Width-dependent parameterization
#
# A model's weights fall into three roles by which of their dimensions grow
# with width: input, hidden and output. Each role gets an (a, b, c) triple
# giving how its multiplier, init std and learning rate shrink with width.
# This script prints the triples and resolves a small DiT at three widths.

# %%
from fractions import Fraction

from mupdit.arch import build_graph
from mupdit.mup import BaseHPs, Scheme, WeightRole, WidthSpec, abc_lookup, cost_ratio, cost_ratio_phases, make_plan
from mupdit.presets import desk_model

for scheme in Scheme:
    for role in WeightRole:
        a, b, c = abc_lookup(role, scheme)
        print(f"{scheme.value:4s} {role.value:7s} a={a} b={b} c={c}")

# %% [markdown]
# At the base width both schemes give the same plan. Away from it, only the
# hidden learning rate and the output multiplier pick up the factor
# n_base / n under muP.

# %%
base = BaseHPs(eta=2.0**-8)
for n in (32, 64, 128):
    spec = desk_model(n=n, n_base=32)
    graph = build_graph(spec)
    mup = make_plan(graph, spec.widths, base, "mup")
    sp = make_plan(graph, spec.widths, base, "sp")
    hidden = "blocks.0.mlp.fc1.w"
    ratio = Fraction(mup[hidden].lr).limit_denominator() / Fraction(sp[hidden].lr).limit_denominator()
    print(f"n={n:3d} hidden lr mup/sp = {ratio}  output mult mup = {mup['final.proj.w'].multiplier:.4f}")

# %% [markdown]
# ## Tuning cost
#
# The cost of tuning on a proxy is the number of proxy trials times the proxy
# size times its training volume, relative to one target run. The ratios are
# computed with exact fractions.

# %%
from mupdit.config import ExperimentConfig

pix = ExperimentConfig.load("configs/pixart_cost.toml").cost_inputs()
print(f"PixArt-style search: {cost_ratio(pix):.6f}")
phases, target = ExperimentConfig.load("configs/mmdit_cost.toml").cost_inputs()
print(f"MMDiT-style two-phase search: {cost_ratio_phases(phases, target)}")
