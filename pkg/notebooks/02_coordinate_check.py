# %% [markdown]
# # Coordinate check
#
# Train the same toy DiT at several widths for a few steps. Under muP, the
# RMS of every layer's activations, and of how far they have moved since
# initialisation, should not depend on width. Under SP the output layer's
# update grows with width. This is the cheapest evidence that a
# parameterization is wired correctly.

# %%
from mupdit.coordcheck import run_coordcheck, verdict
from mupdit.mup import BaseHPs
from mupdit.presets import TUNED_ETA, desk_model

widths = (32, 64, 128)
base = BaseHPs(eta=TUNED_ETA)
reports = {s: run_coordcheck(desk_model(), widths, steps=10, base=base, scheme=s, seeds=(0,)) for s in ("mup", "sp")}

# %% [markdown]
# The verdict takes, for each layer, the largest max/min ratio across widths
# over every step and both statistics, and passes when it stays below C.

# %%
for scheme, rep in reports.items():
    v = verdict(rep, C=4.0)
    worst = max(layer["max_ratio"] for layer in v["layers"].values())
    print(f"{scheme}: pass={v['pass']} worst ratio={worst:.2f}")

# %% [markdown]
# The output projection's update RMS after the last step, per width:

# %%
for scheme, rep in reports.items():
    ups = rep.series("w:final.proj.w", "upd", rep.steps)
    print(scheme, " ".join(f"{u:.3f}" for u in ups))
