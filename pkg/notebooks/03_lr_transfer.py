# %% [markdown]
# # Learning-rate transfer across width
#
# Sweep the base learning rate at two widths and compare where the loss
# minimum lands. Under muP the optimum should stay put; under SP it moves
# toward smaller rates as the model widens. This is a shortened version of the
# acceptance sweep (fewer steps, one seed) so that it runs in a few minutes.

# %%
import tempfile
from pathlib import Path

from mupdit.presets import desk_model
from mupdit.report import emit_report
from mupdit.transfer import GridSpec, sweep_axis

out = Path(tempfile.mkdtemp(prefix="mupdit-transfer-"))
lrs = tuple(2.0**e for e in range(-11, -4, 2))
verdicts = {}
for scheme in ("mup", "sp"):
    grid = GridSpec("width", (32, 128), "eta", lrs, desk_model(), seeds=(0,), batch=32, steps=300)
    verdicts[scheme] = sweep_axis(grid, scheme, out / "trials.jsonl")

# %% [markdown]
# Each verdict reports the index of the best learning rate at every width.
# With only two widths and a coarse grid, a one-step SP shift still sits
# inside the default tolerance of 1; the full three-width sweep separates the
# schemes.

# %%
for scheme, v in verdicts.items():
    print(f"{scheme}: argmin indices {v.argmin_indices} pass={v.passed}")
    for n, row in v.cells.items():
        print(f"  n={n:3d} " + " ".join(f"{c[0]:.4f}" for c in row.values()))

# %% [markdown]
# The report writes a CSV summary, one verdict JSON per sweep and an SVG loss
# curve per sweep. Diverged cells show as gaps.

# %%
bundle = emit_report(out / "trials.jsonl", out / "report")
print(bundle.csv_path.read_text())
print([p.name for p in bundle.svg_paths])
