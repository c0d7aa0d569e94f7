# %% [markdown]
# # The DiT forward pass as a tensor program
#
# A tensor program is a straight-line list of three kinds of instruction:
# averaging a vector, multiplying by a width-by-width matrix, and applying a
# coordinatewise nonlinearity to a set of vectors and scalars. Writing a
# simplified DiT forward pass this way shows it fits the framework, and
# running the program next to the model's own forward checks the translation.

# %%
from collections import Counter

from mupdit.tp import build_dit_program, equivalence_check

prog = build_dit_program()
print(Counter(type(ins).__name__ for ins in prog.instructions))

# %% [markdown]
# The worst absolute difference between the interpreted program and the
# direct forward, over three widths and ten random draws each:

# %%
print(f"max |diff| = {equivalence_check():.2e}")

# %% [markdown]
# Programs serialise to JSON and back without change.

# %%
text = prog.to_json()
assert type(prog).from_json(text).to_json() == text
print(text[:300])
