# %% [markdown]
# # The point maze and its data
#
# Layout, blocked regions, the waypoint expert and the two datasets the
# pipeline trains on. Run with `python notebooks/01_maze_and_data.py`.

# %%
import numpy as np

from fistlab import maze

layout = maze.default_layout()
print(layout.to_text())
print("free cells:", len(layout.free_cells()))
for region in sorted(layout.regions):
    print(region, "goal cell", maze.region_goal(layout, region), "cells", len(layout.region(region).cells))

# %% [markdown]
# Blocking a region turns its cells into walls. The offline corpus is collected
# on the blocked maze, so no transition ever enters the region.

# %%
print(layout.blocked("left").to_text())
corpus = maze.generate_offline_data(layout, "left", 20_000, seed=0)
print(len(corpus), "trajectories,", corpus.n_transitions, "transitions")
assert not layout.region("left").contains(corpus.all_states()).any()

# %% [markdown]
# The demos run on the full maze and finish at the goal inside the region.

# %%
demos = maze.generate_demos(layout, "left", m=10, seed=0)
print("demo lengths:", demos.lengths, "goal:", demos.goal["cell"])

visits = np.zeros(layout.shape, dtype=int)
for tr in demos:
    for s in tr.states:
        r, c = maze.cell_of(s[:2])
        visits[r, c] += 1
print("cells the demos pass through:")
for r, row in enumerate(layout.to_text().splitlines()):
    print("".join("*" if visits[r, c] else ch for c, ch in enumerate(row)))
