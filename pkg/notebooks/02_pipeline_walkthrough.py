# %% [markdown]
# # Few-shot imitation end to end, at toy scale
#
# Pretrain the skill model and the distance encoder on the blocked-maze corpus,
# adapt the skill model to ten demos, then roll out the semi-parametric policy
# next to the SPiRL-style baseline. Sizes are cut down so this finishes in a
# few minutes; the CLI defaults are the desk-scale settings.

# %%
import logging

from fistlab import imitator as im
from fistlab import maze, metric
from fistlab import skillmodel as sm

logging.basicConfig(level=logging.INFO, format="%(message)s")

layout = maze.default_layout()
corpus = maze.generate_offline_data(layout, "left", 30_000, seed=0)
demos = maze.generate_demos(layout, "left", m=10, seed=0)

# %% [markdown]
# The skill model: LSTM posterior over z, MLP decoder, and a prior that sees
# the current state and the state H-1 steps ahead.

# %%
cfg = sm.SkillModelConfig(pretrain_epochs=5, finetune_epochs=20)
skills, curve = sm.pretrain(corpus, cfg, seed=0, conditioning="future")
tuned, _ = sm.finetune(skills, demos, cfg, seed=0)
print("pretrain loss", round(curve[0], 3), "->", round(curve[-1], 3))

# %% [markdown]
# The distance encoder is trained with InfoNCE on (s_t, s_{t+H-1}) pairs;
# lookups use plain squared distance between embeddings.

# %%
encoder, _ = metric.train_distance(corpus, metric.DistanceConfig(epochs=5), seed=0)
print("separation rate", metric.separation_rate(encoder, corpus, n_batches=100))

# %% [markdown]
# Same model, but the prior only sees the current state: the SPiRL baseline.

# %%
spirl, _ = sm.pretrain(corpus, cfg, seed=0, conditioning="current")
spirl_tuned, _ = sm.finetune(spirl, demos, cfg, seed=0)

# %%
task = im.MazeTask.from_demos(layout, demos)
art = im.Artifacts(task, demos, skills=tuned, skills_pretrained=skills, spirl=spirl_tuned, distance=encoder)
for kind in ("fist", "fist_no_ft", "fist_oracle", "spirl"):
    rep = im.evaluate(kind, art, im.EvalConfig())
    print(f"{kind:12s} success {rep.success_rate:.1f}  mean length {rep.mean_length:7.1f}  score {rep.normalized_score:.2f}")
