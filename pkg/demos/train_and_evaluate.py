"""Train bootstrapped Q-learning on a small grid, then measure transfer.

Takes about a minute on one core. Run: python3 demos/train_and_evaluate.py
"""

import numpy as np

from navreplay.env import EnvFactory, place_rewards
from navreplay.evaluation import evaluate, planner_optimal_bound, random_walk_baseline, relative
from navreplay.graph import generate_synthetic_environment, grid_spec
from navreplay.observation import EncoderSpec, encode_synthetic
from navreplay.trainers import TrainerConfig, train

graph, _ = generate_synthetic_environment(grid_spec(6, 6), seed=0)
layout = place_rewards(graph, np.random.default_rng(0))
spec = EncoderSpec(d=8, view_noise=0.1, day_shift=0.5)
models = {split: encode_synthetic(spec, graph, 0, split, stochastic=True) for split in ("train", "validation")}
factory = EnvFactory(graph, layout, models, t_max=500)

bound = planner_optimal_bound(graph, layout, 500).bound
walk = random_walk_baseline(graph, layout, 500, "uniform", np.random.default_rng(0), 50)
print(f"planner bound {bound} goal visits; uniform random walk mean return {walk.r_mean:.2f}")

config = TrainerConfig(algorithm="bootstrap_q", n_workers=8, n_heads=10, p_mask=0.5,
                       total_frames=1_000_000, embed_dim=32, recurrent_dim=32, eval_every=20)
result = train(factory, config, seed=0)
for rec in result.train_metrics[::5]:
    print(f"frames {rec.frames:>8}  train r_min {rec.min_return:6.1f}  r_mean {rec.mean_return:6.1f}")

train_report = evaluate(result.params, factory, 8, seed=[0, 0], split="train")
val_report = relative(train_report, evaluate(result.params, factory, 8, seed=[0, 1], split="validation"))
print(f"training day r_min {train_report.r_min:.1f}, next day r_min {val_report.r_min:.1f}, "
      f"r_relative {val_report.r_relative:.2f}")
