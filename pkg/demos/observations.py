"""Synthetic features: aliasing, day-to-day drift and stochastic sampling.

Run: python3 demos/observations.py
"""

import numpy as np

from navreplay.graph import generate_synthetic_environment, grid_spec
from navreplay.observation import EncoderSpec, encode_synthetic, sample_observation

graph, _ = generate_synthetic_environment(grid_spec(4, 4), seed=0)
spec = EncoderSpec(d=8, view_noise=0.1, day_shift=0.5, aliasing_pairs=((0, 15),))
train_day = encode_synthetic(spec, graph, 0, "train")
next_day = encode_synthetic(spec, graph, 0, "validation")

# Aliased nodes share a base vector; per-view noise keeps them near, not equal.
a = train_day.node_features[0].ravel()
b = train_day.node_features[15].ravel()
c = train_day.node_features[5].ravel()
cos = lambda u, v: u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
print(f"cosine aliased pair {cos(a, b):.3f}, unrelated pair {cos(a, c):.3f}")

shift = np.mean((train_day.node_features[5] - next_day.node_features[5]) ** 2)
print(f"mean squared drift between days at node 5: {shift:.3f}")

# Deterministic sampling returns the stored views; stochastic sampling jitters
# position along a corridor and orientation before looking up the nearest frame.
stochastic = encode_synthetic(spec, graph, 0, "train", stochastic=True)
rng = np.random.default_rng(1)
exact = sample_observation(train_day, 5, 0.0, rng)
draws = [sample_observation(stochastic, 5, 0.0, rng) for _ in range(200)]
changed = np.mean([not np.array_equal(x, exact) for x in draws])
print(f"observation length {exact.size}; stochastic draws differing from the exact view: {changed:.0%}")
