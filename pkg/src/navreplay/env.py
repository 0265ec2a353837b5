"""Episodic navigation MDP replayed on a pose graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .graph import PoseGraph
from .observation import ObservationModel, sample_observation

T_MAX = 3000
N_SUBGOALS = 10
GOAL_REWARD = 1.0
SUBGOAL_REWARD = 0.1


class Action(IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    MOVE_FORWARD = 2


N_ACTIONS = len(Action)


class EpisodeOver(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardLayout:
    goal: int
    subgoals: tuple[int, ...] = ()
    goal_reward: float = GOAL_REWARD
    subgoal_reward: float = SUBGOAL_REWARD

    def __post_init__(self):
        if self.goal in self.subgoals:
            raise ValueError("the goal cannot also be a sub-goal")
        if len(set(self.subgoals)) != len(self.subgoals):
            raise ValueError("sub-goals must be distinct")


def place_rewards(graph: PoseGraph, rng: np.random.Generator, n_subgoals: int = N_SUBGOALS) -> RewardLayout:
    """Draw the goal and sub-goals uniformly without replacement."""
    if n_subgoals < 0:
        raise ValueError("n_subgoals must be non-negative")
    if graph.n_nodes <= n_subgoals + 1:
        raise ValueError(
            f"graph has {graph.n_nodes} nodes; need more than {n_subgoals + 1} "
            f"to place a goal and {n_subgoals} sub-goals"
        )
    picks = rng.choice(graph.n_nodes, size=n_subgoals + 1, replace=False)
    return RewardLayout(int(picks[0]), tuple(int(p) for p in picks[1:]))


@dataclass(frozen=True)
class AgentState:
    node: int
    heading: float
    t: int = 0
    collected: frozenset = frozenset()
    episode_return: float = 0.0


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    moved: bool = False
    respawned: bool = False


Spawner = Callable[["NavigationEnv"], tuple[int, float]]


class NavigationEnv:
    """Interactive replay of a recorded environment.

    Transitions are deterministic; randomness enters only through spawning
    (``spawn_rng``) and the observation function (``obs_rng``). ``spawner``
    overrides uniform spawning, e.g. for worst-case analyses.
    """

    def __init__(
        self,
        graph: PoseGraph,
        observations: ObservationModel,
        layout: RewardLayout,
        t_max: int = T_MAX,
        spawn_rng: np.random.Generator | int | None = None,
        obs_rng: np.random.Generator | int | None = None,
        spawner: Spawner | None = None,
    ):
        if observations.graph is not graph and observations.graph != graph:
            raise ValueError("observation model was built for a different graph")
        for n in (layout.goal, *layout.subgoals):
            if not 0 <= n < graph.n_nodes:
                raise ValueError(f"reward node {n} is not in the graph")
        self.graph = graph
        self.observations = observations
        self.layout = layout
        self.t_max = int(t_max)
        self.spawn_rng = np.random.default_rng(spawn_rng)
        self.obs_rng = np.random.default_rng(obs_rng)
        self.spawner = spawner
        self._subgoals = frozenset(layout.subgoals)
        self._trans = graph.transitions
        self._step = graph.rotation_step
        self._n_headings = graph.n_headings
        self.state: AgentState | None = None

    def _spawn(self) -> tuple[int, float]:
        if self.spawner is not None:
            return self.spawner(self)
        node = int(self.spawn_rng.integers(self.graph.n_nodes))
        heading = float(self.spawn_rng.integers(self._n_headings) * self._step)
        return node, heading

    def observe(self, node: int, heading: float) -> np.ndarray:
        return sample_observation(self.observations, node, heading, self.obs_rng)

    def reset(self) -> tuple[AgentState, np.ndarray]:
        node, heading = self._spawn()
        self.state = AgentState(node, heading)
        return self.state, self.observe(node, heading)

    def step(self, action: int) -> tuple[AgentState, StepOutcome]:
        s = self.state
        if s is None:
            raise EpisodeOver("call reset() before step()")
        if s.t >= self.t_max:
            raise EpisodeOver("episode is over; call reset()")
        node, heading, collected = s.node, s.heading, s.collected
        reward = 0.0
        moved = respawned = False
        if action == Action.TURN_LEFT:
            heading = (heading - self._step) % 360.0
        elif action == Action.TURN_RIGHT:
            heading = (heading + self._step) % 360.0
        elif action == Action.MOVE_FORWARD:
            nb = self._trans[node, int(round(heading / self._step)) % self._n_headings]
            if nb >= 0:
                node = int(nb)
                moved = True
                if node == self.layout.goal:
                    reward = self.layout.goal_reward
                    respawned = True
                    collected = frozenset()
                    node, heading = self._spawn()
                elif node in self._subgoals and node not in collected:
                    reward = self.layout.subgoal_reward
                    collected = collected | {node}
        else:
            raise ValueError(f"unknown action {action!r}")
        t = s.t + 1
        self.state = AgentState(node, heading, t, collected, s.episode_return + reward)
        obs = self.observe(node, heading)
        return self.state, StepOutcome(obs, reward, t >= self.t_max, moved, respawned)


@dataclass
class EnvFactory:
    """Shared, read-only ingredients from which per-worker envs are made.

    ``observations`` maps a split name (``train``, ``validation``) to its
    observation model; all splits share the graph and reward layout.
    """

    graph: PoseGraph
    layout: RewardLayout
    observations: dict[str, ObservationModel]
    t_max: int = T_MAX

    @property
    def obs_dim(self) -> int:
        return next(iter(self.observations.values())).obs_dim

    def make(self, split: str = "train", seed=None, spawner: Spawner | None = None) -> NavigationEnv:
        if split not in self.observations:
            raise KeyError(f"no observation model for split {split!r}")
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        spawn_seq, obs_seq = seq.spawn(2)
        return NavigationEnv(
            self.graph,
            self.observations[split],
            self.layout,
            self.t_max,
            np.random.default_rng(spawn_seq),
            np.random.default_rng(obs_seq),
            spawner,
        )


@dataclass
class Trajectory:
    nodes: list[int] = field(default_factory=list)
    headings: list[float] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)


Policy = Callable[[np.ndarray, Any], tuple[int, Any]]


def run_episode(env: NavigationEnv, policy: Policy) -> tuple[Trajectory, float]:
    """Roll out one full episode of ``env.t_max`` steps.

    ``policy(observation, memory) -> (action, memory)`` starts from
    ``memory=None``. The returned return is the undiscounted reward sum.
    """
    traj = Trajectory()
    state, obs = env.reset()
    memory = None
    total = 0.0
    for _ in range(env.t_max):
        action, memory = policy(obs, memory)
        traj.nodes.append(state.node)
        traj.headings.append(state.heading)
        traj.actions.append(int(action))
        state, out = env.step(action)
        traj.rewards.append(out.reward)
        total += out.reward
        obs = out.observation
    return traj, total


def write_trajectory(traj: Trajectory, path: str | Path) -> None:
    lines = ["traj v1"]
    for t, (n, h, a, r) in enumerate(zip(traj.nodes, traj.headings, traj.actions, traj.rewards)):
        lines.append(f"{t} {n} {h:g} {Action(a).name.lower()} {r!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> Trajectory:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split() != ["traj", "v1"]:
        raise ValueError(f"{path}: expected header 'traj v1'")
    traj = Trajectory()
    for line in lines[1:]:
        if not line.strip():
            continue
        _, n, h, a, r = line.split()
        traj.nodes.append(int(n))
        traj.headings.append(float(h))
        traj.actions.append(int(Action[a.upper()]))
        traj.rewards.append(float(r))
    return traj
