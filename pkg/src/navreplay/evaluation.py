"""Evaluation metrics, random-walk baselines and the optimal-planner bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .env import Action, EnvFactory, NavigationEnv, RewardLayout, run_episode
from .graph import PoseGraph, intersection_fraction, state_transition_table
from .observation import ObservationModel
from .qnet import ParameterSet, forward_outputs, zero_state
from .trainers import MetricRecord, act


@dataclass
class EvalReport:
    r_min: float
    r_mean: float
    episodes: int
    returns: list[float] = field(default_factory=list)
    r_relative: float | None = None
    r_relative_defined: bool = False

    @property
    def stderr(self) -> float:
        if len(self.returns) < 2:
            return 0.0
        return float(np.std(self.returns, ddof=1) / math.sqrt(len(self.returns)))


def report_from_returns(returns) -> EvalReport:
    r = [float(x) for x in returns]
    return EvalReport(min(r), float(np.mean(r)), len(r), r)


def relative(train: EvalReport, val: EvalReport) -> EvalReport:
    """Fill ``val.r_relative`` as validation r_min over training r_min.

    A zero training r_min leaves the ratio undefined; it is then reported
    as 0 with ``r_relative_defined = False``.
    """
    if train.r_min > 0:
        val.r_relative = val.r_min / train.r_min
        val.r_relative_defined = True
    else:
        val.r_relative = 0.0
        val.r_relative_defined = False
    return val


def rollout_returns(
    params: ParameterSet,
    envs: list[NavigationEnv],
    rngs: list[np.random.Generator],
    mode: str = "greedy",
) -> list[float]:
    """One synchronous episode per env under the network policy.

    Each worker draws its behavior head uniformly at the episode start and
    keeps it for the whole episode.
    """
    B = len(envs)
    K = params.config.n_heads
    heads = [int(rng.integers(K)) for rng in rngs]
    obs = np.stack([env.reset()[1] for env in envs])
    state = zero_state(params.config, B)
    totals = np.zeros(B)
    for _ in range(envs[0].t_max):
        out, state, _ = forward_outputs(params, obs[None], state)
        scores = out.a[0] if mode == "sample" else out.q[0]
        for b in range(B):
            a = act(scores[b], heads[b], rngs[b], mode)
            _, o = envs[b].step(a)
            totals[b] += o.reward
            obs[b] = o.observation
    return totals.tolist()


def evaluate(
    params: ParameterSet,
    env_factory: EnvFactory,
    n_workers: int,
    seed=0,
    split: str = "train",
    mode: str = "greedy",
) -> EvalReport:
    """Run ``n_workers`` episodes in parallel and report worst and mean return."""
    root = np.random.SeedSequence(seed)
    envs, rngs = [], []
    for ws in root.spawn(n_workers):
        env_seq, pol_seq = ws.spawn(2)
        envs.append(env_factory.make(split, env_seq))
        rngs.append(np.random.default_rng(pol_seq))
    return report_from_returns(rollout_returns(params, envs, rngs, mode))


def evaluate_transfer(
    params: ParameterSet, env_factory: EnvFactory, n_workers: int, seed=0, mode: str = "greedy"
) -> tuple[EvalReport, EvalReport]:
    train = evaluate(params, env_factory, n_workers, [seed, 0] if np.ndim(seed) == 0 else seed, "train", mode)
    val = evaluate(params, env_factory, n_workers, [seed, 1] if np.ndim(seed) == 0 else seed, "validation", mode)
    return train, relative(train, val)


# --------------------------------------------------------------------------
# Baselines
# --------------------------------------------------------------------------


def blind_observations(graph: PoseGraph) -> ObservationModel:
    """A constant observation model for policies that ignore their input."""
    return ObservationModel(graph, np.zeros((graph.n_nodes, 4, 1)))


def random_walk_policy(p_turn: float, rng: np.random.Generator):
    def policy(_obs, memory):
        if rng.random() < p_turn:
            return (Action.TURN_LEFT if rng.random() < 0.5 else Action.TURN_RIGHT), memory
        return Action.MOVE_FORWARD, memory

    return policy


def random_walk_baseline(
    graph: PoseGraph,
    layout: RewardLayout,
    t_max: int,
    prior: str,
    rng: np.random.Generator,
    episodes: int,
) -> EvalReport:
    """Random walk that turns with a fixed probability.

    ``prior="intersection"`` turns with probability equal to the fraction of
    intersection nodes; ``prior="uniform"`` puts mass 2/3 on turning, as a
    uniform choice over the three actions does.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if prior == "intersection":
        p_turn = intersection_fraction(graph)
    elif prior == "uniform":
        p_turn = 2.0 / 3.0
    else:
        raise ValueError(f"unknown prior {prior!r}")
    env = NavigationEnv(graph, blind_observations(graph), layout, t_max, spawn_rng=rng, obs_rng=rng)
    policy = random_walk_policy(p_turn, rng)
    return report_from_returns(run_episode(env, policy)[1] for _ in range(episodes))


# --------------------------------------------------------------------------
# Planner
# --------------------------------------------------------------------------


def spawn_to_goal_steps(graph: PoseGraph, goal: int) -> np.ndarray:
    """Fewest actions from each ``(node, heading)`` state until the goal is entered.

    The reward fires on moving into the goal, so a state already at the goal
    must step out and come back.
    """
    H = graph.n_headings
    nxt = state_transition_table(graph)
    S = nxt.shape[0]
    rows = np.repeat(np.arange(S), 3)
    cols = nxt.ravel()
    keep = rows != cols
    rev = csr_matrix((np.ones(keep.sum()), (cols[keep], rows[keep])), shape=(S, S))
    goal_states = np.arange(goal * H, goal * H + H)
    to_goal = shortest_path(rev, method="D", directed=True, unweighted=True, indices=goal_states).min(axis=0)
    d = to_goal.copy()
    best = np.full(H, np.inf)
    for h in range(H):
        for turns in range(H):
            k = (h + turns) % H
            nb = graph.transitions[goal, k]
            if nb >= 0:
                cost = min(turns, H - turns) + 1 + to_goal[nb * H + k]
                best[h] = min(best[h], cost)
    d[goal_states] = best
    return d


@dataclass
class PlannerBound:
    bound: int
    worst_steps: float
    mean_steps: float
    spawn_steps: np.ndarray
    spawn_bounds: np.ndarray


def bound_from_distances(t_max: int, worst: float, spawn_steps=None) -> tuple[int, np.ndarray]:
    """Goal visits an optimal agent is guaranteed, with every respawn worst-case.

    A spawn ``d`` steps away yields ``floor((t_max - d) / worst) + 1`` visits
    when ``d <= t_max`` and none otherwise.
    """
    if worst <= 0 or not math.isfinite(worst):
        raise ValueError("worst-case distance must be positive and finite")
    d = np.atleast_1d(np.asarray(worst if spawn_steps is None else spawn_steps, dtype=float))
    per = np.where(d <= t_max, np.floor((t_max - d) / worst) + 1, 0).astype(np.int64)
    if t_max < worst:
        overall = 0
    else:
        overall = int(math.floor((t_max - worst) / worst) + 1)
    return overall, per


def planner_optimal_bound(graph: PoseGraph, layout: RewardLayout, t_max: int) -> PlannerBound:
    d = spawn_to_goal_steps(graph, layout.goal)
    if not np.isfinite(d).all():
        raise ValueError("goal is unreachable from some spawn state")
    worst = float(d.max())
    bound, per = bound_from_distances(t_max, worst, d)
    return PlannerBound(bound, worst, float(d.mean()), d, per)


def optimal_policy(env: NavigationEnv):
    """Scripted shortest-path policy reading the true state from ``env``."""
    g = env.graph
    H = g.n_headings
    nxt = state_transition_table(g)
    dist = spawn_to_goal_steps(g, env.layout.goal)
    goal = env.layout.goal

    def policy(_obs, memory):
        s = env.state
        idx = s.node * H + g.heading_index(s.heading)
        best, best_cost = None, np.inf
        for a in (Action.MOVE_FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT):
            t = nxt[idx, a]
            if t == idx:
                continue
            cost = 1 if t // H == goal and a == Action.MOVE_FORWARD else 1 + dist[t]
            if cost < best_cost:
                best, best_cost = a, cost
        return best, memory

    return policy


def worst_case_spawner(graph: PoseGraph, goal: int):
    """Spawner that always places the agent at a farthest state from the goal."""
    d = spawn_to_goal_steps(graph, goal)
    s = int(np.argmax(d))
    H = graph.n_headings
    node, heading = s // H, (s % H) * graph.rotation_step
    return lambda _env: (node, heading)


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def write_eval_report(report: EvalReport, path: str | Path) -> None:
    lines = ["eval v1"]
    lines += [f"worker {i} {r!r}" for i, r in enumerate(report.returns)]
    rrel = report.r_relative if report.r_relative is not None else float("nan")
    lines.append(f"{report.r_min!r} {report.r_mean!r} {rrel!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_eval_report(path: str | Path) -> EvalReport:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "eval v1":
        raise ValueError(f"{path}: expected header 'eval v1'")
    returns = [float(ln.split()[2]) for ln in lines[1:] if ln.startswith("worker ")]
    rmin, rmean, rrel = (float(x) for x in lines[-1].split())
    rep = EvalReport(rmin, rmean, len(returns), returns)
    if not math.isnan(rrel):
        rep.r_relative = rrel
        rep.r_relative_defined = True
    return rep


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average over at most ``window`` points."""
    values = np.asarray(values, dtype=float)
    if window <= 1:
        return values.copy()
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


CURVE_COLUMNS = ("train_mean", "train_min", "val_mean", "val_min", "r_relative")


def export_curves(
    runs: list[tuple[list[MetricRecord], list[MetricRecord]]], window: int = 1
) -> tuple[list[str], np.ndarray]:
    """Align metric streams by frame count into plot-ready columns.

    Each run is a ``(train, validation)`` pair of records. With one run the
    columns are the raw series plus ``r_relative``; with several, every
    series becomes ``median``/``min``/``max`` columns across runs. Rows are
    the frame counts where a run reports both train and validation
    metrics; all runs must agree on them.
    """
    if not runs:
        raise ValueError("at least one metrics stream is required")
    for train, val in runs:
        if not train or not val:
            raise ValueError("metrics stream is empty")
    frame_sets = []
    for train, val in runs:
        frame_sets.append(sorted({r.frames for r in train} & {r.frames for r in val}))
    frames = frame_sets[0]
    if any(fs != frames for fs in frame_sets[1:]):
        raise ValueError("metric streams report at different frame counts")
    if not frames:
        raise ValueError("train and validation streams share no frame counts")

    per_run = []
    for train, val in runs:
        tr = {r.frames: r for r in train}
        va = {r.frames: r for r in val}
        tmean = smooth([tr[f].mean_return for f in frames], window)
        tmin = smooth([tr[f].min_return for f in frames], window)
        vmean = smooth([va[f].mean_return for f in frames], window)
        vmin = smooth([va[f].min_return for f in frames], window)
        rrel = np.where(tmin > 0, vmin / np.where(tmin > 0, tmin, 1.0), 0.0)
        per_run.append(np.stack([tmean, tmin, vmean, vmin, rrel], axis=1))
    stacked = np.stack(per_run)  # (runs, frames, columns)
    if len(runs) == 1:
        header = ["frames", *CURVE_COLUMNS]
        body = stacked[0]
    else:
        header = ["frames"]
        cols = []
        for j, name in enumerate(CURVE_COLUMNS):
            header += [f"{name}_median", f"{name}_min", f"{name}_max"]
            cols += [np.median(stacked[:, :, j], axis=0), stacked[:, :, j].min(axis=0), stacked[:, :, j].max(axis=0)]
        body = np.stack(cols, axis=1)
    table = np.column_stack([np.array(frames, dtype=float), body])
    return header, table


def write_curves(header: list[str], table: np.ndarray, path: str | Path) -> None:
    lines = [" ".join(header)]
    for row in table:
        lines.append(" ".join([str(int(row[0]))] + [repr(float(x)) for x in row[1:]]))
    Path(path).write_text("\n".join(lines) + "\n")
