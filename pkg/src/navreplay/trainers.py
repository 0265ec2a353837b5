"""Synchronous multi-worker learners: A2C, n-step Q and bootstrapped n-step Q.

All ``n_workers`` workers start and end their episodes together (episodes
last exactly ``t_max`` steps), advance ``n`` steps against one parameter
snapshot, and then a single gradient update is applied to the shared
network from the whole batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .env import N_ACTIONS, EnvFactory
from .qnet import (
    NetworkConfig,
    ParameterSet,
    backward_from_cache,
    forward_outputs,
    init_params,
    zero_state,
)

ALGORITHMS = ("a2c", "nstep_q", "bootstrap_q")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None = None):
        self.checkpoint = checkpoint
        super().__init__(message if checkpoint is None else f"{message} (state saved to {checkpoint})")


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str = "bootstrap_q"
    gamma: float = 0.99
    n: int = 20
    n_workers: int = 64
    n_heads: int = 10
    p_mask: float = 0.5
    learning_rate: float = 7e-4
    target_sync_interval: int = 10_000
    total_frames: int = 1_000_000
    epsilon_start: float | None = None
    epsilon_end: float | None = None
    epsilon_fraction: float = 0.25
    entropy_weight: float = 0.01
    value_weight: float = 0.5
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    clip_norm: float = 40.0
    embed_dim: int = 64
    recurrent_dim: int = 64
    cell: str = "lstm"
    eval_every: int = 1
    eval_workers: int | None = None
    head_p_mask: tuple[float, ...] | None = None  # per-head override of p_mask

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if not 0 < self.p_mask <= 1:
            raise ValueError("p_mask must lie in (0, 1]")
        if self.n < 1 or self.n_workers < 1 or self.n_heads < 1:
            raise ValueError("n, n_workers and n_heads must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.total_frames < 0:
            raise ValueError("total_frames must be non-negative")
        if self.algorithm != "bootstrap_q" and (self.n_heads != 1 or self.p_mask != 1):
            # single-head learners are the bootstrap learner with one always-on head
            object.__setattr__(self, "n_heads", 1)
            object.__setattr__(self, "p_mask", 1.0)
        if self.head_p_mask is not None:
            probs = tuple(float(x) for x in self.head_p_mask)
            if len(probs) != self.n_heads or not all(0 <= x <= 1 for x in probs):
                raise ValueError("head_p_mask needs n_heads probabilities in [0, 1]")
            object.__setattr__(self, "head_p_mask", probs)
        if self.epsilon_start is None:
            object.__setattr__(self, "epsilon_start", 1.0 if self.algorithm == "nstep_q" else 0.0)
        if self.epsilon_end is None:
            object.__setattr__(self, "epsilon_end", 0.05 if self.algorithm == "nstep_q" else 0.0)

    def network(self, input_dim: int) -> NetworkConfig:
        return NetworkConfig(
            input_dim=input_dim,
            embed_dim=self.embed_dim,
            recurrent_dim=self.recurrent_dim,
            n_heads=self.n_heads,
            n_actions=N_ACTIONS,
            cell=self.cell,
        )

    def mask_probs(self) -> np.ndarray:
        if self.head_p_mask is not None:
            return np.asarray(self.head_p_mask)
        return np.full(self.n_heads, self.p_mask)

    def epsilon(self, frames: int) -> float:
        span = self.epsilon_fraction * self.total_frames
        frac = 1.0 if span <= 0 else min(1.0, frames / span)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


# --------------------------------------------------------------------------
# Targets and losses
# --------------------------------------------------------------------------


def nstep_returns(rewards, bootstrap, gamma: float, done_flags=None) -> np.ndarray:
    """Discounted returns ``R_t = r_t + gamma * R_{t+1}`` with ``R_n = bootstrap``.

    ``done_flags[t]`` marks an episode ending after step ``t``; nothing is
    carried back across it. Trailing axes of ``rewards`` broadcast with
    ``bootstrap``.
    """
    r = np.asarray(rewards, dtype=float)
    n = r.shape[0]
    done = np.zeros(n, dtype=bool) if done_flags is None else np.asarray(done_flags, dtype=bool)
    running = np.asarray(bootstrap, dtype=float)
    out = np.empty((n,) + np.broadcast_shapes(r.shape[1:], running.shape))
    for t in range(n - 1, -1, -1):
        running = r[t] + gamma * np.where(done[t], 0.0, running)
        out[t] = running
    return out


def double_q_bootstrap(online_q, target_q, head: int) -> float:
    """Evaluate the online head's greedy action with the target estimate."""
    online_q = np.asarray(online_q)
    if not 0 <= head < online_q.shape[0]:
        raise IndexError(f"head {head} out of range")
    a = int(np.argmax(online_q[head]))
    return float(np.asarray(target_q)[head][a])


def double_q_bootstrap_batch(online_q: np.ndarray, target_q: np.ndarray) -> np.ndarray:
    """Vectorized form over leading axes: ``(..., K, A) -> (..., K)``."""
    a = np.argmax(online_q, axis=-1)
    return np.take_along_axis(target_q, a[..., None], axis=-1)[..., 0]


def q_loss(q_pred: np.ndarray, actions: np.ndarray, targets: np.ndarray, masks: np.ndarray):
    """Masked squared error on the taken action's Q-value.

    ``q_pred`` is ``(T, B, K, A)``, ``actions`` ``(T, B)``, ``targets``
    ``(T, B, K)`` and ``masks`` ``(B, K)``. Returns ``(loss, dloss/dq)``.
    """
    q_pred = np.asarray(q_pred, dtype=float)
    T, B, K, A = q_pred.shape
    actions = np.asarray(actions)
    taken = np.take_along_axis(q_pred, np.broadcast_to(actions[:, :, None, None], (T, B, K, 1)), axis=-1)[..., 0]
    err = (taken - targets) * np.asarray(masks, dtype=float)[None]
    loss = float(np.sum(err * err))
    dq = np.zeros_like(q_pred)
    np.put_along_axis(dq, np.broadcast_to(actions[:, :, None, None], (T, B, K, 1)), 2.0 * err[..., None], axis=-1)
    return loss, dq


@dataclass
class A2CLoss:
    total: float
    policy: float
    value: float
    entropy: float
    dlogits: np.ndarray
    dvalues: np.ndarray


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def a2c_loss(
    logits: np.ndarray,
    values: np.ndarray,
    actions: np.ndarray,
    returns: np.ndarray,
    entropy_weight: float = 0.01,
    value_weight: float = 0.5,
) -> A2CLoss:
    """Advantage actor-critic loss summed over the batch.

    ``policy = -sum log pi(a) * (R - V)`` with the advantage held fixed,
    ``value = sum (R - V)^2`` and ``entropy = sum H(pi)``; the total is
    ``policy + value_weight * value - entropy_weight * entropy``.
    """
    logits = np.asarray(logits, dtype=float)
    values = np.asarray(values, dtype=float)
    actions = np.asarray(actions)
    logp = log_softmax(logits)
    pi = np.exp(logp)
    adv = np.asarray(returns, dtype=float) - values
    logp_a = np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]
    ent = -(pi * logp).sum(axis=-1)
    policy = float(-(logp_a * adv).sum())
    value = float((adv * adv).sum())
    entropy = float(ent.sum())
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
    dlogits = -adv[..., None] * (onehot - pi)
    dlogits += entropy_weight * pi * (logp + ent[..., None])
    dvalues = -2.0 * value_weight * adv
    total = policy + value_weight * value - entropy_weight * entropy
    return A2CLoss(total, policy, value, entropy, dlogits, dvalues)


# --------------------------------------------------------------------------
# Acting
# --------------------------------------------------------------------------


def act(values: np.ndarray, head: int, rng: np.random.Generator, mode: str = "greedy", epsilon: float = 0.0) -> int:
    """Pick an action.

    ``mode="greedy"``: ``values`` are ``(K, A)`` Q-values (or ``(A,)`` for one
    head); argmax of the active head, lowest index on ties, replaced by a
    uniform action with probability ``epsilon``. ``mode="sample"``:
    ``values`` are policy logits and the action is drawn from their softmax.
    """
    v = np.asarray(values, dtype=float)
    if mode == "greedy":
        row = v if v.ndim == 1 else v[head]
        if rng.random() < epsilon:
            return int(rng.integers(row.shape[-1]))
        return int(np.argmax(row))
    if mode == "sample":
        row = v if v.ndim == 1 else v[head]
        p = np.exp(log_softmax(row))
        u = rng.random()
        return int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1))
    raise ValueError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


class RMSProp:
    """RMSProp with a single squared-gradient accumulator shared by all workers."""

    def __init__(self, size: int, lr: float, decay: float = 0.99, eps: float = 1e-5):
        self.lr, self.decay, self.eps = lr, decay, eps
        self.sq = np.zeros(size)

    def step(self, params: ParameterSet, grad: np.ndarray) -> None:
        self.sq *= self.decay
        self.sq += (1.0 - self.decay) * grad * grad
        params.flat -= self.lr * grad / np.sqrt(self.sq + self.eps)


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.sum(grad * grad)))
    if max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRecord:
    frames: int
    episode_count: int
    mean_return: float
    min_return: float
    loss: float


@dataclass
class TrainResult:
    params: ParameterSet
    target: ParameterSet
    train_metrics: list[MetricRecord] = field(default_factory=list)
    val_metrics: list[MetricRecord] = field(default_factory=list)
    frames: int = 0
    episodes: int = 0
    optimizer_state: np.ndarray | None = None


@dataclass
class RolloutBatch:
    """One synchronous segment: ``n`` steps from every worker."""

    observations: np.ndarray  # (n + 1, B, D); last row is the bootstrap observation
    actions: np.ndarray  # (n, B)
    rewards: np.ndarray  # (n, B)
    done: np.ndarray  # (n,) episode ended after step t
    initial_state: tuple[np.ndarray, np.ndarray]
    heads: np.ndarray  # (B,)
    masks: np.ndarray  # (B, K)


def segment_targets(cfg: TrainerConfig, batch: RolloutBatch, q_online: np.ndarray, q_target: np.ndarray | None):
    """n-step double-Q targets per step, worker and head, ``(n, B, K)``."""
    n = batch.actions.shape[0]
    if batch.done[-1] or q_target is None:
        boot = np.zeros(q_online.shape[1:3])
    else:
        boot = double_q_bootstrap_batch(q_online[n], q_target[n])
    return nstep_returns(batch.rewards[:, :, None], boot, cfg.gamma, batch.done)


def update_from_batch(cfg: TrainerConfig, params: ParameterSet, target: ParameterSet, batch: RolloutBatch):
    """Loss and parameter gradient for one segment."""
    n = batch.actions.shape[0]
    out, _, cache = forward_outputs(params, batch.observations, batch.initial_state, keep_cache=True)
    if cfg.algorithm == "a2c":
        values = out.v[..., 0]
        boot = 0.0 if batch.done[-1] else values[n]
        returns = nstep_returns(batch.rewards, boot, cfg.gamma, batch.done)
        res = a2c_loss(out.a[:n, :, 0], values[:n], batch.actions, returns, cfg.entropy_weight, cfg.value_weight)
        dv = np.zeros_like(out.v)
        da = np.zeros_like(out.a)
        dv[:n, :, 0] = res.dvalues
        da[:n, :, 0] = res.dlogits
        return res.total, backward_from_cache(params, cache, dv=dv, da=da)
    q_target = None
    if not batch.done[-1]:
        q_target = forward_outputs(target, batch.observations, batch.initial_state)[0].q
    targets = segment_targets(cfg, batch, out.q, q_target)
    loss, dq_seg = q_loss(out.q[:n], batch.actions, targets, batch.masks)
    dq = np.zeros_like(out.q)
    dq[:n] = dq_seg
    return loss, backward_from_cache(params, cache, dq=dq)


def draw_head_assignment(rng: np.random.Generator, mask_probs: np.ndarray) -> tuple[int, np.ndarray]:
    """Behavior head (uniform) and per-head data masks for one worker's episode."""
    head = int(rng.integers(len(mask_probs)))
    return head, rng.random(len(mask_probs)) < mask_probs


def _worker_seeds(seed: int, n_workers: int):
    root = np.random.SeedSequence(seed)
    init_seq, *workers = root.spawn(1 + n_workers)
    return int(init_seq.generate_state(1)[0]), workers


def train(
    env_factory: EnvFactory,
    config: TrainerConfig,
    seed: int,
    *,
    resume: TrainResult | None = None,
    checkpoint_every: int = 0,
    on_checkpoint: Callable[[TrainResult], None] | None = None,
    on_divergence: Callable[[TrainResult], str | None] | None = None,
    on_segment: Callable[[RolloutBatch], None] | None = None,
) -> TrainResult:
    """Train on ``env_factory``'s training environment.

    After every ``eval_every`` completed episode rounds a validation round
    is evaluated greedily. Identical seeds give identical metric streams.
    """
    from .evaluation import evaluate

    cfg = config
    obs_dim = env_factory.obs_dim
    net = cfg.network(obs_dim)
    init_seed, worker_seqs = _worker_seeds(seed, cfg.n_workers)
    if resume is None:
        params = init_params(net, init_seed)
        result = TrainResult(params, params.copy())
        opt = RMSProp(len(params), cfg.learning_rate, cfg.rms_decay, cfg.rms_eps)
    else:
        result = resume
        params = result.params
        opt = RMSProp(len(params), cfg.learning_rate, cfg.rms_decay, cfg.rms_eps)
        if result.optimizer_state is not None:
            opt.sq = result.optimizer_state.copy()
        # fresh, resume-specific worker streams keep resumed runs deterministic
        worker_seqs = np.random.SeedSequence([seed, result.frames]).spawn(cfg.n_workers)
    result.optimizer_state = opt.sq
    if cfg.total_frames <= result.frames:
        return result

    B, K = cfg.n_workers, cfg.n_heads
    envs = []
    policy_rngs = []
    for w, ws in enumerate(worker_seqs):
        env_seq, pol_seq = ws.spawn(2)
        envs.append(env_factory.make("train", env_seq))
        policy_rngs.append(np.random.default_rng(pol_seq))
    t_max = env_factory.t_max
    mode = "sample" if cfg.algorithm == "a2c" else "greedy"
    eval_workers = cfg.eval_workers or cfg.n_workers
    last_ckpt = result.frames
    rounds = 0

    while result.frames < cfg.total_frames:
        obs = np.stack([env.reset()[1] for env in envs])
        heads = np.empty(B, dtype=np.int64)
        masks = np.empty((B, K), dtype=bool)
        probs = cfg.mask_probs()
        for b, rng in enumerate(policy_rngs):
            heads[b], masks[b] = draw_head_assignment(rng, probs)
        state = zero_state(net, B)
        t = 0
        returns = np.zeros(B)
        losses = []
        while t < t_max and result.frames < cfg.total_frames:
            remaining = -(-(cfg.total_frames - result.frames) // B)
            n = min(cfg.n, t_max - t, remaining)
            O = np.empty((n + 1, B, obs_dim))
            O[0] = obs
            acts = np.empty((n, B), dtype=np.int64)
            rews = np.empty((n, B))
            init_state = state
            eps = cfg.epsilon(result.frames)
            for k in range(n):
                out, state, _ = forward_outputs(params, O[k : k + 1], state)
                scores = out.a[0] if mode == "sample" else out.q[0]
                for b in range(B):
                    a = act(scores[b], int(heads[b]), policy_rngs[b], mode, eps)
                    acts[k, b] = a
                    _, o = envs[b].step(a)
                    rews[k, b] = o.reward
                    O[k + 1, b] = o.observation
            obs = O[n]
            t += n
            result.frames += n * B
            done = np.zeros(n, dtype=bool)
            done[-1] = t >= t_max
            batch = RolloutBatch(O, acts, rews, done, init_state, heads, masks)
            if on_segment is not None:
                on_segment(batch)
            loss, grad = update_from_batch(cfg, params, result.target, batch)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad.flat)):
                path = on_divergence(result) if on_divergence else None
                raise TrainingDiverged(f"non-finite loss at frame {result.frames}", path)
            g, _ = clip_by_global_norm(grad.flat, cfg.clip_norm)
            opt.step(params, g)
            losses.append(loss)
            returns += rews.sum(axis=0)
            prev = result.frames - n * B
            if cfg.target_sync_interval > 0 and (
                result.frames // cfg.target_sync_interval > prev // cfg.target_sync_interval
            ):
                result.target = params.copy()

        if t < t_max:
            break  # frame budget ran out mid-episode; partial returns are not reported
        rounds += 1
        result.episodes += B
        mean_loss = float(np.mean(losses)) if losses else 0.0
        result.train_metrics.append(
            MetricRecord(result.frames, result.episodes, float(returns.mean()), float(returns.min()), mean_loss)
        )
        last_round = result.frames >= cfg.total_frames
        if cfg.eval_every > 0 and (rounds % cfg.eval_every == 0 or last_round):
            rep = evaluate(
                params, env_factory, eval_workers, seed=[seed, result.frames], split="validation",
                mode=mode,
            )
            result.val_metrics.append(
                MetricRecord(result.frames, result.episodes, rep.r_mean, rep.r_min, mean_loss)
            )
        if on_checkpoint and checkpoint_every > 0 and (
            result.frames - last_ckpt >= checkpoint_every or last_round
        ):
            on_checkpoint(result)
            last_ckpt = result.frames
    return result


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def write_metrics(records: list[MetricRecord], path: str | Path) -> None:
    lines = ["metrics v1"]
    for r in records:
        lines.append(f"{r.frames} {r.episode_count} {r.mean_return!r} {r.min_return!r} {r.loss!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path: str | Path) -> list[MetricRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "metrics v1":
        raise ValueError(f"{path}: expected header 'metrics v1'")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields")
        out.append(MetricRecord(int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]), float(parts[4])))
    return out


def config_to_text(cfg: TrainerConfig, extra: dict | None = None) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _coerce(value: str, kind):
    if value == "None":
        return None
    if kind is bool:
        return value.lower() in ("1", "true", "yes")
    return kind(value)


def parse_run_config(text: str) -> tuple[TrainerConfig, dict[str, str]]:
    """Parse flat ``key = value`` text into a trainer config plus leftover keys."""
    kinds = {
        "algorithm": str, "cell": str, "gamma": float, "p_mask": float, "learning_rate": float,
        "epsilon_start": float, "epsilon_end": float, "epsilon_fraction": float,
        "entropy_weight": float, "value_weight": float, "rms_decay": float, "rms_eps": float,
        "clip_norm": float,
    }
    kw: dict = {}
    extra: dict[str, str] = {}
    names = {f.name for f in fields(TrainerConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "head_p_mask":
            kw[key] = None if value == "None" else tuple(float(x) for x in value.strip("()").split(",") if x.strip())
        elif key in names:
            try:
                kind = kinds.get(key, int)
                kw[key] = _coerce(value, kind) if kind is not int or value == "None" else int(float(value))
            except ValueError:
                raise ValueError(f"line {lineno}: bad value for {key}: {value!r}") from None
        else:
            extra[key] = value
    return TrainerConfig(**kw), extra
