"""Recurrent ensemble Q-network with hand-written backpropagation through time.

Architecture: rectified linear embedding of the observation, a recurrent
core (LSTM, or a plain tanh cell for cross-checks), then ``n_heads``
independent dueling output layers. All arrays carry a leading time axis
and a worker (batch) axis: observations are ``(T, B, input_dim)`` and
Q-values ``(T, B, n_heads, n_actions)``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

CELLS = ("lstm", "rnn")


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    embed_dim: int = 64
    recurrent_dim: int = 64
    n_heads: int = 1
    n_actions: int = 3
    cell: str = "lstm"

    def __post_init__(self):
        for name in ("input_dim", "embed_dim", "recurrent_dim", "n_heads", "n_actions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        E, H, K, A = self.embed_dim, self.recurrent_dim, self.n_heads, self.n_actions
        gates = 4 * H if self.cell == "lstm" else H
        return {
            "embed_w": (self.input_dim, E),
            "embed_b": (E,),
            "cell_w": (E + H, gates),
            "cell_b": (gates,),
            "value_w": (K, H),
            "value_b": (K,),
            "adv_w": (K, H, A),
            "adv_b": (K, A),
        }


class ParameterSet:
    """Flat parameter vector with named array views."""

    def __init__(self, config: NetworkConfig, flat: np.ndarray | None = None):
        self.config = config
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in config.shapes().items():
            self.layout[name] = (offset, shape)
            offset += int(np.prod(shape))
        if flat is None:
            flat = np.zeros(offset)
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (offset,):
            raise ValueError(f"expected {offset} parameters, got {flat.shape}")
        self.flat = flat

    @property
    def flat(self) -> np.ndarray:
        return self._flat

    @flat.setter
    def flat(self, value: np.ndarray) -> None:
        self._flat = value
        self._views = {
            name: value[off : off + int(np.prod(shape))].reshape(shape)
            for name, (off, shape) in self.layout.items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __len__(self) -> int:
        return self.flat.size

    def names(self) -> list[str]:
        return list(self.layout)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, self.flat.copy())

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet(self.config)

    def head_slices(self, head: int) -> list[slice]:
        """Flat index ranges belonging to one output head."""
        out = []
        K = self.config.n_heads
        for name in ("value_w", "value_b", "adv_w", "adv_b"):
            offset, shape = self.layout[name]
            per = int(np.prod(shape)) // K
            out.append(slice(offset + head * per, offset + (head + 1) * per))
        return out


def init_params(config: NetworkConfig, seed: int) -> ParameterSet:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.

    Each head's output weights are separate draws, so heads start as
    distinct random Q-functions.
    """
    rng = np.random.default_rng(seed)
    p = ParameterSet(config)
    for name, (_, shape) in p.layout.items():
        if name.endswith("_b"):
            continue
        fan_in = shape[0] if name in ("embed_w", "cell_w") else shape[-2] if name == "adv_w" else shape[-1]
        bound = 1.0 / np.sqrt(fan_in)
        p[name][...] = rng.uniform(-bound, bound, size=shape)
    return p


def zero_state(config: NetworkConfig, batch: int) -> tuple[np.ndarray, np.ndarray]:
    H = config.recurrent_dim
    return np.zeros((batch, H)), np.zeros((batch, H))


def dueling_combine(v, a):
    """Q = V + A - mean(A) over the last (action) axis."""
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    return v[..., None] + a - a.mean(axis=-1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass
class Outputs:
    q: np.ndarray
    v: np.ndarray
    a: np.ndarray


def _as_batch(obs: np.ndarray) -> tuple[np.ndarray, bool]:
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 2:
        return obs[:, None, :], True
    if obs.ndim != 3:
        raise ValueError(f"observations must be (T, in) or (T, B, in), got {obs.shape}")
    return obs, False


def _forward(params: ParameterSet, obs: np.ndarray, state, keep_cache: bool):
    cfg = params.config
    T, B, D = obs.shape
    if D != cfg.input_dim:
        raise ValueError(f"observation length {D} != input_dim {cfg.input_dim}")
    H, K, A = cfg.recurrent_dim, cfg.n_heads, cfg.n_actions
    h, c = state
    if h.shape != (B, H) or c.shape != (B, H):
        raise ValueError(f"recurrent state must be ({B}, {H})")

    pre = obs @ params["embed_w"] + params["embed_b"]
    emb = np.maximum(pre, 0.0)
    Wx = params["cell_w"][: cfg.embed_dim]
    Wh = params["cell_w"][cfg.embed_dim :]
    xz = emb @ Wx + params["cell_b"]

    hs = np.empty((T, B, H))
    cache = {"obs": obs, "pre": pre, "emb": emb, "h0": h, "c0": c}
    if cfg.cell == "lstm":
        gates = np.empty((T, B, 4 * H))
        cs = np.empty((T, B, H))
        for t in range(T):
            z = xz[t] + h @ Wh
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H : 2 * H])
            o = _sigmoid(z[:, 2 * H : 3 * H])
            g = np.tanh(z[:, 3 * H :])
            c = f * c + i * g
            h = o * np.tanh(c)
            gates[t, :, :H], gates[t, :, H : 2 * H] = i, f
            gates[t, :, 2 * H : 3 * H], gates[t, :, 3 * H :] = o, g
            cs[t] = c
            hs[t] = h
        cache.update(gates=gates, cs=cs)
    else:
        for t in range(T):
            h = np.tanh(xz[t] + h @ Wh)
            hs[t] = h
    cache["hs"] = hs

    v = hs @ params["value_w"].T + params["value_b"]
    a = (hs @ params["adv_w"].transpose(1, 0, 2).reshape(H, K * A)).reshape(T, B, K, A)
    a = a + params["adv_b"]
    out = Outputs(dueling_combine(v, a), v, a)
    return out, (h, c), (cache if keep_cache else None)


def _backward(params: ParameterSet, cache, dq=None, dv=None, da=None) -> ParameterSet:
    cfg = params.config
    E, H, K, A = cfg.embed_dim, cfg.recurrent_dim, cfg.n_heads, cfg.n_actions
    obs, hs = cache["obs"], cache["hs"]
    T, B, _ = obs.shape
    dv_tot = np.zeros((T, B, K)) if dv is None else np.array(dv, dtype=float)
    da_tot = np.zeros((T, B, K, A)) if da is None else np.array(da, dtype=float)
    if dq is not None:
        dq = np.asarray(dq, dtype=float)
        dv_tot += dq.sum(axis=-1)
        da_tot += dq - dq.mean(axis=-1, keepdims=True)

    g = ParameterSet(cfg)
    hs2 = hs.reshape(T * B, H)
    dv2 = dv_tot.reshape(T * B, K)
    da2 = da_tot.reshape(T * B, K * A)
    g["value_w"][...] = dv2.T @ hs2
    g["value_b"][...] = dv2.sum(axis=0)
    g["adv_w"][...] = (hs2.T @ da2).reshape(H, K, A).transpose(1, 0, 2)
    g["adv_b"][...] = da2.sum(axis=0).reshape(K, A)
    dh_out = (dv2 @ params["value_w"] + da2 @ params["adv_w"].transpose(0, 2, 1).reshape(K * A, H))
    dh_out = dh_out.reshape(T, B, H)

    Wh = params["cell_w"][E:]
    emb = cache["emb"]
    h_prev = np.concatenate([cache["h0"][None], hs[:-1]], axis=0)
    if cfg.cell == "lstm":
        gates, cs = cache["gates"], cache["cs"]
        c_prev = np.concatenate([cache["c0"][None], cs[:-1]], axis=0)
        dz = np.empty((T, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            i, f = gates[t, :, :H], gates[t, :, H : 2 * H]
            o, gg = gates[t, :, 2 * H : 3 * H], gates[t, :, 3 * H :]
            tc = np.tanh(cs[t])
            dh = dh_out[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz[t, :, :H] = dc * gg * i * (1.0 - i)
            dz[t, :, H : 2 * H] = dc * c_prev[t] * f * (1.0 - f)
            dz[t, :, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
            dz[t, :, 3 * H :] = dc * i * (1.0 - gg * gg)
            dh_next = dz[t] @ Wh.T
            dc_next = dc * f
    else:
        dz = np.empty((T, B, H))
        dh_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh_out[t] + dh_next
            dz[t] = dh * (1.0 - hs[t] * hs[t])
            dh_next = dz[t] @ Wh.T

    G = dz.shape[-1]
    dz2 = dz.reshape(T * B, G)
    g["cell_w"][:E] = emb.reshape(T * B, E).T @ dz2
    g["cell_w"][E:] = h_prev.reshape(T * B, H).T @ dz2
    g["cell_b"][...] = dz2.sum(axis=0)
    demb = (dz2 @ params["cell_w"][:E].T) * (cache["pre"].reshape(T * B, E) > 0)
    g["embed_w"][...] = obs.reshape(T * B, -1).T @ demb
    g["embed_b"][...] = demb.sum(axis=0)
    return g


def forward(params: ParameterSet, config: NetworkConfig | None, obs_sequence, initial_state=None):
    """Q-values for an observation sequence.

    Returns ``(q, final_state)``; ``q`` is ``(T, K, A)`` for a single
    sequence or ``(T, B, K, A)`` for a batch.
    """
    if config is not None and config != params.config:
        raise ValueError("config does not match parameter layout")
    obs, single = _as_batch(obs_sequence)
    state = zero_state(params.config, obs.shape[1]) if initial_state is None else initial_state
    out, final, _ = _forward(params, obs, state, keep_cache=False)
    q = out.q[:, 0] if single else out.q
    return q, final


def forward_outputs(params: ParameterSet, obs: np.ndarray, state, keep_cache: bool = False):
    """Batched forward exposing value and advantage streams (and the BPTT cache)."""
    return _forward(params, obs, state, keep_cache)


def backward_from_cache(params: ParameterSet, cache, dq=None, dv=None, da=None) -> ParameterSet:
    return _backward(params, cache, dq, dv, da)


def backward(
    params: ParameterSet,
    config: NetworkConfig | None,
    obs_sequence,
    initial_state,
    dloss_dq,
    dloss_dv=None,
    dloss_da=None,
) -> ParameterSet:
    """Exact gradient of a scalar loss given its derivative w.r.t. the outputs."""
    if config is not None and config != params.config:
        raise ValueError("config does not match parameter layout")
    obs, single = _as_batch(obs_sequence)
    state = zero_state(params.config, obs.shape[1]) if initial_state is None else initial_state

    def batched(x):
        if x is None:
            return None
        x = np.asarray(x, dtype=float)
        return x[:, None] if single else x

    dq = batched(dloss_dq)
    if dq is not None and dq.shape != (obs.shape[0], obs.shape[1], params.config.n_heads, params.config.n_actions):
        raise ValueError(f"dLoss/dQ has shape {np.shape(dloss_dq)}, incompatible with outputs")
    _, _, cache = _forward(params, obs, state, keep_cache=True)
    return _backward(params, cache, dq, batched(dloss_dv), batched(dloss_da))


def finite_difference_audit(
    params: ParameterSet,
    obs: np.ndarray,
    state,
    dq: np.ndarray,
    dv: np.ndarray | None = None,
    da: np.ndarray | None = None,
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between backprop and central differences.

    The loss is the linear functional ``sum(dq*Q) + sum(dv*V) + sum(da*A)``,
    whose output gradients are exactly ``dq``, ``dv`` and ``da``. Relative
    error per parameter is ``|g - fd| / max(|g|, |fd|, floor)``.
    """

    def loss(p: ParameterSet) -> float:
        out, _, _ = _forward(p, obs, state, keep_cache=False)
        total = float(np.sum(dq * out.q))
        if dv is not None:
            total += float(np.sum(dv * out.v))
        if da is not None:
            total += float(np.sum(da * out.a))
        return total

    _, _, cache = _forward(params, obs, state, keep_cache=True)
    grad = _backward(params, cache, dq, dv, da).flat
    probe = params.copy()
    worst = 0.0
    for i in range(len(probe)):
        orig = probe.flat[i]
        probe.flat[i] = orig + eps
        up = loss(probe)
        probe.flat[i] = orig - eps
        down = loss(probe)
        probe.flat[i] = orig
        fd = (up - down) / (2 * eps)
        err = abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), floor)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def write_checkpoint(path: str | Path, arrays: dict[str, ParameterSet], meta: dict) -> None:
    """Text checkpoint: ``params v1``, ``meta`` lines, then named flat arrays."""
    cfg = next(iter(arrays.values())).config
    lines = ["params v1"]
    for k, v in asdict(cfg).items():
        lines.append(f"config {k} {v}")
    for k, v in meta.items():
        lines.append(f"meta {k} {v}")
    for set_name, p in arrays.items():
        for name in p.names():
            arr = p[name]
            lines.append(f"array {set_name}.{name} " + " ".join(str(s) for s in arr.shape))
            lines.append(" ".join(repr(float(x)) for x in arr.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_checkpoint(path: str | Path) -> tuple[dict[str, ParameterSet], dict[str, str]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "params v1":
        raise ValueError(f"{path}: expected header 'params v1'")
    cfg_kw: dict = {}
    meta: dict[str, str] = {}
    raw: dict[str, dict[str, np.ndarray]] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "config":
            cfg_kw[parts[1]] = parts[2] if parts[1] == "cell" else int(parts[2])
        elif parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "array":
            set_name, name = parts[1].split(".", 1)
            shape = tuple(int(s) for s in parts[2:])
            vals = np.array(lines[i].split(), dtype=float)
            i += 1
            raw.setdefault(set_name, {})[name] = vals.reshape(shape)
        else:
            raise ValueError(f"{path}:{i}: malformed line")
    cfg = NetworkConfig(**cfg_kw)
    out = {}
    for set_name, arrays in raw.items():
        p = ParameterSet(cfg)
        for name in p.names():
            if name not in arrays:
                raise ValueError(f"{path}: array {set_name}.{name} missing")
            p[name][...] = arrays[name]
        out[set_name] = p
    return out, meta
