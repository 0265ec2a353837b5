"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The learning criteria (4, 5, 6) share one set of desk-scale training runs,
which take roughly twenty minutes on a single core.
"""

import shutil
import time

import numpy as np
import pytest

from navreplay.cli import main
from navreplay.env import EnvFactory, RewardLayout, place_rewards
from navreplay.evaluation import (
    bound_from_distances,
    evaluate,
    planner_optimal_bound,
    random_walk_baseline,
    relative,
)
from navreplay.graph import (
    corridor_spec,
    generate_synthetic_environment,
    graph_diameter_steps,
    grid_spec,
    map_spec,
    office_spec,
    plus_spec,
    ring_graph,
)
from navreplay.observation import EncoderSpec, encode_synthetic
from navreplay.qnet import NetworkConfig, finite_difference_audit, init_params
from navreplay.trainers import (
    RolloutBatch,
    TrainerConfig,
    double_q_bootstrap,
    nstep_returns,
    segment_targets,
    train,
)

from conftest import ACCEPTANCE_LINES
from oracles import planner_dp, tabular_chain_returns

SEEDS = range(5)
DESK_FRAMES = 1_000_000
DESK_T_MAX = 500


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---- 1: gradient audit -----------------------------------------------------------


def test_criterion_1_gradient_audit():
    start = time.perf_counter()
    worst = 0.0
    runs = 0
    for cell in ("lstm", "rnn"):
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            cfg = NetworkConfig(input_dim=12, embed_dim=6, recurrent_dim=5, n_heads=3, cell=cell)
            p = init_params(cfg, seed)
            p.flat += 0.1 * rng.standard_normal(len(p))
            obs = rng.standard_normal((4, 2, 12))
            state = (0.3 * rng.standard_normal((2, 5)), 0.3 * rng.standard_normal((2, 5)))
            dq = rng.standard_normal((4, 2, 3, 3))
            dv = rng.standard_normal((4, 2, 3))
            da = rng.standard_normal((4, 2, 3, 3))
            worst = max(worst, finite_difference_audit(p, obs, state, dq, dv, da))
            runs += 1
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-4 and elapsed < 60,
           f"max relative error {worst:.2e} over {runs} seeded audits (lstm and rnn), {elapsed:.1f} s")


# ---- 2: target oracle ------------------------------------------------------------


def test_criterion_2_target_oracle():
    worst = 0.0
    gamma, K, A, n = 0.95, 3, 3, 7
    for n_states in range(3, 11):
        rng = np.random.default_rng(n_states)
        q_on = rng.standard_normal((n_states, K, A))
        q_tg = rng.standard_normal((n_states, K, A))
        walk = rng.integers(n_states, size=n + 1)
        rewards = rng.choice([0.0, 0.1, 1.0], size=n)
        done = rng.random(n) < 0.2
        for k in range(K):
            last = walk[n]
            # exhaustive double-Q: online argmax by scanning, target value at it
            best = max(range(A), key=lambda a: (q_on[last, k, a], -a))
            boot_oracle = q_tg[last, k, best]
            boot = double_q_bootstrap(q_on[last], q_tg[last], k)
            worst = max(worst, abs(boot - boot_oracle) / max(abs(boot_oracle), 1e-300))
            want = np.array(tabular_chain_returns(rewards, gamma, boot_oracle, done))
            got = nstep_returns(rewards, boot, gamma, done)
            worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300))))
        batch = RolloutBatch(
            np.zeros((n + 1, 1, 1)), rng.integers(A, size=(n, 1)), rewards[:, None], done,
            (None, None), np.zeros(1, int), np.ones((1, K), bool),
        )
        targets = segment_targets(TrainerConfig(gamma=gamma, n_heads=K), batch,
                                  q_on[walk][:, None], q_tg[walk][:, None])
        for k in range(K):
            boot_oracle = q_tg[walk[n], k, int(np.argmax(q_on[walk[n], k]))]
            want = np.array(tabular_chain_returns(rewards, gamma, boot_oracle, done))
            err = np.abs(targets[:, 0, k] - want) / np.maximum(np.abs(want), 1e-300)
            worst = max(worst, float(err.max()))
    record(2, worst <= 1e-12, f"max relative deviation {worst:.1e} on chains of 3 to 10 states")


# ---- 3: planner arithmetic -------------------------------------------------------


def test_criterion_3_planner_arithmetic():
    bound, _ = bound_from_distances(3000, 227)
    specs = [corridor_spec(k) for k in (2, 5, 11, 20)] + [
        grid_spec(3, 3), grid_spec(4, 6), plus_spec(3), plus_spec(5),
        map_spec(["....", ".##.", "...."]), map_spec(["..#..", ".....", "#...#"]),
    ]
    graphs = [generate_synthetic_environment(s, 0)[0] for s in specs] + [ring_graph(k) for k in (3, 8, 16)]
    checked, mismatches = 0, []
    for gi, g in enumerate(graphs):
        assert g.n_nodes <= 50
        rng = np.random.default_rng(gi)
        for goal in rng.choice(g.n_nodes, size=min(3, g.n_nodes), replace=False):
            for t_max in (1, 9, 40, 123):
                got = planner_optimal_bound(g, RewardLayout(int(goal)), t_max).bound
                if got != planner_dp(g, int(goal), t_max):
                    mismatches.append((gi, int(goal), t_max))
                checked += 1
    record(3, bound == 13 and not mismatches,
           f"bound(3000, 227) = {bound}; dynamic program agrees on {checked - len(mismatches)}/{checked} cases")


# ---- 4, 5, 6: desk-scale learning ------------------------------------------------


def desk_factory(stochastic: bool) -> EnvFactory:
    g, _ = generate_synthetic_environment(grid_spec(6, 6), 0)
    layout = place_rewards(g, np.random.default_rng(0))
    spec = EncoderSpec(d=8, view_noise=0.1, day_shift=0.5)
    models = {s: encode_synthetic(spec, g, 0, s, stochastic=stochastic) for s in ("train", "validation")}
    return EnvFactory(g, layout, models, DESK_T_MAX)


def desk_config(algorithm: str) -> TrainerConfig:
    return TrainerConfig(algorithm=algorithm, n_workers=8, n_heads=10, p_mask=0.5,
                         total_frames=DESK_FRAMES, embed_dim=32, recurrent_dim=32, eval_every=10**9)


@pytest.fixture(scope="module")
def desk_runs():
    """Final train and validation reports for every (algorithm, observation mode, seed)."""
    out = {}
    factories = {True: desk_factory(True), False: desk_factory(False)}
    plan = [(alg, True) for alg in ("bootstrap_q", "nstep_q", "a2c")] + [("bootstrap_q", False)]
    for alg, sto in plan:
        f = factories[sto]
        mode = "sample" if alg == "a2c" else "greedy"
        for seed in SEEDS:
            res = train(f, desk_config(alg), seed)
            tr = evaluate(res.params, f, 8, [seed, 0], "train", mode)
            va = relative(tr, evaluate(res.params, f, 8, [seed, 1], "validation", mode))
            out[alg, sto, seed] = (tr, va)
    bound = planner_optimal_bound(factories[True].graph, factories[True].layout, DESK_T_MAX).bound
    return out, bound


def test_criterion_4_desk_learning(desk_runs):
    runs, bound = desk_runs
    r_min = [runs["bootstrap_q", True, s][0].r_min for s in SEEDS]
    hits = sum(r >= 0.9 * bound for r in r_min)
    record(4, hits >= 4,
           f"{hits}/5 seeds reach 0.9 x bound {bound} = {0.9 * bound:.1f}; train r_min {np.round(r_min, 1).tolist()}")


def test_criterion_5_algorithm_ordering(desk_runs):
    runs, _ = desk_runs
    med = {alg: float(np.median([runs[alg, True, s][1].r_min for s in SEEDS]))
           for alg in ("bootstrap_q", "nstep_q", "a2c")}
    ok = med["bootstrap_q"] > med["nstep_q"] and max(med["nstep_q"], med["bootstrap_q"]) > med["a2c"]
    detail = ", ".join(f"{k} {v:.1f}" for k, v in med.items())
    record(5, ok, f"median validation r_min: {detail}")


def test_criterion_6_stochastic_transfer(desk_runs):
    runs, _ = desk_runs
    sto = float(np.median([runs["bootstrap_q", True, s][1].r_relative for s in SEEDS]))
    det = float(np.median([runs["bootstrap_q", False, s][1].r_relative for s in SEEDS]))
    record(6, sto - det >= 0.1, f"median r_relative stochastic {sto:.3f} vs deterministic {det:.3f}")


# ---- 7: baseline -----------------------------------------------------------------


def test_criterion_7_random_walk_baseline():
    g, _ = generate_synthetic_environment(office_spec(), 0)
    diameter = graph_diameter_steps(g)
    layout = place_rewards(g, np.random.default_rng(0))
    uni = random_walk_baseline(g, layout, 3000, "uniform", np.random.default_rng(0), 100)
    inter = random_walk_baseline(g, layout, 3000, "intersection", np.random.default_rng(0), 100)
    ok = uni.r_mean < 0.1 and inter.r_mean > uni.r_mean
    record(7, ok, f"{g.n_nodes} nodes, diameter {diameter}; mean return uniform {uni.r_mean:.4f}, "
                  f"intersection {inter.r_mean:.4f}")


# ---- 8: reduction ----------------------------------------------------------------


def test_criterion_8_single_head_reduction():
    g, _ = generate_synthetic_environment(grid_spec(3, 3), 0)
    layout = place_rewards(g, np.random.default_rng(0), 3)
    spec = EncoderSpec(d=4, view_noise=0.05, day_shift=0.3)
    models = {s: encode_synthetic(spec, g, 0, s, stochastic=True) for s in ("train", "validation")}
    f = EnvFactory(g, layout, models, 40)
    base = dict(n_workers=4, n=5, embed_dim=8, recurrent_dim=8, total_frames=4000, eval_every=2)
    nstep = TrainerConfig(algorithm="nstep_q", **base)
    boot = TrainerConfig(algorithm="bootstrap_q", n_heads=1, p_mask=1.0,
                         epsilon_start=nstep.epsilon_start, epsilon_end=nstep.epsilon_end, **base)
    same = []
    for seed in (0, 1, 2):
        a, b = train(f, nstep, seed), train(f, boot, seed)
        same.append(a.train_metrics == b.train_metrics and a.val_metrics == b.val_metrics
                    and np.array_equal(a.params.flat, b.params.flat))
    record(8, all(same), f"metrics and parameters identical in {sum(same)}/3 seeds")


# ---- 9: reproducibility ----------------------------------------------------------


def test_criterion_9_cli_reproducibility(tmp_path):
    (tmp_path / "grid.txt").write_text("envspec v1\nspacing 0.1\ngrid 6 6\n")
    assert main(["gen-env", str(tmp_path / "grid.txt"), "--out", str(tmp_path / "env")]) == 0
    (tmp_path / "run.cfg").write_text(
        "env_dir = env\nout_dir = run\nalgorithm = bootstrap_q\nn_workers = 4\nn_heads = 4\n"
        "total_frames = 20000\nt_max = 200\nembed_dim = 16\nrecurrent_dim = 16\n"
        "checkpoint_every = 5000\neval_every = 2\n"
    )
    assert main(["train", str(tmp_path / "run.cfg")]) == 0
    first = {p.name: p.read_bytes() for p in sorted((tmp_path / "run").iterdir())}
    shutil.rmtree(tmp_path / "run")
    assert main(["train", str(tmp_path / "run.cfg")]) == 0
    second = {p.name: p.read_bytes() for p in sorted((tmp_path / "run").iterdir())}
    ok = first == second and len(first) >= 6
    record(9, ok, f"{len(first)} output files byte-identical across two invocations")
