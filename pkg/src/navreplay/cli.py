"""``navreplay`` command line: gen-env, train, eval, baseline, plot-data.

Every command is a pure function of its input files, flags and seeds.
Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 I/O error. ``RUN_SEED`` overrides the seeds of a run manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import EnvFactory, RewardLayout, T_MAX, place_rewards
from .evaluation import (
    evaluate,
    export_curves,
    random_walk_baseline,
    relative,
    write_curves,
    write_eval_report,
)
from .graph import (
    GraphError,
    align_validation,
    build_pose_graph,
    generate_synthetic_environment,
    parse_env_spec,
    read_graph,
    read_traversal,
    write_graph,
    write_traversal,
)
from .observation import (
    DEFAULT_SIGMA_POS,
    DEFAULT_SIGMA_ROT,
    EncoderSpec,
    FeatureError,
    encode_synthetic,
    ingest_precomputed_features,
    write_feature_manifest,
)
from .qnet import ParameterSet, read_checkpoint, write_checkpoint
from .trainers import (
    TrainResult,
    TrainerConfig,
    TrainingDiverged,
    config_to_text,
    parse_run_config,
    read_metrics,
    train,
    write_metrics,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
SPLITS = ("train", "validation")
ENV_FILES = (
    "graph.txt",
    "traversal_train.txt",
    "traversal_validation.txt",
    "features_train.txt",
    "features_validation.txt",
)


class ConfigError(ValueError):
    pass


def _seed_override(seed: int) -> int:
    env = os.environ.get("RUN_SEED")
    if env is None or env == "":
        return seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"RUN_SEED must be an integer, got {env!r}") from None


def content_hash(paths: list[Path], prefix: str = "") -> str:
    """sha256 over ``prefix`` and the names and bytes of ``paths``, in order."""
    h = hashlib.sha256(prefix.encode())
    for p in paths:
        h.update(p.name.encode() + b"\0")
        h.update(p.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


# --------------------------------------------------------------------------
# Environments on disk
# --------------------------------------------------------------------------


def write_layout(layout: RewardLayout, path: Path) -> None:
    lines = ["layout v1", f"goal {layout.goal}"] + [f"subgoal {s}" for s in layout.subgoals]
    path.write_text("\n".join(lines) + "\n")


def read_layout(path: Path) -> RewardLayout:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "layout v1":
        raise ConfigError(f"{path}: expected header 'layout v1'")
    goal, subs = None, []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2 or parts[0] not in ("goal", "subgoal"):
            raise ConfigError(f"{path}:{lineno}: expected 'goal N' or 'subgoal N'")
        if parts[0] == "goal":
            goal = int(parts[1])
        else:
            subs.append(int(parts[1]))
    if goal is None:
        raise ConfigError(f"{path}: no goal line")
    return RewardLayout(goal, tuple(subs))


def cmd_gen_env(args) -> int:
    text = Path(args.spec).read_text()
    spec = parse_env_spec(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph, record = generate_synthetic_environment(spec, args.seed)
    aliasing = tuple(tuple(int(x) for x in p.split(",")) for p in args.alias)
    enc = EncoderSpec(d=args.d, aliasing_pairs=aliasing, view_noise=args.view_noise, day_shift=args.day_shift)
    encoder_seed = args.seed if args.encoder_seed is None else args.encoder_seed
    write_graph(graph, out / "graph.txt")
    for split in SPLITS:
        write_traversal(record, out / f"traversal_{split}.txt")
        model = encode_synthetic(enc, graph, encoder_seed, split)
        write_feature_manifest(model, record, out / f"features_{split}.txt")
    lines = [
        "envgen v1",
        f"spec_sha256 {hashlib.sha256(text.encode()).hexdigest()}",
        f"env_seed {args.seed}",
        f"encoder_seed {encoder_seed}",
        f"d {args.d}",
        f"view_noise {args.view_noise!r}",
        f"day_shift {args.day_shift!r}",
        f"nodes {graph.n_nodes}",
    ]
    (out / "envgen.txt").write_text("\n".join(lines) + "\n")
    print(f"{graph.n_nodes} nodes, {len(record.samples)} samples -> {out}")
    return EXIT_OK


@dataclass
class LoadedEnv:
    graph: object
    models: dict
    files: list[Path]
    meta: dict[str, str] = field(default_factory=dict)


def load_env(env_dir: Path, stochastic: bool, sigma_pos: float, sigma_rot: float) -> LoadedEnv:
    """Rebuild the graph from the training traversal and bind both days' features."""
    files = [env_dir / name for name in ENV_FILES]
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"missing environment file {f}")
    stored = read_graph(env_dir / "graph.txt")
    train_rec = read_traversal(env_dir / "traversal_train.txt")
    graph = build_pose_graph(train_rec, stored.spacing, stored.rotation_step)
    if graph != stored:
        raise ConfigError(f"{env_dir}/graph.txt does not match the graph rebuilt from its traversal")
    val_rec = read_traversal(env_dir / "traversal_validation.txt")
    alignment = align_validation(graph, val_rec, graph.spacing / 2)
    kw = dict(sigma_pos=sigma_pos, sigma_rot=sigma_rot, stochastic=stochastic)
    models = {
        "train": ingest_precomputed_features(env_dir / "features_train.txt", graph, train_rec, **kw),
        "validation": ingest_precomputed_features(
            env_dir / "features_validation.txt", graph, val_rec, alignment, **kw
        ),
    }
    meta = {}
    if (env_dir / "envgen.txt").exists():
        for line in (env_dir / "envgen.txt").read_text().splitlines()[1:]:
            k, _, v = line.partition(" ")
            meta[k] = v
    return LoadedEnv(graph, models, files, meta)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

RUN_KEYS = {
    "env_dir": None,
    "out_dir": None,
    "t_max": str(T_MAX),
    "reward_seed": "0",
    "train_seed": "0",
    "eval_seed": "0",
    "stochastic": "true",
    "sigma_pos": repr(DEFAULT_SIGMA_POS),
    "sigma_rot": repr(DEFAULT_SIGMA_ROT),
    "checkpoint_every": "0",
}


@dataclass
class RunManifest:
    """Everything that determines a training run's outputs."""

    config_path: Path
    trainer: TrainerConfig
    env_dir: Path
    out_dir: Path
    t_max: int
    reward_seed: int
    train_seed: int
    eval_seed: int
    stochastic: bool
    sigma_pos: float
    sigma_rot: float
    checkpoint_every: int
    env_seed: str = "?"
    encoder_seed: str = "?"
    input_hash: str = ""

    @classmethod
    def from_file(cls, path: Path) -> "RunManifest":
        trainer, extra = parse_run_config(path.read_text())
        unknown = sorted(set(extra) - set(RUN_KEYS))
        if unknown:
            raise ConfigError(f"{path}: unknown keys {', '.join(unknown)}")
        vals = {k: extra.get(k, d) for k, d in RUN_KEYS.items()}
        for k in ("env_dir", "out_dir"):
            if vals[k] is None:
                raise ConfigError(f"{path}: '{k}' is required")
        base = path.parent
        try:
            m = cls(
                config_path=path,
                trainer=trainer,
                env_dir=(base / vals["env_dir"]),
                out_dir=(base / vals["out_dir"]),
                t_max=int(vals["t_max"]),
                reward_seed=int(vals["reward_seed"]),
                train_seed=_seed_override(int(vals["train_seed"])),
                eval_seed=_seed_override(int(vals["eval_seed"])),
                stochastic=vals["stochastic"].lower() in ("1", "true", "yes"),
                sigma_pos=float(vals["sigma_pos"]),
                sigma_rot=float(vals["sigma_rot"]),
                checkpoint_every=int(float(vals["checkpoint_every"])),
            )
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if m.t_max < 1:
            raise ConfigError(f"{path}: t_max must be >= 1")
        return m

    def result_settings(self) -> str:
        """Settings that determine outputs; directories and checkpoint cadence are excluded."""
        run = [
            f"t_max = {self.t_max}",
            f"reward_seed = {self.reward_seed}",
            f"train_seed = {self.train_seed}",
            f"eval_seed = {self.eval_seed}",
            f"stochastic = {self.stochastic}",
            f"sigma_pos = {self.sigma_pos!r}",
            f"sigma_rot = {self.sigma_rot!r}",
        ]
        return config_to_text(self.trainer) + "\n".join(run) + "\n"

    def text(self) -> str:
        lines = [
            "manifest v1",
            f"config {self.config_path.name}",
            f"env_dir {self.env_dir}",
            f"out_dir {self.out_dir}",
            f"seed_env {self.env_seed}",
            f"seed_encoder {self.encoder_seed}",
            f"seed_reward {self.reward_seed}",
            f"seed_train {self.train_seed}",
            f"seed_eval {self.eval_seed}",
            f"input_sha256 {self.input_hash}",
        ]
        return "\n".join(lines) + "\n"


def _checkpoint_meta(result: TrainResult, m: RunManifest, layout: RewardLayout) -> dict:
    return {
        "frames": result.frames,
        "episodes": result.episodes,
        "algorithm": m.trainer.algorithm,
        "t_max": m.t_max,
        "goal": layout.goal,
        "subgoals": ",".join(str(s) for s in layout.subgoals) or "-",
        "train_seed": m.train_seed,
        "input_sha256": m.input_hash,
    }


def save_run_checkpoint(path: Path, result: TrainResult, m: RunManifest, layout: RewardLayout) -> None:
    opt = ParameterSet(result.params.config, np.asarray(result.optimizer_state, dtype=float).copy())
    write_checkpoint(
        path,
        {"online": result.params, "target": result.target, "rms": opt},
        _checkpoint_meta(result, m, layout),
    )


def layout_from_meta(meta: dict[str, str]) -> RewardLayout:
    subs = () if meta.get("subgoals", "-") == "-" else tuple(int(s) for s in meta["subgoals"].split(","))
    return RewardLayout(int(meta["goal"]), subs)


def cmd_train(args) -> int:
    m = RunManifest.from_file(Path(args.config))
    env = load_env(m.env_dir, m.stochastic, m.sigma_pos, m.sigma_rot)
    m.env_seed = env.meta.get("env_seed", "?")
    m.encoder_seed = env.meta.get("encoder_seed", "?")
    m.input_hash = content_hash(env.files, m.result_settings())
    layout = place_rewards(env.graph, np.random.default_rng(m.reward_seed))
    factory = EnvFactory(env.graph, layout, env.models, m.t_max)
    out = m.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(m.text())
    (out / "config.txt").write_text(config_to_text(m.trainer))

    resume = None
    if args.resume:
        sets, meta = read_checkpoint(Path(args.resume))
        if meta.get("input_sha256") != m.input_hash:
            raise ConfigError(f"{args.resume} was written for different inputs")
        frames = int(meta["frames"])
        resume = TrainResult(
            sets["online"],
            sets["target"],
            [r for r in read_metrics(out / "metrics_train.txt") if r.frames <= frames],
            [r for r in read_metrics(out / "metrics_validation.txt") if r.frames <= frames],
            frames,
            int(meta["episodes"]),
            sets["rms"].flat.copy(),
        )
        if sets["online"].config != m.trainer.network(factory.obs_dim):
            raise ConfigError("checkpoint network does not match the run config")

    def on_checkpoint(result: TrainResult) -> None:
        save_run_checkpoint(out / f"checkpoint_{result.frames:012d}.txt", result, m, layout)
        write_metrics(result.train_metrics, out / "metrics_train.txt")
        write_metrics(result.val_metrics, out / "metrics_validation.txt")

    def on_divergence(result: TrainResult) -> str:
        path = out / "diverged.txt"
        save_run_checkpoint(path, result, m, layout)
        return str(path)

    result = train(
        factory,
        m.trainer,
        m.train_seed,
        resume=resume,
        checkpoint_every=m.checkpoint_every,
        on_checkpoint=on_checkpoint,
        on_divergence=on_divergence,
    )
    save_run_checkpoint(out / "final.txt", result, m, layout)
    write_metrics(result.train_metrics, out / "metrics_train.txt")
    write_metrics(result.val_metrics, out / "metrics_validation.txt")
    last = result.train_metrics[-1] if result.train_metrics else None
    summary = f"frames {result.frames} episodes {result.episodes}"
    if last:
        summary += f" train r_min {last.min_return:.2f} r_mean {last.mean_return:.2f}"
    print(summary)
    return EXIT_OK


# --------------------------------------------------------------------------
# Evaluation and baselines
# --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    sets, meta = read_checkpoint(Path(args.checkpoint))
    params = sets["online"]
    env = load_env(Path(args.env), not args.deterministic, args.sigma_pos, args.sigma_rot)
    layout = layout_from_meta(meta)
    t_max = args.t_max or int(meta.get("t_max", T_MAX))
    factory = EnvFactory(env.graph, layout, env.models, t_max)
    if factory.obs_dim != params.config.input_dim:
        raise ConfigError(
            f"observation length {factory.obs_dim} of {args.env} does not match "
            f"checkpoint input_dim {params.config.input_dim}"
        )
    mode = args.mode or ("sample" if meta.get("algorithm") == "a2c" else "greedy")
    seed = _seed_override(args.seed)
    train_rep = evaluate(params, factory, args.workers, [seed, 0], "train", mode)
    val_rep = relative(train_rep, evaluate(params, factory, args.workers, [seed, 1], "validation", mode))
    train_rep.r_relative = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_report(train_rep, out / "eval_train.txt")
    write_eval_report(val_rep, out / "eval_validation.txt")
    flag = "" if val_rep.r_relative_defined else " (undefined: training r_min is 0)"
    print(
        f"train r_min {train_rep.r_min:.2f} r_mean {train_rep.r_mean:.2f}; "
        f"validation r_min {val_rep.r_min:.2f} r_mean {val_rep.r_mean:.2f}; "
        f"r_relative {val_rep.r_relative:.3f}{flag}"
    )
    return EXIT_OK


def cmd_baseline(args) -> int:
    graph = read_graph(Path(args.env) / "graph.txt") if Path(args.env).is_dir() else read_graph(Path(args.env))
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    if args.layout:
        layout = read_layout(Path(args.layout))
    else:
        layout = place_rewards(graph, np.random.default_rng(args.reward_seed), args.subgoals)
    rng = np.random.default_rng(_seed_override(args.seed))
    rep = random_walk_baseline(graph, layout, args.t_max, args.prior, rng, args.episodes)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_eval_report(rep, Path(args.out))
    print(f"{args.prior} prior: mean return {rep.r_mean:.4f} +/- {rep.stderr:.4f}, r_min {rep.r_min:.2f}")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    runs = []
    for d in args.runs:
        d = Path(d)
        runs.append((read_metrics(d / "metrics_train.txt"), read_metrics(d / "metrics_validation.txt")))
    header, table = export_curves(runs, window=args.window)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_curves(header, table, Path(args.out))
    print(f"{table.shape[0]} rows x {len(header)} columns -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navreplay", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-env", help="generate graph, traversal and feature files from a layout spec")
    g.add_argument("spec")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--encoder-seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--d", type=int, default=8)
    g.add_argument("--view-noise", type=float, default=0.1)
    g.add_argument("--day-shift", type=float, default=0.5)
    g.add_argument("--alias", action="append", default=[], metavar="A,B", help="node pair sharing features")
    g.set_defaults(func=cmd_gen_env)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("config")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on both days")
    e.add_argument("checkpoint")
    e.add_argument("--env", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--workers", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--mode", choices=("greedy", "sample"), default=None)
    e.add_argument("--t-max", type=int, default=None)
    e.add_argument("--deterministic", action="store_true", help="evaluate without observation noise")
    e.add_argument("--sigma-pos", type=float, default=DEFAULT_SIGMA_POS)
    e.add_argument("--sigma-rot", type=float, default=DEFAULT_SIGMA_ROT)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="random-walk baseline")
    b.add_argument("--env", required=True, help="environment directory or graph file")
    b.add_argument("--prior", choices=("uniform", "intersection"), default="intersection")
    b.add_argument("--episodes", type=int, default=100)
    b.add_argument("--t-max", type=int, default=T_MAX)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--reward-seed", type=int, default=0)
    b.add_argument("--subgoals", type=int, default=10)
    b.add_argument("--layout", default=None, help="'layout v1' file overriding --reward-seed")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("plot-data", help="align metrics streams into plot-ready columns")
    c.add_argument("runs", nargs="+", help="run output directories")
    c.add_argument("--out", required=True)
    c.add_argument("--window", type=int, default=10)
    c.set_defaults(func=cmd_plot_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, GraphError, FeatureError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
