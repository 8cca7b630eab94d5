"""Command-line entry point and experiment orchestration.

Subcommands: gen-demos, train-reward, eval, train-policy, ablate.
Exit codes are stable: 0 success, 2 usage or bad config, 3 corrupt
artifact, 4 diverged training, 5 every ablation cell failed.

Configs are flat sectioned key=value text with '#' comments; unknown
sections or keys are hard errors. All randomness flows from the one
[run] seed, split per component, so any stage reruns identically.
Environment overrides: TDREWARD_OUT (default output location) and
TDREWARD_THREADS (BLAS thread count) only.
"""

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import dataclass, fields

_threads = os.environ.get("TDREWARD_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import numpy as np  # noqa: E402

from . import __version__, agent, envs, metrics, persist, reward  # noqa: E402
from .errors import CorruptArtifactError, TrainingDivergedError  # noqa: E402
from .seeding import child_seed  # noqa: E402

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CORRUPT = 3
EXIT_DIVERGED = 4
EXIT_ALL_FAILED = 5


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = ""


@dataclass
class EnvSection:
    task: str = "reach"
    height: int = 12
    width: int = 12
    horizon: int = 0  # 0 means the task's default cap


@dataclass
class EvalSection:
    heldout_demos: int = 100
    failure_pairs: int = 100
    failure_kind: str = "mimic"
    svg_traces: int = 8


@dataclass
class AblateSection:
    tasks: str = "reach"
    variants: str = "full"
    seeds: str = "0"
    train_demos: int = 100
    heldout_demos: int = 100
    epochs: int = 20
    pairs_per_epoch: int = 2000
    batch_size: int = 16
    failure_pairs: int = 100
    failure_kind: str = "mimic"
    rl_steps: int = 0


@dataclass
class ExperimentConfig:
    run: RunSection
    env: EnvSection
    reward: reward.RewardTrainConfig
    rl: agent.RLConfig
    eval: EvalSection
    ablate: AblateSection

    @classmethod
    def defaults(cls):
        return cls(run=RunSection(), env=EnvSection(),
                   reward=reward.RewardTrainConfig(),
                   rl=agent.RLConfig.toy(), eval=EvalSection(),
                   ablate=AblateSection())

    def hash(self):
        payload = {name: vars(getattr(self, name))
                   for name in ("run", "env", "reward", "rl", "eval",
                                "ablate")}
        return persist.checksum64(
            json.dumps(payload, sort_keys=True, default=str).encode())

    def horizon(self):
        return self.env.horizon or None


# per-section keys the harness derives itself and therefore rejects
_RESERVED = {"reward": {"rng_seed"}, "rl": {"rng_seed"}}


def _parse_value(raw, typ, where):
    raw = raw.strip()
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ValueError(f"bad value {raw!r} for {where}") from None


def load_config(path=None):
    """Defaults, optionally overridden by a sectioned key=value file."""
    cfg = ExperimentConfig.defaults()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",),
                                       comment_prefixes=("#",),
                                       interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ValueError(f"malformed config {path}: {exc}") from None
    sections = {"run": cfg.run, "env": cfg.env, "reward": cfg.reward,
                "rl": cfg.rl, "eval": cfg.eval, "ablate": cfg.ablate}
    for section in parser.sections():
        if section not in sections:
            raise ValueError(f"unknown config section [{section}]")
        target = sections[section]
        known = {f.name: f.type for f in fields(target)}
        for key, raw in parser.items(section):
            if key in _RESERVED.get(section, ()) or key not in known:
                raise ValueError(
                    f"unknown config key '{key}' in section [{section}]")
            setattr(target, key, _parse_value(raw, known[key],
                                              f"[{section}] {key}"))
    # re-run validation that normally happens at construction
    for name in ("reward", "rl"):
        getattr(cfg, name).__post_init__()
    return cfg


class _OutputLock:
    """One run per output directory, enforced by an exclusive lock file."""

    def __init__(self, directory):
        os.makedirs(directory, exist_ok=True)
        self.path = os.path.join(directory, ".tdreward.lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ValueError(
                f"output directory is locked by another run: {self.path}"
            ) from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc_info):
        os.close(self.fd)
        os.unlink(self.path)


class _Manifest:
    def __init__(self, out_dir, command, config_hash):
        self.out_dir = out_dir
        self.command = command
        self.config_hash = config_hash
        self.started = time.time()
        self.files = []

    def add(self, path):
        self.files.append(path)

    def write(self):
        finished = time.time()
        entries = [{"path": os.path.relpath(p, self.out_dir),
                    "sha256": persist.file_sha256(p),
                    "bytes": os.path.getsize(p)}
                   for p in sorted(self.files)]
        body = {"tool_version": __version__,
                "command": self.command,
                "config_hash": f"{self.config_hash:#018x}",
                "started_unix": self.started,
                "finished_unix": finished,
                "duration_s": finished - self.started,
                "files": entries}
        persist.atomic_write_text(os.path.join(self.out_dir, "manifest.json"),
                                  json.dumps(body, indent=2) + "\n")


def _resolve_out(args):
    out = args.out or os.environ.get("TDREWARD_OUT")
    if not out:
        raise ValueError("no output location: pass --out or set TDREWARD_OUT")
    return out


def cmd_gen_demos(args):
    if args.n < 1:
        raise ValueError(f"--n must be >= 1, got {args.n}")
    cfg = load_config(args.config)
    out_dir = _resolve_out(args)
    horizon = args.horizon or cfg.horizon()
    with _OutputLock(out_dir):
        manifest = _Manifest(out_dir, "gen-demos", cfg.hash())
        demos = envs.generate_demos(args.task, args.n, args.seed,
                                    horizon=horizon, height=cfg.env.height,
                                    width=cfg.env.width)
        path = os.path.join(out_dir, f"{args.task}_demos.trdm")
        envs.save_demos(path, demos)
        manifest.add(path)
        manifest.write()
    print(f"wrote {len(demos)} {args.task} demos to {path}")
    return EXIT_OK


_ABLATION_FLAGS = {"forward-only": "forward_only",
                   "uniform-intervals": "uniform_intervals",
                   "direct-regression": "direct_regression"}


def cmd_train_reward(args):
    cfg = load_config(args.config)
    out_dir = _resolve_out(args)
    seed = cfg.run.seed if args.seed is None else args.seed
    cfg.reward.rng_seed = child_seed(seed, "reward-train")
    if args.ablation:
        setattr(cfg.reward, _ABLATION_FLAGS[args.ablation], True)
    demos = envs.load_demos(args.demos)
    with _OutputLock(out_dir):
        manifest = _Manifest(out_dir, "train-reward", cfg.hash())
        handle = reward.train_reward_model(demos, cfg.reward)
        model_path = os.path.join(out_dir, "reward_model.trwd")
        metrics_path = os.path.join(out_dir, "training_metrics.csv")
        reward.save_reward_model(model_path, handle)
        reward.save_metrics_csv(metrics_path, handle.loss_history)
        manifest.add(model_path)
        manifest.add(metrics_path)
        manifest.write()
    final = handle.loss_history[-1]
    print(f"trained {cfg.reward.epochs} epochs; "
          f"final train loss {final[1]:.4f}, held-out {final[2]:.4f}")
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args.config)
    out_dir = _resolve_out(args)
    if args.mode in ("voc", "separation"):
        if not args.checkpoint or not args.demos:
            raise ValueError(f"--mode {args.mode} needs --checkpoint "
                             "and --demos")
    with _OutputLock(out_dir):
        manifest = _Manifest(out_dir, f"eval-{args.mode}", cfg.hash())
        if args.mode == "voc":
            _eval_voc(args, cfg, out_dir, manifest)
        elif args.mode == "separation":
            _eval_separation(args, cfg, out_dir, manifest)
        elif args.mode == "bellman":
            _eval_bellman(out_dir, manifest)
        else:
            raise ValueError(f"unknown eval mode {args.mode!r}")
        manifest.write()
    return EXIT_OK


def _eval_voc(args, cfg, out_dir, manifest):
    handle = reward.load_reward_model(args.checkpoint)
    heldout = envs.load_demos(args.demos)
    report = metrics.voc_suite(handle, heldout)
    lines = ["trajectory,voc"]
    lines += [f"{i},{v!r}" for i, v in enumerate(report.per_trajectory)]
    lines.append(f"mean,{report.mean!r}")
    path = os.path.join(out_dir, "voc.csv")
    persist.atomic_write_text(path, "\n".join(lines) + "\n")
    manifest.add(path)
    traces = [handle.value_trace(t) for t in heldout]
    traces_path = os.path.join(out_dir, "value_traces.csv")
    metrics.save_traces_csv(traces_path, traces)
    manifest.add(traces_path)
    if cfg.eval.svg_traces > 0:
        svg_path = os.path.join(out_dir, "value_traces.svg")
        keep = traces[:cfg.eval.svg_traces]
        metrics.traces_to_svg(svg_path, keep,
                              labels=[str(i) for i in range(len(keep))])
        manifest.add(svg_path)
    print(f"VOC mean {report.mean:.4f} over {report.count} trajectories")


def _eval_separation(args, cfg, out_dir, manifest):
    handle = reward.load_reward_model(args.checkpoint)
    demos = envs.load_demos(args.demos)
    task = demos[0].task
    kind = cfg.eval.failure_kind if task != "reach" else "frozen_half"
    pairs = envs.paired_failure_demos(
        task, cfg.eval.failure_pairs,
        child_seed(cfg.run.seed, "eval-failures", task), kind,
        height=cfg.env.height, width=cfg.env.width)
    fraction = metrics.separation_score(handle, pairs)
    lines = ["pair,success_final,failure_final,win"]
    for i, (good, bad) in enumerate(pairs):
        vg = handle.value_trace(good)[-1]
        vb = handle.value_trace(bad)[-1]
        lines.append(f"{i},{vg!r},{vb!r},{int(vg > vb)}")
    lines.append(f"fraction,,,{fraction!r}")
    path = os.path.join(out_dir, "separation.csv")
    persist.atomic_write_text(path, "\n".join(lines) + "\n")
    manifest.add(path)
    print(f"separation {fraction:.3f} over {len(pairs)} pairs "
          f"({kind} failures)")


def _eval_bellman(out_dir, manifest):
    lines = ["horizon,gamma,max_abs_residual"]
    worst = 0.0
    for length in (2, 5, 10, 100):
        for gamma in (0.9, 0.99, 1.0):
            residuals = metrics.bellman_consistency_check(length, gamma)
            peak = float(np.max(np.abs(residuals)))
            worst = max(worst, peak)
            lines.append(f"{length},{gamma},{peak!r}")
    path = os.path.join(out_dir, "bellman.csv")
    persist.atomic_write_text(path, "\n".join(lines) + "\n")
    manifest.add(path)
    print(f"max Bellman residual {worst:.3e}")


def cmd_train_policy(args):
    cfg = load_config(args.config)
    out_dir = _resolve_out(args)
    seed = cfg.run.seed if args.seed is None else args.seed
    if args.alpha is not None:
        cfg.rl.success_weight = args.alpha
    if args.steps is not None:
        cfg.rl.max_steps = args.steps
    cfg.rl.rng_seed = child_seed(seed, "rl-train")
    handle = None
    if not args.sparse_only:
        if not args.checkpoint:
            raise ValueError("pass --checkpoint or --sparse-only")
        handle = reward.load_reward_model(args.checkpoint)
    with _OutputLock(out_dir):
        manifest = _Manifest(out_dir, "train-policy", cfg.hash())
        policy, curve = agent.train_policy(
            args.task, handle, cfg.rl, height=cfg.env.height,
            width=cfg.env.width, horizon=cfg.horizon())
        curve_path = os.path.join(out_dir, "curve.csv")
        policy_path = os.path.join(out_dir, "policy.trqn")
        agent.save_curve_csv(curve_path, curve)
        agent.save_policy(policy_path, policy)
        manifest.add(curve_path)
        manifest.add(policy_path)
        manifest.write()
    print(f"final evaluation success rate {curve[-1][1]:.2f} "
          f"after {curve[-1][0]} steps")
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config)
    out_dir = _resolve_out(args)
    ab = cfg.ablate
    tasks = [t.strip() for t in ab.tasks.split(",") if t.strip()]
    variants = [v.strip() for v in ab.variants.split(",") if v.strip()]
    seeds = [int(s) for s in ab.seeds.split(",") if s.strip()]
    budget = metrics.AblationBudget(
        train_demos=ab.train_demos, heldout_demos=ab.heldout_demos,
        epochs=ab.epochs, pairs_per_epoch=ab.pairs_per_epoch,
        batch_size=ab.batch_size, failure_pairs=ab.failure_pairs,
        failure_kind=ab.failure_kind, rl_steps=ab.rl_steps)
    with _OutputLock(out_dir):
        manifest = _Manifest(out_dir, "ablate", cfg.hash())
        matrix = metrics.run_ablation_matrix(tasks, variants, seeds, budget,
                                             out_dir=out_dir)
        for name in ("ablation_cells.csv", "ablation_summary.csv"):
            manifest.add(os.path.join(out_dir, name))
        for cell in matrix.cells:
            cell_dir = os.path.join(out_dir,
                                    f"{cell.task}-{cell.variant}-"
                                    f"seed{cell.seed}")
            for name in ("reward_model.trwd", "training_metrics.csv"):
                path = os.path.join(cell_dir, name)
                if os.path.exists(path):
                    manifest.add(path)
        manifest.write()
    failures = [c for c in matrix.cells if c.error]
    for cell in failures:
        print(f"cell {cell.task}/{cell.variant}/seed{cell.seed} failed: "
              f"{cell.error}", file=sys.stderr)
    print(f"{len(matrix.cells) - len(failures)}/{len(matrix.cells)} "
          f"cells succeeded")
    return EXIT_ALL_FAILED if len(failures) == len(matrix.cells) else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tdreward",
        description="Progress rewards from temporal distances in "
                    "demonstration frames.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="record scripted expert episodes")
    p.add_argument("--task", required=True, choices=envs.TASKS)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("train-reward", help="fit the progress reward model")
    p.add_argument("--demos", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=sorted(_ABLATION_FLAGS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_reward)

    p = sub.add_parser("eval", help="score a trained model or theory checks")
    p.add_argument("--mode", required=True,
                   choices=("voc", "separation", "bellman"))
    p.add_argument("--checkpoint")
    p.add_argument("--demos")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-policy", help="run RL on the learned reward")
    p.add_argument("--task", required=True, choices=envs.TASKS)
    p.add_argument("--checkpoint")
    p.add_argument("--sparse-only", action="store_true")
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("ablate", help="run the ablation experiment matrix")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CorruptArtifactError as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
