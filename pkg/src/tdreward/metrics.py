"""Metrics and theory checks for learned progress rewards.

Value-order correlation (rank correlation between a trajectory's
cumulative-progress trace and its time indices), success/failure trace
separation, the telescoping identity of potential-based shaping, the
Bellman consistency of the analytic expert potential, and the ablation
experiment matrix.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import agent, envs, persist, reward
from .seeding import child_seed


def value_order_correlation(values):
    """Spearman rank correlation of values against time order, in [-1, 1].

    Ties get average ranks; an all-constant sequence returns 0 by
    convention.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size < 2:
        raise ValueError("need a 1-D sequence of at least 2 values")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite values")
    if np.all(values == values[0]):
        return 0.0
    rho = stats.spearmanr(values, np.arange(1, values.size + 1)).statistic
    return float(rho)


@dataclass
class VOCReport:
    per_trajectory: np.ndarray
    mean: float = field(init=False)

    def __post_init__(self):
        self.per_trajectory = np.asarray(self.per_trajectory, dtype=float)
        self.mean = float(np.mean(self.per_trajectory))

    @property
    def count(self):
        return self.per_trajectory.size


def voc_suite(handle, heldout):
    """Value-order correlation of every held-out trajectory's trace."""
    if not heldout:
        raise ValueError("need at least one trajectory")
    scores = [value_order_correlation(handle.value_trace(traj))
              for traj in heldout]
    return VOCReport(np.array(scores))


def separation_score(handle, paired):
    """Fraction of pairs whose success trace ends above the failure trace.

    Ties count as failures.
    """
    if not paired:
        raise ValueError("need at least one (success, failure) pair")
    wins = 0
    for success_traj, failure_traj in paired:
        v_success = handle.value_trace(success_traj)[-1]
        v_failure = handle.value_trace(failure_traj)[-1]
        wins += int(v_success > v_failure)
    return wins / len(paired)


def shaping_identity_check(potentials, gamma):
    """Residual of the telescoping identity for potential-based rewards.

    With r_t = V_t - gamma * V_t+1, the discounted reward sum collapses to
    V_1 - gamma^(T-1) * V_T; the return value is the difference between
    both sides (floating-point rounding of an algebraic zero).
    """
    potentials = np.asarray(potentials, dtype=float)
    if potentials.size < 2:
        raise ValueError("need at least 2 potentials")
    rewards = potentials[:-1] - gamma * potentials[1:]
    horizon = potentials.size
    discounted = float(np.sum(gamma ** np.arange(horizon - 1) * rewards))
    closed = potentials[0] - gamma ** (horizon - 1) * potentials[-1]
    return discounted - closed


def expert_potential(length, gamma):
    """Analytic progress potential of an expert trajectory.

    V_t accumulates the discounted per-step cost 1/(T-1) from t to the
    goal frame, whose potential is 0.
    """
    if length < 2:
        raise ValueError(f"need length >= 2, got {length}")
    step_cost = 1.0 / (length - 1)
    potentials = np.zeros(length)
    for t in range(length - 1):
        potentials[t] = step_cost * np.sum(gamma ** np.arange(length - 1 - t))
    return potentials


def bellman_consistency_check(traj, gamma):
    """One-step Bellman residuals of the analytic expert potential.

    Accepts a trajectory or a bare length; residuals of
    V_t - (1/(T-1) + gamma * V_t+1) vanish for every t.
    """
    length = traj if isinstance(traj, int) else len(traj)
    potentials = expert_potential(length, gamma)
    step_cost = 1.0 / (length - 1)
    return potentials[:-1] - (step_cost + gamma * potentials[1:])


def reversed_transition_mean(handle, trajectories):
    """Mean predicted reward over time-reversed adjacent expert pairs."""
    totals = []
    for traj in trajectories:
        frames = traj.frames.reshape(len(traj), -1)
        totals.append(np.mean(handle.infer_batch(frames[1:], frames[:-1])))
    return float(np.mean(totals))


@dataclass
class AblationBudget:
    """Per-cell training and evaluation sizes for the ablation matrix."""

    train_demos: int = 100
    heldout_demos: int = 100
    epochs: int = 20
    pairs_per_epoch: int = 2_000
    batch_size: int = 16
    failure_pairs: int = 100
    failure_kind: str = "mimic"
    rl_steps: int = 0  # 0 skips the RL arm


@dataclass
class AblationCell:
    task: str
    variant: str
    seed: int
    config_hash: str
    voc_mean: float = float("nan")
    separation: float = float("nan")
    reversed_mean: float = float("nan")
    rl_success: float = float("nan")
    error: str = ""


@dataclass
class AblationMatrix:
    cells: list

    def summary_rows(self):
        """One averaged row per (task, variant), seeds listed."""
        groups = {}
        for cell in self.cells:
            groups.setdefault((cell.task, cell.variant), []).append(cell)
        rows = []
        for (task, variant), cells in sorted(groups.items()):
            ok = [c for c in cells if not c.error]
            seeds = ",".join(str(c.seed) for c in cells)
            if ok:
                rows.append((task, variant, seeds,
                             float(np.mean([c.voc_mean for c in ok])),
                             float(np.mean([c.separation for c in ok])),
                             float(np.mean([c.reversed_mean for c in ok])),
                             float(np.mean([c.rl_success for c in ok]))))
            else:
                rows.append((task, variant, seeds, float("nan"),
                             float("nan"), float("nan"), float("nan")))
        return rows


def _config_hash(payload):
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_ablation_matrix(tasks, variants, seeds, budget, out_dir=None):
    """Train and score every (task, variant, seed) cell; failures don't abort.

    Cell artifacts (checkpoint, per-trajectory traces) and the summary
    table are persisted when out_dir is given.
    """
    if not tasks or not variants:
        raise ValueError("need at least one task and one variant")
    cells = []
    for task in tasks:
        for variant in variants:
            for seed in seeds:
                cells.append(_run_cell(task, variant, seed, budget, out_dir))
    matrix = AblationMatrix(cells)
    if out_dir is not None:
        _write_matrix(out_dir, matrix)
    return matrix


def _run_cell(task, variant, seed, budget, out_dir):
    cfg = reward.config_for_variant(
        variant, epochs=budget.epochs, pairs_per_epoch=budget.pairs_per_epoch,
        batch_size=budget.batch_size, rng_seed=child_seed(seed, "cell",
                                                          task, variant))
    cell = AblationCell(task=task, variant=variant, seed=seed,
                        config_hash=_config_hash(
                            {"task": task, "variant": variant, "seed": seed,
                             "cfg": vars(cfg), "budget": vars(budget)}))
    try:
        train = envs.generate_demos(task, budget.train_demos,
                                    child_seed(seed, "ablate-train", task))
        heldout = envs.generate_demos(task, budget.heldout_demos,
                                      child_seed(seed, "ablate-heldout",
                                                 task))
        handle = reward.train_reward_model(train, cfg)
        cell.voc_mean = voc_suite(handle, heldout).mean
        kind = budget.failure_kind if task != "reach" else "frozen_half"
        pairs = envs.paired_failure_demos(
            task, budget.failure_pairs, child_seed(seed, "ablate-fail",
                                                   task), kind)
        cell.separation = separation_score(handle, pairs)
        cell.reversed_mean = reversed_transition_mean(handle, heldout)
        if budget.rl_steps > 0:
            rl_cfg = agent.RLConfig.toy(max_steps=budget.rl_steps,
                                        rng_seed=child_seed(seed, "ablate-rl",
                                                            task, variant))
            _, curve = agent.train_policy(task, handle, rl_cfg)
            cell.rl_success = curve[-1][1]
        if out_dir is not None:
            cell_dir = os.path.join(out_dir,
                                    f"{task}-{variant}-seed{seed}")
            os.makedirs(cell_dir, exist_ok=True)
            reward.save_reward_model(
                os.path.join(cell_dir, "reward_model.trwd"), handle)
            reward.save_metrics_csv(
                os.path.join(cell_dir, "training_metrics.csv"),
                handle.loss_history)
    except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def _write_matrix(out_dir, matrix):
    os.makedirs(out_dir, exist_ok=True)
    lines = ["task,variant,seed,config_hash,voc_mean,separation,"
             "reversed_mean,rl_success,error"]
    for c in matrix.cells:
        lines.append(f"{c.task},{c.variant},{c.seed},{c.config_hash},"
                     f"{c.voc_mean!r},{c.separation!r},{c.reversed_mean!r},"
                     f"{c.rl_success!r},{c.error}")
    persist.atomic_write_text(os.path.join(out_dir, "ablation_cells.csv"),
                              "\n".join(lines) + "\n")
    lines = ["task,variant,seeds,voc_mean,separation,reversed_mean,"
             "rl_success"]
    for task, variant, seeds, voc, sep, rev, rl in matrix.summary_rows():
        lines.append(f"{task},{variant},\"{seeds}\",{voc!r},{sep!r},"
                     f"{rev!r},{rl!r}")
    persist.atomic_write_text(os.path.join(out_dir, "ablation_summary.csv"),
                              "\n".join(lines) + "\n")


def save_traces_csv(path, traces):
    """Per-trajectory value traces as (trajectory, t, value) rows."""
    lines = ["trajectory,t,value"]
    for i, trace in enumerate(traces):
        lines += [f"{i},{t + 1},{v!r}" for t, v in enumerate(trace)]
    persist.atomic_write_text(path, "\n".join(lines) + "\n")


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b")


def traces_to_svg(path, traces, labels=None, width=640, height=360):
    """Line chart of value traces as a standalone SVG file."""
    traces = [np.asarray(t, dtype=float) for t in traces]
    if not traces:
        raise ValueError("need at least one trace")
    pad = 40
    lo = min(t.min() for t in traces)
    hi = max(t.max() for t in traces)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    longest = max(len(t) for t in traces)

    def sx(i):
        return pad + (width - 2 * pad) * i / max(1, longest - 1)

    def sy(v):
        return height - pad - (height - 2 * pad) * (v - lo) / (hi - lo)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
             f'y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" '
             f'y2="{height - pad}" stroke="black"/>']
    if lo <= 0.0 <= hi:
        parts.append(f'<line x1="{pad}" y1="{sy(0):.2f}" '
                     f'x2="{width - pad}" y2="{sy(0):.2f}" '
                     f'stroke="#cccccc" stroke-dasharray="4 3"/>')
    for k, trace in enumerate(traces):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        points = " ".join(f"{sx(i):.2f},{sy(v):.2f}"
                          for i, v in enumerate(trace))
        parts.append(f'<polyline points="{points}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        if labels:
            parts.append(f'<text x="{width - pad + 4}" '
                         f'y="{sy(trace[-1]):.2f}" font-size="11" '
                         f'fill="{color}">{labels[k]}</text>')
    parts.append(f'<text x="{pad}" y="{pad - 8}" font-size="12">'
                 f'value trace</text>')
    parts.append("</svg>")
    persist.atomic_write_text(path, "\n".join(parts) + "\n")
