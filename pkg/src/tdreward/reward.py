"""Training pipeline for the temporal-distance reward model.

Pairs are drawn per sample: a demonstration uniformly at random, then an
interval-weighted (optionally backward) index pair inside it. Targets
are the normalized signed distances encoded as two-hot weights; training
minimizes softmax cross entropy by mini-batch Adam. The trained model is
returned frozen and exposes per-step reward inference plus cumulative
value traces.

Ablations mirror the training variants: forward_only restricts targets
to (0, 1], uniform_intervals removes the exponential interval bias, and
direct_regression swaps the two-hot head for one scalar trained by
squared error (clamped to [-1, 1] at inference only).
"""

from dataclasses import dataclass, field

import numpy as np

from . import codec, nets, persist
from .errors import TrainingDivergedError
from .seeding import child_seed, rng_for


@dataclass
class RewardTrainConfig:
    epochs: int = 100
    pairs_per_epoch: int = 10_000
    batch_size: int = 16
    learning_rate: float = 1e-3
    interval_decay: float = 0.1
    num_bins: int = 20
    embed_dim: int = 64
    hidden: tuple = (128, 128)
    smooth_sigma: float = 2.0  # 0 disables the fixed frame smoothing
    forward_only: bool = False
    uniform_intervals: bool = False
    direct_regression: bool = False
    heldout_pairs: int = 512
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "pairs_per_epoch", "batch_size", "num_bins",
                     "embed_dim", "heldout_pairs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def sampler(self):
        return codec.PairSamplerConfig(
            decay=self.interval_decay,
            negative_sampling=not self.forward_only,
            uniform_intervals=self.uniform_intervals,
            rng_seed=self.rng_seed)


ABLATION_VARIANTS = ("full", "forward_only", "uniform_intervals",
                     "direct_regression")


def config_for_variant(variant, **overrides):
    """RewardTrainConfig with the named ablation flag set."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant != "full":
        overrides[variant] = True
    return RewardTrainConfig(**overrides)


class RewardModelHandle:
    """A frozen progress model plus its codec; inference only."""

    def __init__(self, model, loss_history=None):
        self.model = model
        self.scalar_head = model.head_width == 1
        self.codec = (None if self.scalar_head
                      else codec.TwoHotCodec(model.head_width))
        self.loss_history = list(loss_history or [])
        self.frozen = True

    def infer(self, frame_now, frame_next):
        """Predicted per-step progress reward in [-1, 1]; pure."""
        return float(self.infer_batch(frame_now[None, ...],
                                      frame_next[None, ...])[0])

    def infer_batch(self, frames_now, frames_next):
        out = self.model.pair_logits(_flatten(frames_now),
                                     _flatten(frames_next))
        if self.scalar_head:
            return np.clip(out[:, 0], -1.0, 1.0)
        return np.atleast_1d(self.codec.decode(out))

    def value_trace(self, traj):
        """Cumulative progress along a trajectory, anchored at 0."""
        frames = _flatten(traj.frames)
        if frames.shape[0] < 2:
            raise ValueError("trajectory shorter than 2 frames")
        rewards = self.infer_batch(frames[:-1], frames[1:])
        return np.concatenate([[0.0], np.cumsum(rewards)])


class OracleRewarder:
    """Ground-truth stand-in: exact normalized distance per adjacent pair.

    Identical consecutive frames get reward 0 (no progress), anything else
    the trajectory's own per-step distance 1 / (T - 1).
    """

    frozen = True

    def value_trace(self, traj):
        frames = traj.frames.reshape(len(traj), -1)
        if frames.shape[0] < 2:
            raise ValueError("trajectory shorter than 2 frames")
        moved = np.any(frames[1:] != frames[:-1], axis=1)
        rewards = moved / (len(traj) - 1)
        return np.concatenate([[0.0], np.cumsum(rewards)])


def _flatten(frames):
    frames = np.asarray(frames, dtype=np.float64)
    return frames.reshape(frames.shape[0], -1)


def train_reward_model(demos, cfg):
    """Fit the progress model on demonstrations; returns a frozen handle.

    Loss history rows are (epoch, mean train loss, held-out loss) where the
    held-out loss is measured on one fixed pair set drawn up front.
    """
    if not demos:
        raise ValueError("need at least one demonstration")
    for traj in demos:
        if len(traj) < 2:
            raise ValueError("every demonstration needs >= 2 frames")

    flat = [_flatten(traj.frames) for traj in demos]
    frame_dim = flat[0].shape[1]
    head_width = 1 if cfg.direct_regression else cfg.num_bins
    smoothing = None
    if cfg.smooth_sigma > 0:
        channels, height, width = demos[0].frames.shape[1:]
        smoothing = nets.FrameSmoothing(channels, height, width,
                                        cfg.smooth_sigma)
    model = nets.ProgressModel(
        frame_dim, embed_dim=cfg.embed_dim, hidden=cfg.hidden,
        head_width=head_width, smoothing=smoothing,
        seed=child_seed(cfg.rng_seed, "reward-init"))
    target_codec = codec.TwoHotCodec(cfg.num_bins)
    sampler = cfg.sampler()
    optimizer = nets.Adam(model.params, lr=cfg.learning_rate)

    held_a, held_b, held_d = _draw_pair_batch(
        flat, sampler, rng_for(cfg.rng_seed, "reward-heldout"),
        cfg.heldout_pairs)
    held_targets = (held_d if cfg.direct_regression
                    else target_codec.encode_batch(held_d))

    loss_fn = (nets.pair_squared_loss_and_grads if cfg.direct_regression
               else nets.pair_loss_and_grads)
    rng = rng_for(cfg.rng_seed, "reward-pairs")
    history = []
    steps = max(1, cfg.pairs_per_epoch // cfg.batch_size)
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(steps):
            a, b, d = _draw_pair_batch(flat, sampler, rng, cfg.batch_size)
            targets = (d if cfg.direct_regression
                       else target_codec.encode_batch(d))
            loss, grads = loss_fn(model, a, b, targets)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}")
            optimizer.step(model.params, grads)
            total += loss
        held_loss = _eval_loss(model, held_a, held_b, held_targets,
                               cfg.direct_regression)
        history.append((epoch, total / steps, held_loss))
    return RewardModelHandle(model, loss_history=history)


def _draw_pair_batch(flat_demos, sampler, rng, size):
    """One batch: demo chosen uniformly, then a pair inside it."""
    picks = rng.integers(0, len(flat_demos), size=size)
    first = np.empty((size, flat_demos[0].shape[1]))
    second = np.empty_like(first)
    distances = np.empty(size)
    for row, demo_idx in enumerate(picks):
        frames = flat_demos[demo_idx]
        pair = codec.sample_pair(frames.shape[0], sampler, rng)
        first[row] = frames[pair.u - 1]
        second[row] = frames[pair.v - 1]
        distances[row] = codec.normalized_distance(pair)
    return first, second, distances


def _eval_loss(model, frames_a, frames_b, targets, scalar):
    out = model.pair_logits(frames_a, frames_b)
    if scalar:
        return float(np.mean((out[:, 0] - targets) ** 2))
    return nets.cross_entropy_loss(out, targets)


def infer_reward(handle, frame_now, frame_next):
    return handle.infer(frame_now, frame_next)


def value_trace(handle, traj):
    return handle.value_trace(traj)


@dataclass
class StepRewardReport:
    """Adjacent expert-pair reward statistics against the ideal 1/(T-1)."""

    means: np.ndarray
    stds: np.ndarray
    ratios: np.ndarray  # mean reward / (1 / (T - 1)) per trajectory
    median_ratio: float = field(init=False)

    def __post_init__(self):
        self.median_ratio = float(np.median(self.ratios))


def expert_step_reward_check(handle, heldout):
    """Per-trajectory mean/dispersion of adjacent rewards on held-out demos."""
    if not heldout:
        raise ValueError("need at least one held-out trajectory")
    means, stds, ratios = [], [], []
    for traj in heldout:
        rewards = np.diff(handle.value_trace(traj))
        ideal = 1.0 / (len(traj) - 1)
        means.append(float(np.mean(rewards)))
        stds.append(float(np.std(rewards)))
        ratios.append(means[-1] / ideal)
    return StepRewardReport(np.array(means), np.array(stds),
                            np.array(ratios))


def save_reward_model(path, handle):
    nets.save_progress_model(path, handle.model)


def load_reward_model(path):
    return RewardModelHandle(nets.load_progress_model(path))


def save_metrics_csv(path, history):
    lines = ["epoch,train_loss,heldout_loss"]
    lines += [f"{e},{tr!r},{he!r}" for e, tr, he in history]
    persist.atomic_write_text(path, "\n".join(lines) + "\n")
