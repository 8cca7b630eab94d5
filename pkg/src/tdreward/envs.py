"""Deterministic grid tasks with image observations and scripted experts.

Three finite-horizon tasks on a small occupancy grid, observed as a
3-channel intensity image (agent / object / goal planes, one unit cell
per present entity):

  reach      move the agent onto the goal cell
  push       shove the object onto the goal cell (Sokoban-style pushes)
  pickplace  attach the object with Interact, carry it, release on goal

Episodes end at success or at the horizon cap. States are plain data;
step/render are pure functions, so instances never share mutable state.
Demonstrations are generated by greedy scripted experts under broad
uniform initial-position sampling and are recorded as frames only.

Demo dataset files use the shared container envelope with magic "TRDM":
task id, trajectory count and grid dims in the header, then per
trajectory its length, success byte, reset seed, and raw little-endian
float32 frames (T x 3 x H x W).
"""

import struct
from collections import deque
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from . import persist
from .errors import CorruptArtifactError, InvalidStateError
from .seeding import child_seed

TASKS = ("reach", "push", "pickplace")

DEFAULT_HEIGHT = 12
DEFAULT_WIDTH = 12

# 2-4x the scripted expert's worst case per task
HORIZON_CAPS = {"reach": 48, "push": 80, "pickplace": 100}


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    INTERACT = 4


_MOVES = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}


@dataclass(frozen=True)
class EnvState:
    task: str
    agent: tuple
    obj: tuple | None
    goal: tuple
    carrying: bool
    t: int
    horizon: int
    height: int
    width: int
    success: bool
    done: bool


@dataclass
class Trajectory:
    """An ordered frame sequence; no actions are stored."""

    frames: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    success: bool
    task: str
    seed: int

    def __len__(self):
        return self.frames.shape[0]


def reset(task, seed, height=DEFAULT_HEIGHT, width=DEFAULT_WIDTH,
          horizon=None):
    """Fresh episode state with broad uniform starts, overlaps rejected.

    For push the object starts strictly interior so every goal stays
    pushable (an object flush against a wall can never be pushed away
    from it).
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")
    if height < 3 or width < 3:
        raise ValueError("grid must be at least 3x3")
    horizon = HORIZON_CAPS[task] if horizon is None else int(horizon)
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    rng = np.random.default_rng(seed)

    def draw(taken, interior=False):
        while True:
            if interior:
                cell = (int(rng.integers(1, height - 1)),
                        int(rng.integers(1, width - 1)))
            else:
                cell = (int(rng.integers(0, height)),
                        int(rng.integers(0, width)))
            if cell not in taken:
                return cell

    agent = draw(())
    if task == "reach":
        obj = None
        goal = draw((agent,))
    else:
        obj = draw((agent,), interior=(task == "push"))
        goal = draw((agent, obj))
    return EnvState(task=task, agent=agent, obj=obj, goal=goal,
                    carrying=False, t=0, horizon=horizon,
                    height=height, width=width, success=False, done=False)


def _in_bounds(cell, state):
    return 0 <= cell[0] < state.height and 0 <= cell[1] < state.width


def step(state, action):
    """Advance one step; returns (state, frame, success, done)."""
    if state.done:
        raise InvalidStateError("episode is done; reset to continue")
    action = Action(action)
    agent, obj, carrying = state.agent, state.obj, state.carrying

    if action == Action.INTERACT:
        if state.task == "pickplace":
            if (not carrying and obj is not None
                    and _manhattan(agent, obj) == 1):
                carrying = True
            elif carrying and agent == state.goal:
                carrying = False
                obj = state.goal
    else:
        dr, dc = _MOVES[action]
        target = (agent[0] + dr, agent[1] + dc)
        if not _in_bounds(target, state):
            target = agent
        if state.task == "push" and target == obj:
            pushed = (obj[0] + dr, obj[1] + dc)
            if _in_bounds(pushed, state):
                obj = pushed
            else:
                target = agent  # object jammed against the wall blocks both
        elif state.task == "pickplace" and not carrying and target == obj:
            target = agent  # object is solid until picked up
        agent = target
        if carrying:
            obj = agent

    if state.task == "reach":
        achieved = agent == state.goal
    elif state.task == "push":
        achieved = obj == state.goal
    else:
        achieved = obj == state.goal and not carrying

    success = state.success or achieved
    t = state.t + 1
    done = success or t >= state.horizon
    new_state = replace(state, agent=agent, obj=obj, carrying=carrying,
                        t=t, success=success, done=done)
    return new_state, render(new_state), success, done


def render(state):
    """Pure occupancy rendering: unit intensity per present entity."""
    frame = np.zeros((3, state.height, state.width), dtype=np.float32)
    frame[0][state.agent] = 1.0
    if state.carrying:
        frame[1][state.agent] = 1.0
    elif state.obj is not None:
        frame[1][state.obj] = 1.0
    frame[2][state.goal] = 1.0
    return frame


def frame_dim(height=DEFAULT_HEIGHT, width=DEFAULT_WIDTH):
    return 3 * height * width


def _manhattan(a, b):
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _greedy_step(src, dst):
    # horizontal axis first, then vertical
    if src[1] != dst[1]:
        return Action.RIGHT if dst[1] > src[1] else Action.LEFT
    return Action.DOWN if dst[0] > src[0] else Action.UP


def _bfs_step(state, src, goal_test, blocked):
    """First action of a shortest path to any cell passing goal_test.

    Expansion order Right, Left, Down, Up is fixed for determinism.
    """
    if goal_test(src):
        return None
    order = (Action.RIGHT, Action.LEFT, Action.DOWN, Action.UP)
    first_action = {src: None}
    queue = deque([src])
    while queue:
        cell = queue.popleft()
        for action in order:
            dr, dc = _MOVES[action]
            nxt = (cell[0] + dr, cell[1] + dc)
            if (not _in_bounds(nxt, state) or nxt in blocked
                    or nxt in first_action):
                continue
            inherited = first_action[cell]
            first_action[nxt] = action if inherited is None else inherited
            if goal_test(nxt):
                return first_action[nxt]
            queue.append(nxt)
    raise InvalidStateError("no path to target")


def scripted_expert(state):
    """Greedy shortest-path policy for the current task."""
    if state.done:
        raise InvalidStateError("expert queried on a done episode")
    if state.task == "reach":
        return _greedy_step(state.agent, state.goal)
    if state.task == "push":
        return _push_expert(state)
    return _pickplace_expert(state)


def _push_expert(state):
    obj, goal = state.obj, state.goal
    if obj[1] != goal[1]:
        dr, dc = _MOVES[Action.RIGHT if goal[1] > obj[1] else Action.LEFT]
        push_action = Action.RIGHT if goal[1] > obj[1] else Action.LEFT
    else:
        dr, dc = _MOVES[Action.DOWN if goal[0] > obj[0] else Action.UP]
        push_action = Action.DOWN if goal[0] > obj[0] else Action.UP
    pusher = (obj[0] - dr, obj[1] - dc)
    if state.agent == pusher:
        return push_action
    return _bfs_step(state, state.agent, lambda c: c == pusher, {obj})


def _pickplace_expert(state):
    if not state.carrying:
        if _manhattan(state.agent, state.obj) == 1:
            return Action.INTERACT
        return _bfs_step(state, state.agent,
                         lambda c: _manhattan(c, state.obj) == 1,
                         {state.obj})
    if state.agent == state.goal:
        return Action.INTERACT
    return _bfs_step(state, state.agent,
                     lambda c: c == state.goal, set())


def rollout_expert(state):
    """Run the scripted expert to episode end; returns (frames, success)."""
    frames = [render(state)]
    while not state.done:
        state, frame, success, _ = step(state, scripted_expert(state))
        frames.append(frame)
    return np.stack(frames), state.success


def generate_demos(task, n, seed, horizon=None, height=DEFAULT_HEIGHT,
                   width=DEFAULT_WIDTH):
    """n successful expert trajectories from distinct derived reset seeds.

    Trajectories end at the success step, so lengths vary per episode.
    An expert failure is a bug and raises instead of being skipped.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    demos = []
    for i in range(n):
        ep_seed = child_seed(seed, "demo", task, i)
        frames, success = rollout_expert(
            reset(task, ep_seed, height=height, width=width, horizon=horizon))
        if not success:
            raise RuntimeError(
                f"scripted expert failed on {task} seed {ep_seed}")
        demos.append(Trajectory(frames=frames, success=True,
                                task=task, seed=ep_seed))
    return demos


def _record_actions(state, actions, stop_on_success=True):
    frames = [render(state)]
    for action in actions:
        if state.done:
            break
        state, frame, success, done = step(state, action)
        frames.append(frame)
        if success and stop_on_success:
            break
    return np.stack(frames), state


def failure_frozen_half(traj):
    """Expert truncated at half progress, final frame held to full length."""
    total = len(traj)
    keep = max(2, (total + 1) // 2)
    frames = np.concatenate(
        [traj.frames[:keep],
         np.repeat(traj.frames[keep - 1:keep], total - keep, axis=0)])
    return Trajectory(frames=frames, success=False, task=traj.task,
                      seed=traj.seed)


def failure_random_policy(task, seed, length, horizon=None,
                          height=DEFAULT_HEIGHT, width=DEFAULT_WIDTH,
                          max_tries=20):
    """Uniform-random rollout from the given reset, resampled until it fails."""
    start = reset(task, seed, height=height, width=width, horizon=horizon)
    for attempt in range(max_tries):
        rng = np.random.default_rng(child_seed(seed, "random-failure",
                                               attempt))
        actions = rng.integers(0, len(Action), size=length - 1)
        frames, state = _record_actions(start, [Action(a) for a in actions])
        if not state.success:
            return Trajectory(frames=frames, success=False, task=task,
                              seed=seed)
    raise RuntimeError("random policy kept succeeding; raise max_tries")


def failure_mimic(task, seed, horizon=None, height=DEFAULT_HEIGHT,
                  width=DEFAULT_WIDTH):
    """Expert-shaped motions displaced away from the object.

    The expert plan is computed against a virtual state whose object (and
    goal, matching the displacement) is shifted, then replayed in the real
    environment: the agent sweeps through the full maneuver without ever
    contacting the real object. Displacements that would touch it are
    rejected.
    """
    if task == "reach":
        raise ValueError("mimic failures need an object-manipulation task")
    start = reset(task, seed, height=height, width=width, horizon=horizon)
    shifts = [(dr, dc)
              for radius in (3, 2, 4, 1)
              for dr, dc in ((0, radius), (0, -radius), (radius, 0),
                             (-radius, 0), (radius, radius),
                             (-radius, -radius))]
    for dr, dc in shifts:
        virtual_obj = (start.obj[0] + dr, start.obj[1] + dc)
        virtual_goal = (start.goal[0] + dr, start.goal[1] + dc)
        if task == "push":
            interior = (1 <= virtual_obj[0] < height - 1
                        and 1 <= virtual_obj[1] < width - 1)
        else:
            interior = _in_bounds(virtual_obj, start)
        if (not interior or not _in_bounds(virtual_goal, start)
                or len({virtual_obj, virtual_goal, start.agent}) < 3):
            continue
        virtual = replace(start, obj=virtual_obj, goal=virtual_goal)
        actions = []
        vstate = virtual
        while not vstate.done:
            action = scripted_expert(vstate)
            actions.append(action)
            vstate, _, _, _ = step(vstate, action)
        if not vstate.success:
            continue
        frames, state = _record_actions(start, actions,
                                        stop_on_success=False)
        if not state.success and state.obj == start.obj:
            return Trajectory(frames=frames, success=False, task=task,
                              seed=seed)
    raise RuntimeError(f"no valid mimic displacement for seed {seed}")


def paired_failure_demos(task, n, seed, kind, horizon=None,
                         height=DEFAULT_HEIGHT, width=DEFAULT_WIDTH):
    """(success, failure) trajectory pairs sharing a reset seed each."""
    if kind not in ("frozen_half", "random", "mimic"):
        raise ValueError(f"unknown failure kind {kind!r}")
    pairs = []
    i = 0
    while len(pairs) < n:
        if i > 20 * n + 100:
            raise RuntimeError("paired failure generation keeps rejecting")
        ep_seed = child_seed(seed, "paired", task, kind, i)
        i += 1
        start = reset(task, ep_seed, height=height, width=width,
                      horizon=horizon)
        frames, success = rollout_expert(start)
        expert = Trajectory(frames=frames, success=success, task=task,
                            seed=ep_seed)
        if kind == "frozen_half":
            failure = failure_frozen_half(expert)
        elif kind == "random":
            failure = failure_random_policy(task, ep_seed, len(expert),
                                            horizon=horizon, height=height,
                                            width=width)
        else:
            try:
                failure = failure_mimic(task, ep_seed, horizon=horizon,
                                        height=height, width=width)
            except RuntimeError:
                continue  # cramped reset; draw another seed
        pairs.append((expert, failure))
    return pairs


def save_demos(path, demos):
    if not demos:
        raise ValueError("refusing to write an empty demo dataset")
    task = demos[0].task
    channels, height, width = demos[0].frames.shape[1:]
    task_bytes = task.encode("ascii")
    payload = [struct.pack("<B", len(task_bytes)), task_bytes,
               struct.pack("<IIII", len(demos), channels, height, width)]
    for traj in demos:
        if traj.task != task or traj.frames.shape[1:] != (channels, height,
                                                          width):
            raise ValueError("demo dataset mixes tasks or frame shapes")
        payload.append(struct.pack("<IBQ", len(traj), int(traj.success),
                                   traj.seed))
        payload.append(
            np.ascontiguousarray(traj.frames, dtype="<f4").tobytes())
    persist.write_container(path, persist.MAGIC_DEMOS, b"".join(payload))


def load_demos(path):
    reader = persist.PayloadReader(
        persist.read_container(path, persist.MAGIC_DEMOS))
    task = reader.take(reader.u8()).decode("ascii")
    count, channels, height, width = (reader.u32(), reader.u32(),
                                      reader.u32(), reader.u32())
    if task not in TASKS or channels != 3:
        raise CorruptArtifactError(f"{path}: unknown task or channel layout")
    demos = []
    for _ in range(count):
        length, success, seed = reader.u32(), reader.u8(), reader.u64()
        raw = reader.take(4 * length * channels * height * width)
        frames = np.frombuffer(raw, dtype="<f4").reshape(
            length, channels, height, width).copy()
        demos.append(Trajectory(frames=frames, success=bool(success),
                                task=task, seed=seed))
    reader.done()
    return demos
