"""Progress-based proxy rewards from temporal distances in demo frames.

Submodules:
  codec    normalized temporal distances, two-hot coding, pair sampling
  nets     MLP machinery with analytic gradients and Adam
  envs     toy grid tasks, scripted experts, demonstration datasets
  reward   reward-model training and frozen inference
  agent    value-based RL on the combined proxy + sparse reward
  metrics  VOC, trace separation, shaping/Bellman checks, ablations
  cli      command-line harness (gen-demos / train-reward / eval /
           train-policy / ablate)

Submodule imports are lazy so the CLI can configure BLAS threading
before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("agent", "cli", "codec", "envs", "errors", "metrics", "nets",
               "persist", "reward", "seeding")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
