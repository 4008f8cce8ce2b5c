"""Positional bias in list-selection retrieval, measured and mitigated on a toy transformer.

Submodules:

* ``diffcore``: reverse-mode autodiff over numpy, with a finite-difference oracle
* ``model``: decoder-only toy transformer with soft-token prefixes and slot prediction
* ``tasks``: synthetic retrieval tasks, biased slot distributions, permutation augmentation
* ``adapters``: location-encoding, prompt-tuning and low-rank adapters
* ``trainer``: pretraining and frozen-base adapter fine-tuning
* ``bias_eval``: position sweeps, fluctuation, report artifacts
* ``prompts`` and ``probe``: prompt construction and chat-endpoint probing
* ``cli``: the ``posbias`` command
"""

from .bias_eval import BiasReport, fluctuation, probe_positions
from .adapters import AdapterSpec, count_tunable
from .tasks import TaskConfig, gen_dataset, gen_instance, permute_augment

__all__ = [
    "AdapterSpec",
    "BiasReport",
    "TaskConfig",
    "count_tunable",
    "fluctuation",
    "gen_dataset",
    "gen_instance",
    "permute_augment",
    "probe_positions",
]
__version__ = "0.1.0"
