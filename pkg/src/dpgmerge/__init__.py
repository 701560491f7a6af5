"""Elite deterministic policy gradients with interpolation and two-step merging.

Subpackages:

* ``nets``     — flat-parameter MLPs, exact backprop, Adam, finite differences
* ``envs``     — point-mass control task, LQR oracle, exact finite-MDP oracles
* ``replay``   — full FIFO replay and elite top-k trajectory buffers
* ``genmodel`` — conditional VAE supplying reference actions
* ``agent``    — TD3 variants and the two gradient-merging rules
* ``nqa``      — noisy-quadratic stationary laws and Monte-Carlo verification
* ``bounds``   — exact verification of surrogate and gradient-bias bounds
* ``cli``      — command-line front end (``dpgmerge``)
"""

from .agent import AgentState, MergeConfig
from .envs import FiniteMdp, PointMassEnv, TabularPolicy
from .nqa import QuadraticSpec

__all__ = [
    "AgentState", "MergeConfig", "FiniteMdp", "PointMassEnv",
    "TabularPolicy", "QuadraticSpec",
]

__version__ = "0.1.0"
