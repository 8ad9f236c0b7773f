"""Trust-region policy optimization: an exact tabular track and a sampled
track with std-augmented acceptance ratios."""
from .envs import chain, gridworld, lq_scalar, make_env, point_mass_1d, point_mass_2d
from .gaussian_policy import CategoricalPolicyParams, GaussianPolicyParams, MeanModelSpec
from .mdp_core import Mdp, TabularPolicy, evaluate, random_mdp, value_iteration
from .stro_driver import StroConfig, run_stro
from .tabular_tr import TrConfig, run

__version__ = "0.1.0"

__all__ = [
    "CategoricalPolicyParams",
    "GaussianPolicyParams",
    "MeanModelSpec",
    "Mdp",
    "StroConfig",
    "TabularPolicy",
    "TrConfig",
    "chain",
    "evaluate",
    "gridworld",
    "lq_scalar",
    "make_env",
    "point_mass_1d",
    "point_mass_2d",
    "random_mdp",
    "run",
    "run_stro",
    "value_iteration",
]
