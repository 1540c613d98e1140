"""Offline RL data augmentation with value-guided generative transitions."""

__version__ = "0.1.0"

from .augment import HipodeAugmenter, HipodeModels, SyntheticTransitions, filter_lambda, merge, train_models  # noqa: E402
from .config import RunConfig  # noqa: E402
from .cvae import ConditionalVAE  # noqa: E402
from .data import TransitionDataset, derive_seed, load, save  # noqa: E402
from .dynamics import GaussianDynamics  # noqa: E402
from .envs import BehaviorPolicySpec, EnvSpec, collect, make_env, oracle_value  # noqa: E402
from .policy import TD3BC, evaluate, normalized_score  # noqa: E402
from .value import NegativeSamplingValue  # noqa: E402

__all__ = [
    "ConditionalVAE",
    "BehaviorPolicySpec",
    "EnvSpec",
    "GaussianDynamics",
    "HipodeAugmenter",
    "HipodeModels",
    "NegativeSamplingValue",
    "RunConfig",
    "SyntheticTransitions",
    "TD3BC",
    "TransitionDataset",
    "collect",
    "derive_seed",
    "evaluate",
    "filter_lambda",
    "load",
    "make_env",
    "merge",
    "normalized_score",
    "oracle_value",
    "save",
    "train_models",
]
