"""Synthetic generators and timed experiments."""

from .experiments import EXPERIMENTS, run_experiment, timed
from .generators import SyntheticSpec, gen_cache_users, gen_chain, gen_micro, gen_planted, zipf_sequence

__all__ = ["EXPERIMENTS", "run_experiment", "timed", "SyntheticSpec", "gen_cache_users", "gen_chain",
           "gen_micro", "gen_planted", "zipf_sequence"]
