"""Counterfactual trajectories from small donor pools.

A spatiotemporal encoder-decoder Transformer trained with donor
pseudo-counterfactual pre-training, plus RSC and MC-NNM linear baselines,
a latent-factor benchmark generator, and an experiment harness.
"""

from .panel import InterventionSpec, Panel, ScalingStats

__version__ = "0.1.0"

__all__ = ["Panel", "InterventionSpec", "ScalingStats", "__version__"]
