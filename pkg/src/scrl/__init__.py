"""Stable contrastive RL at desk scale: goal-conditioned contrastive critics,
a BC-regularized actor, and exact occupancy oracles to check them against."""

__version__ = "0.1.0"
