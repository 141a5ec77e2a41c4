"""Tactile safety rewards, reward-weighted flow matching, and tactile
distillation for grasp policies on a synthetic desk-scale bench."""

__version__ = "0.1.0"
