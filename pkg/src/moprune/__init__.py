"""Multi-objective one-shot pruning of dense layers.

Blends the layer-wise reconstruction objective with an empirical-Fisher
second-order objective into per-row quadratic problems, inverts them with a
shared-base Woodbury update, and prunes with OBS-family algorithms.
"""

__version__ = "0.1.0"
