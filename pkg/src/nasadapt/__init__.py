"""Differentiable backbone adaptation at desk scale.

Relaxes a MobileNetV2-style backbone into a supernet over operation and
channel-width candidates, trains it with a cost-regularized alternating
schedule, collapses the result to a discrete architecture, and remaps
source parameters onto it.
"""

__version__ = "0.1.0"
