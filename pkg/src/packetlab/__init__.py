"""packetlab: uncertainty measurements of neural loss packets.

Trains small image classifiers with a from-scratch reverse-mode autodiff
engine, perturbs them with gradient attacks, and measures conjugate-pair
spreads (dx, dp) of normalized 1-D loss slices over input dimensions.
"""

from . import attacks, autodiff, data, nn, packet, runner, synthdata, uncertainty

__all__ = ["attacks", "autodiff", "data", "nn", "packet", "runner",
           "synthdata", "uncertainty"]

__version__ = "0.1.0"
