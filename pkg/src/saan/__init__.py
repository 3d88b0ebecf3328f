"""Scale-aware attention network for crowd counting.

A self-contained package: numpy-backed tensor ops with hand-written
analytic gradients, density-map data tooling, the four-subnet model,
training/evaluation loops, and a command line front end.
"""

__version__ = "0.1.0"
