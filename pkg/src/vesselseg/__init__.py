"""Desk-scale segmentation toolkit: polygon annotations to trained vessel masks.

Everything is built from first principles on top of numpy so each numerical
component can be checked against an independent oracle (brute-force
rasterization, finite-difference gradients, metric identities).
"""

__version__ = "0.1.0"
