"""Simulation and analysis of a polarization-encoded decoy-state BB84 link.

The package covers the full chain of a chip-based link: photon-level event
generation, clock and frame recovery from the detections themselves,
closed-loop polarization compensation and the one-decoy finite-key rate.
"""

__version__ = "0.1.0"
