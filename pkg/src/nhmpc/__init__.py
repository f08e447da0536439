"""Stabilizing-horizon certificates and closed-loop MPC/MHE simulators
for non-holonomic mobile robots."""

__version__ = "0.1.0"
