"""Deterministic functional simulator of the Arm CCA security model emulated
on non-RME hardware, with a cost-calibrated benchmark harness."""

__version__ = "0.1.0"
