"""Simulation lab for the semidiscrete directed polymer on Z^d x R."""

__version__ = "0.1.0"
REPORT_VERSION = "1"
