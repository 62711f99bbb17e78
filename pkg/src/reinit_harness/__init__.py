"""Desk-scale global-restart recovery runtime and benchmark harness.

A root process supervises per-node daemons, which fork and watch the
worker ranks. On a failure the root either re-initializes the survivors
in place and respawns the lost ranks (Reinit), drives a revoke/shrink/
agree/merge repair (ULFM-style), or tears everything down and relaunches
from file checkpoints (checkpoint-restart).
"""
__version__ = "0.1.0"
