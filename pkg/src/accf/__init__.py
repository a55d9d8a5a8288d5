"""Configurable causally-consistent replicated key-value store engine.

The engine runs inside a deterministic discrete-event network simulator and
ships with a ground-truth consistency checker and a workload harness for
comparing replica-grouping strategies.
"""

__version__ = "0.1.0"
