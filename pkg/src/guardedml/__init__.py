"""Leakage-aware model evaluation.

Preprocessing is re-estimated inside every resample and applied, frozen, to
the corresponding assessment rows.  Structural guards reject no-holdout
splits, a static auditor rejects transform expressions with external
dependencies, and a Monte Carlo harness quantifies how much apparent
performance global preprocessing buys.
"""

__version__ = "0.1.0"
