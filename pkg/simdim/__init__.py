"""
simdim: dimension diagnostics for self-similar measures.

Exact invariants of finitely supported measures on Sim(R^d), Monte-Carlo
dimension estimation of the self-similar measure, and numerical checks of
the decomposition / variance-summation machinery.
"""

__version__ = "0.1.0"
