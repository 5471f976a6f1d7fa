"""Driven spin-boson qubit: HEOM dynamics and non-Markovianity diagnostics."""
from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
