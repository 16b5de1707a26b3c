"""Random walks in a Markovian dynamic environment.

Exact path laws, transfer-operator limits (drift, diffusion matrix) and Monte
Carlo checks of the annealed and quenched central limit theorems.
"""

__version__ = "0.1.0"

from .model import ModelSpec, ChainAnalysis, validate_model, load_model, builtin_model

__all__ = ["ModelSpec", "ChainAnalysis", "validate_model", "load_model", "builtin_model",
           "__version__"]
