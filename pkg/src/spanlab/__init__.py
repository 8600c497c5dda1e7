"""spanlab: a laboratory for learning set functions under adversarial permutations."""

from spanlab.tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = ["GradTape", "Tensor", "__version__"]
