"""qgrec: quantized latent-factor graphs for sequential recommendation.

Pipeline: semantic vectors per user/item (pluggable providers) are residual-
quantized into multi-level factor codes; the codes become extra graph nodes
linking users and items; metapath-guided attention propagation produces
graph-enhanced representations that feed a sequential recommender.
"""

__version__ = "0.1.0"

from .numerics import Rng, precision, set_precision

__all__ = [
    "Rng",
    "precision",
    "set_precision",
    "__version__",
]
