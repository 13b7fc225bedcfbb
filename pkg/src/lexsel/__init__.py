"""lexsel: instance-wise feature selection by latent explanation masks.

Train a selector network that emits a mask distribution over input
features and a predictor that classifies masked-and-imputed inputs, with
pluggable imputation schemes, mask distributions, gradient estimators and
selection regularizers. See README.md for the CLI and library tour.
"""

from lexsel._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
