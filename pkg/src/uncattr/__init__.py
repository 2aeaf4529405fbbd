"""uncattr: pixel-level attribution of classifier predictive entropy.

A classifier's predictive entropy (and its aleatoric/epistemic parts under
MC dropout) is decomposed over pixels by integrating entropy gradients along
a path from a low-uncertainty counterfactual fiducial to the input image.
Paths may be straight lines in pixel space or curves decoded from latent
space by a variational autoencoder.  The package also ships the evaluation
harness (blur masking, entropy information curves, uncertainty reduction
curves) and a CLI wiring it all together.
"""

__version__ = "0.1.0"

from . import attribution, data, diffcore, evaluation, formats, models, uncertainty

__all__ = [
    "__version__",
    "attribution",
    "data",
    "diffcore",
    "evaluation",
    "formats",
    "models",
    "uncertainty",
]
