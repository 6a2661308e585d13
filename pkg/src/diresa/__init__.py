"""Distance-regularized Siamese twin autoencoders and baselines, in numpy."""

__version__ = "0.1.0"
