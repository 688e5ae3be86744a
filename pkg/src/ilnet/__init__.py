"""Semi-supervised detection with an IoU-classification branch and balanced
unsupervised regression, at desk scale on synthetic shapes."""

__version__ = "0.1.0"
