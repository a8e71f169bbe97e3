"""Few-shot segmentation with enhanced features and reconstructed 4D correlations."""

__version__ = "0.1.0"
