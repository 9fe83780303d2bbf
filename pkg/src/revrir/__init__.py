"""Joint RIR / reverberant-speech contrastive embeddings for room fingerprinting."""

__version__ = "0.1.0"
