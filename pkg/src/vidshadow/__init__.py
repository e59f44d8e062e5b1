"""Video shadow removal: multi-branch network, paired-data generator, and tooling."""

__version__ = "0.1.0"
