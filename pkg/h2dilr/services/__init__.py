"""Data, optimisation, checkpoints, training pipeline and probes."""
