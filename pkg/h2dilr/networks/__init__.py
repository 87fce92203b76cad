"""Per-subject ConvNet tokenizers and the transformer neural decoder."""
