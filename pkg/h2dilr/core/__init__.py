"""Core settings, logging, errors and seeded streams."""
