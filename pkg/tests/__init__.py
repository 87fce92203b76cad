"""Test suite for h2dilr."""
