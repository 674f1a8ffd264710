"""Test suite for the option-decomposition library."""
