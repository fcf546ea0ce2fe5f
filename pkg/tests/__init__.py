"""Test package for openworld_bench modules."""
