"""Shared pytest configuration.

Keeping this file here also guarantees the tests directory is importable,
so test modules can pull independent reference implementations from
reference_impls.py.
"""
