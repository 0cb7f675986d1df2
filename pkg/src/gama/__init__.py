"""Desk-scale laboratory for feature-space adversarial attacks on
multi-object scene classifiers: a numpy tape engine, synthetic scene
data, small vision models, and an attack/defense evaluation harness."""

__version__ = "0.1.0"
