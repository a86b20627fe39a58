"""Transitive vision-language prompt learning on a synthetic domain-generalisation benchmark."""

__version__ = "0.1.0"
