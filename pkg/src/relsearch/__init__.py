"""Agentic SQL feature-program search over relational databases."""

__version__ = "0.1.0"
