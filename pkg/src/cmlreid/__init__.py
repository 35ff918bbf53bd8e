"""Lifelong person re-identification with context-aware prompts and
state-aware projection, on a synthetic same-cloth / cloth-changing world."""

__version__ = "0.1.0"
