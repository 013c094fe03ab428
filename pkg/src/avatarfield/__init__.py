"""Differentiable point and tri-plane neural field engine for expression-driven head avatars."""

__version__ = "0.1.0"
