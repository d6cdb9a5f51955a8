"""Verifier-guided selection of step-by-step reasoning chains."""

from __future__ import annotations

__version__ = "0.1.0"
