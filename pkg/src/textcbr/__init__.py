"""Case-based reasoning for template-action text games, with a synthetic benchmark."""
from __future__ import annotations

__version__ = "0.1.0"
