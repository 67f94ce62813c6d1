"""Two-stage natural-language object grounding on synthetic desk scenes."""

__version__ = "0.1.0"
