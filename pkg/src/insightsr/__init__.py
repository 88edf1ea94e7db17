"""LLM-guided equation discovery with data-aware insight and idea reflection."""

__version__ = "0.1.0"
