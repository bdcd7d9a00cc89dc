"""aligncal: audits, constructions, and repairs for confidence functions
in AI-assisted binary decision making."""

__version__ = "0.1.0"
