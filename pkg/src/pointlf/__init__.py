"""Point-anchored light fields with joint camera refinement and transient-object masking."""

__version__ = "0.1.0"
