"""Shared exception base for the pipeline."""


class PrognosisError(Exception):
    """Base class for all pipeline errors."""
