"""Shared exception base for the gateway and its components."""


class PrismError(Exception):
    """Base class for every error raised by this package."""
