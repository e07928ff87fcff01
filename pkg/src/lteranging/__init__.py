"""LTE channel-impulse-response ranging toolkit."""

__version__ = "0.1.0"
