"""AC power flow, reactive dispatch optimization, and learned dispatch models."""

__version__ = "0.1.0"
