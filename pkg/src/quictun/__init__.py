"""TCP tunneling over an encrypted multiplexed UDP transport."""

__version__ = "0.1.0"
