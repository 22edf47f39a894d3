"""Probabilistically compact loss with logit constraints: training, attacks, analyses."""

__version__ = "0.1.0"
