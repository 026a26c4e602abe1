"""Audit Solidity contracts for SWC bad practices with retrieval-augmented prompting."""

__version__ = "0.1.0"
