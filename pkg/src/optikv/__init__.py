"""Quorum-replicated key-value store with runtime monitoring of global predicates."""

__version__ = "0.1.0"
