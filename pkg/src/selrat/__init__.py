"""Selective rationalization: a generator picks token-level rationales, a
classifier predicts from them, and distribution matching keeps rationale
features and predictions close to those of the full input text."""

__version__ = "0.1.0"
