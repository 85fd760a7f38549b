"""Intermediate parsing training toolkit: biaffine parsing on a small
transformer encoder, sequential fine-tuning, tree decoding, UD evaluation and
linear CKA analysis."""

__version__ = "0.1.0"
