"""Desk-scale laboratory for entity-aware causal language modeling.

A small, fully deterministic stack: a tape-based tensor engine, a
character-level tokenizer, annotated dialogue corpora with a synthetic
generator, a decoder-only transformer with four-channel input embedding
fusion, prefix-prompt tuning against a frozen backbone, and a trainer
with AdamW, warmup-cosine scheduling and perplexity evaluation.
"""

__version__ = "0.1.0"
