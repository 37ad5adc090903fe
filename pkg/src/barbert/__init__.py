"""Bar-level symbolic music embeddings: REMI+ tokens, joint MLM/NT-Xent training, linear probes."""

__version__ = "0.1.0"
