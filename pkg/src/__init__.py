"""dml-seq2seq - deep mutual learning for Transformer sequence-to-sequence models."""

__version__ = "0.1.0"
