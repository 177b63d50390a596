"""Stack-augmented shift-reduce sentence encoders with a batched thin stack,
an entailment pair classifier, a trainer, and a benchmark harness."""

__version__ = "0.1.0"
