"""mexfuse: memory-efficient cross-modality attention with an instrumented
mini tensor engine, score calibration, and a desk-scale referring pipeline."""

__version__ = "0.1.0"
