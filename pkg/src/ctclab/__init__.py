"""CTC sequence-recognition lab: from-scratch encoders, exact CTC loss with
an enumeration oracle, intermediate-CTC training objectives, and a synthetic
desk-scale task."""

__version__ = "0.1.0"
