"""Feature-level adversarial attacks on frozen self-supervised speech encoders, at toy scale."""

__version__ = "0.1.0"
