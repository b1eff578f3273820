"""Learning fine-grained answer spans from fine and coarse QA supervision."""

__version__ = "0.1.0"
