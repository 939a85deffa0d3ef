"""Two-stage generative speech enhancement: a semantic-token language model
that purifies tokens from degraded audio, and a flow-matching mel infiller
guided by those tokens, plus the degradation-simulation, inference and
evaluation machinery around them."""

__version__ = "0.1.0"
