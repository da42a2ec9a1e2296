"""Urban region graphs, subgraph-centric embedding pre-training, and graph prompts."""

__version__ = "0.1.0"
