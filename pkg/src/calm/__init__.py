"""Target-speaker multi-speaker ASR with dynamic-vocabulary contextual biasing."""

__version__ = "0.1.0"
