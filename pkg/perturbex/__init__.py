"""perturbex - inpainting-based perturbation engine for object detector explanations."""

__version__ = "0.1.0"

# Bumped whenever records.jsonl / summary.json / wire payload layouts change.
SCHEMA_VERSION = "1"
