"""List-level domain adaptation for learning to rank."""

__version__ = "0.1.0"

from .trainer import AdversarialRanker, TrainConfig  # noqa: E402

__all__ = ["AdversarialRanker", "TrainConfig", "__version__"]
