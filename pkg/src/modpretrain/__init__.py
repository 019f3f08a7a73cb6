"""Modular pre-training models assembled from configuration files."""

from importlib import resources

__version__ = "0.1.0"

BUNDLED_CONFIGS = ("bert", "beit", "clip", "cove", "elmo", "gpt2", "infersent", "roberta", "s2t", "t5", "vilt", "vit")


def configs_path(name):
    """Filesystem path of a bundled configuration, e.g. ``configs_path("bert")``."""
    return str(resources.files(__package__) / "configs" / f"{name}.json")


def plans_path(name):
    """Filesystem path of a bundled remap plan, e.g. ``plans_path("bert_to_roberta")``."""
    return str(resources.files(__package__) / "plans" / f"{name}.json")
