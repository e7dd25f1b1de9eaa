"""Semantic IDs for next-POI recommendation: data pipeline, RQ-VAE codebooks, prompts, scoring."""

import os

__version__ = "0.1.0"

_DATA = os.path.join(os.path.dirname(__file__), "data")


def fixture_path():
    """Path to the bundled synthetic check-in log (Foursquare TSV layout)."""
    return os.path.join(_DATA, "fixture_checkins.tsv")
