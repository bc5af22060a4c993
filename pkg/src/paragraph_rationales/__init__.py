"""Hard-attention selection of paragraphs as rationales for multi-label document classification."""

__version__ = "0.1.0"
