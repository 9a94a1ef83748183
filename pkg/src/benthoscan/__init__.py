"""Detection, tracking, and counting of benthic invertebrates in ROV survey video."""

__version__ = "0.1.0"
