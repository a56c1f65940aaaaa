"""Weakly supervised tool tracking from presence labels with ConvLSTM heat maps."""

__version__ = "0.1.0"
