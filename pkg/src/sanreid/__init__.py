"""Vehicle re-identification with horizontal stripe features and attribute supervision."""

__version__ = "0.1.0"
