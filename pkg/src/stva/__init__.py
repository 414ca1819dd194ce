"""Graph-structured sparse vector autoregression for county-level case/death forecasting."""

__version__ = "0.1.0"
