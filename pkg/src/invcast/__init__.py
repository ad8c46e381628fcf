"""Cost-aware demand forecasting for order-up-to inventory systems."""
__version__ = "0.1.0"
