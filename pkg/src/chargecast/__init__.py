"""chargecast: EV charging demand forecasting and federated training testbed."""

__version__ = "0.1.0"
