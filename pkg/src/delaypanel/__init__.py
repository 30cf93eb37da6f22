"""Route-month delay panels, Hausman-type instruments and GMM/LIML estimation."""

__version__ = "0.1.0"
