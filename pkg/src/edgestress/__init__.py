"""Specify, run and measure stress simulations of IoT edge devices talking to a cloud."""

__version__ = "0.1.0"
