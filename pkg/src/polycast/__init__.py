"""Backcasting polytunnel sensor histories from weather data and forecasting weekly yield."""

__version__ = "0.1.0"
