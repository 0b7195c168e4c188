"""Carrier-compensated amplitude pulses for the Molmer-Sorensen gate in linear ion chains."""
__version__ = "0.1.0"
