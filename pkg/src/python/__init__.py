"""
LCM-lookahead - Python Module

Desk-scale encoder personalization with consistency-preview training.
"""

__version__ = "0.1.0"
