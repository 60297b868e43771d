"""Desk-scale Swin Transformer pipeline for knee osteoarthritis KL grading."""
__version__ = "0.1.0"
