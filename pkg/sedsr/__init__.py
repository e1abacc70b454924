"""
SedSR - Semantic-aware Discriminator for Image Super-Resolution
"""

__version__ = "1.0.0"
