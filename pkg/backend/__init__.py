"""
Backend package for FieldSight dynamic farmland segmentation
"""

__version__ = "0.1.0"
