"""Desk-scale ensemble reconstruction and uncertainty quantification for a
four-channel optical-path-length-difference inverse problem."""

__version__ = "0.1.0"
