"""Desk-scale open-vocabulary segmentation pipeline on synthetic feature pyramids."""

__version__ = "0.1.0"
