"""Pool-based deep active learning workbench for binary flood segmentation."""

__version__ = "0.1.0"
