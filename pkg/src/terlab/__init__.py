"""Token entropy regularization for multi-modal antenna to PCI matching."""

__version__ = "0.1.0"
