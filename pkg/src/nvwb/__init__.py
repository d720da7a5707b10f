"""NV-center readout workbench."""
__version__ = "0.1.0"
