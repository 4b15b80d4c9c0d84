"""Joint IoT upload-energy and edge-compute optimisation."""

__version__ = "0.1.0"
