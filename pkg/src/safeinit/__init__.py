"""Safe initial controllers for data-driven ADP via kernelized Lipschitz learning."""

__version__ = "0.1.0"
