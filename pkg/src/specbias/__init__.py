"""Modified spectrum kernels and NTK-preconditioned gradient descent."""
__version__ = "0.1.0"
