"""BiO-Net, BiO-Net++ and the BiX-NAS skip search on a small numpy autodiff engine."""

__version__ = "0.1.0"
