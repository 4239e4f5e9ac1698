"""SIM(3)-equivariant diffusion policies built on a small numpy autodiff library."""

__version__ = "0.1.0"
