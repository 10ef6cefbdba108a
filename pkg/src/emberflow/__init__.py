"""emberflow: a from-scratch CNN micro-framework for 48x48 emotion recognition.

Heavy submodules (numpy-backed) are imported lazily by the CLI so thread
caps can be applied before the BLAS runtime loads.
"""

__version__ = "0.1.0"
