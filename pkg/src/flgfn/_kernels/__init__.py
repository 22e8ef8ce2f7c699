"""Compiled numerical kernels.

The extension modules in this package are optional. :mod:`flgfn.kernels`
selects them at import time and falls back to pure Python when they are
missing.
"""
