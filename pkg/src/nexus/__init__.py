"""Decoupled serverless I/O testbed.

Keep this module import-light: sandbox guest processes import the package
on their startup critical path.
"""

__version__ = "0.1.0"
