"""
Dataflow Compiler Backend - pipeline compiler for affine loop programs
"""

__version__ = "1.0.0"
