"""
CochainFEM
==========
Cochain-projection finite elements for first-order Lagrangian field
theories: covariant discrete Euler-Lagrange solves, Cartan and Noether
diagnostics, and the semi-discrete canonical picture.
"""

__version__ = "1.0.0"
