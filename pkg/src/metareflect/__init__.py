"""Small-noise analysis of diffusions with co-normal reflection.

Reflected SDE simulation, Freidlin-Wentzell quasipotentials between boundary
equilibria, the hierarchy of cycles and the long-time limit of the Neumann
parabolic problem.
"""

__version__ = "0.1.0"
