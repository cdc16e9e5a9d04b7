"""Shape-reliability optimization on tetrahedral meshes.

Linear elasticity on P1/P2 Lagrange spaces, LCF and ceramic failure
functionals, velocity-method shape derivatives with adjoints, and
smoothed gradient descent.
"""

__version__ = "0.1.0"
