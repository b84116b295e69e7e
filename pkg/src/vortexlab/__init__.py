"""Mixed-sign viscous point vortices on the unit torus.

Periodic Biot-Savart kernels, a two-species stochastic point vortex
simulator, pseudo-spectral 2D Navier-Stokes, the tensorized vorticity
equation on T^2 x T^2 and a harness measuring propagation of chaos.
"""

__version__ = "0.1.0"
