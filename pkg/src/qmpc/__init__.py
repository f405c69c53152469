"""Model predictive control for quantum state preparation.

Submodules
----------
qcore      density matrices, vectorization, fidelity
dynamics   Liouvillians, bilinear models, exact plant propagation
qpsolver   ADMM quadratic-program solver
mpc        linear MPC, SQP, closed-loop driver
baselines  pi pulses, DRAG, Nelder-Mead, open-loop optimal pulses
scenarios  the numerical experiments
cli        command-line entry point
"""
__version__ = "0.1.0"
