"""Numerical laboratory for edge statistics of random band matrices.

Modules
-------
torus_walk   random walk kernels on the discrete torus (theta functions,
             transition kernels, heat kernel and intersection estimates)
rbm_model    band matrix ensembles, moment constants, eigenvalue baselines
poly_engine  modified and renormalized Chebyshev-type polynomial calculus
nbw_oracle   non-backtracking path sums and exact matrix identities
diagram_lab  diagram enumeration, Symanzik polynomials, diagram integrals
exp_cli      experiment recipes and the rbmlab command line interface
"""

__version__ = "0.1.0"
