"""rflow: partition-function ratios across replica-gluing defects.

Lattice phi^4 fields on n-fold replica geometries, with four routes to
the ratio Z(l+1)/Z(l) of partition functions at neighboring defect
lengths: equilibrium heatbath reweighting, nonequilibrium work averages
(Jarzynski), defect-conditioned normalizing flows, and stochastic
normalizing flows interleaving the two.  Exact Gaussian-determinant and
tiny-lattice quadrature oracles validate every estimator at desk scale.
"""

__version__ = "0.1.0"
