"""riskcbf: risk-constrained control barrier function safety filtering.

A sideslip barrier whose derivative distribution (under measurement and load
uncertainty, with an online-learned residual covariance) is constrained through
its Gaussian CVaR, solved by trust-region sequential convex programming over
dense active-set QPs — plus the six-wheel truth plant, scenario harness, and
CLI used to exercise it.
"""

__version__ = "0.1.0"
