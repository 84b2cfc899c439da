"""drift_lab - numerical laboratory for Markov semigroups with divergence-free drift"""

__version__ = "0.3.0"
