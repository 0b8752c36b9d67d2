"""Recurrent grid solvers that extrapolate from small training grids.

The package provides a from-scratch autodiff core (`exlab.tensor`), the
recurrent solver architecture (`exlab.model`), synthetic task generators
with exact oracles (`exlab.tasks`), a curriculum trainer (`exlab.training`),
an iteration-sweep evaluation harness (`exlab.evaluation`), and almost
stochastic order significance tooling (`exlab.stats`). The `exlab` console
script exposes the whole pipeline.
"""

__version__ = "0.1.0"
