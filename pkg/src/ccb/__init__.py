"""Content and context debiasing for prior-shifted visual question answering.

Numpy implementation with numba-accelerated kernels (set ``CCB_DISABLE_NUMBA=1``
for the pure-numpy path), a synthetic prior-shift benchmark, training,
evaluation, ablation and a ``ccb`` command line.
"""
__version__ = "0.1.0"
