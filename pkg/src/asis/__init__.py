"""Associative instance and semantic segmentation for small 3D point clouds.

The package is a self-contained CPU pipeline: a minimal reverse-mode
autodiff core (:mod:`asis.autodiff`), a two-branch per-point network
(:mod:`asis.network`), a pull/push embedding loss (:mod:`asis.losses`),
mean-shift grouping plus cross-block instance merging
(:mod:`asis.grouping`), evaluation metrics (:mod:`asis.metrics`), a
synthetic room generator (:mod:`asis.synthgen`), and a trainer with a
matching command line (:mod:`asis.trainer`, :mod:`asis.cli`).
"""

__version__ = "0.1.0"
