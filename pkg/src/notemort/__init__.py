"""Mortality prediction from free-text clinical notes.

A desk-scale pipeline: note cleaning, skip-gram embedding pretraining,
cohort construction with dynamic data windows, hierarchical CNN-RNN
models over patient notes, a clinical time-series GRU baseline, their
multi-modal fusion, and grouped cross-validated evaluation. All numerics
run on a small float64 reverse-mode autodiff core; everything is
reproducible from explicit seeds and runnable on synthetic data.
"""

__version__ = "0.1.0"
