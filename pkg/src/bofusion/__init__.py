"""Two-stage Bayesian optimization for checkpoint fusion.

Stage 1 searches the training hyperparameter box with a GP + log-EI loop;
stage 2 searches simplex fusion coefficients with per-objective GPs and a
Monte-Carlo noisy hypervolume-improvement acquisition. A synthetic benchmark
with deliberately misaligned loss/metric landscapes exercises the whole
pipeline end to end.
"""

__version__ = "0.1.0"
