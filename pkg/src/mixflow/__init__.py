"""Mixture-conditioned flow matching workbench.

Library layout:
  nn        minimal reverse-mode autodiff, MLPs, optimizers
  ot        exact assignment pairing and transportation simplex with duals
  base      descriptor-conditioned Gaussian-mixture base distribution
  flow      velocity field, training losses, ODE integration
  training  three-phase planner, alternating trainer, checkpoints
  metrics   MMD / W1 / W2 / energy distance reports
  theory    mixture-transport duality, projection, identification pipeline
  data      letter-rotation benchmark and CSV/JSON population ingestion
  cli       command-line entry points
"""

__version__ = "0.1.0"
