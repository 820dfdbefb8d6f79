"""Certified-stable multi-area recurrent networks.

Library layout:

- numerics: power-iteration eigen/norm estimates, Gaussian elimination
- subnets: sparse subnetwork sampling and per-area contraction certificates
- topology: inter-area adjacency builders, layouts, parameter counting
- coupling: coupling parameterizations and the network-level certificate check
- dynamics: assembled network, Euler simulation, Jacobians
- training: batched BPTT, optimizers, the training loop, gradient checking
- datasets: image/sequence loading and synthetic tasks
- analysis: evaluation, ablations, pruning
- config / checkpoint / reporting / cli: experiment plumbing
"""

__version__ = "0.1.0"
