"""Convolutional state space models (ConvS5) in NumPy.

Submodules:

- ``tensor``: channels-last 2-D convolution, im2col and kernel algebra
- ``numlin``: Hermitian eigensolver and diagonal matrix exponential
- ``ssm_init``: HiPPO-based initialization and zero-order-hold discretization
- ``scan``: sequential and parallel scans of linear recurrences
- ``layer``: ConvS5 / ConvRNN layers, the stacked model and rollout
- ``oracle``: independent equivalence checks
- ``gradients``: reverse-mode gradients, finite-difference checks, Adam
- ``data``: bouncing-blob videos and image metrics
- ``train``, ``verify``, ``bench``, ``cli``: experiments and the command line
"""

__version__ = "0.1.0"
