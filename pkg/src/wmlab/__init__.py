"""Desk-scale action-conditioned video world models.

Two generative paradigms over a deterministic synthetic latent world: masked
token modelling with parallel iterative decoding, and flow matching with Euler
sampling. Four transformer block variants (joint attention, split attention,
modality sharing, full sharing) are available in both, backed by a minimal
numpy autodiff engine with finite-difference gradient verification.
"""

__version__ = "0.1.0"
