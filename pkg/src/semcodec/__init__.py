"""Learned conditional video codec for machine vision consumers.

The package covers the full loop: motion-conditioned compression to a real
entropy-coded bitstream, a semantic decoder aligned with frozen visual
backbones, gated semantic-pixel fusion, a staged training harness, and a
rate-task evaluation kit (BD-rate, sweeps, ablations).
"""

__version__ = "0.1.0"
