"""Deterministic speech-token transport simulator.

Pipeline: synthetic latent features -> toy residual vector quantizer ->
importance-driven transmission masks with in-band redundancy -> cross-chunk
interleaving and bit-exact packetization -> seeded lossy channels -> causal
packet loss concealment -> token/bitrate/latency metrics.
"""

__version__ = "0.1.0"
