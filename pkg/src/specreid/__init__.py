"""Multi-spectral vehicle re-identification in plain numpy.

Shared-trunk transformer features per spectrum, a fused proxy
representation, quality-ranked cross-attention enhancement, and the
metric-learning training / retrieval-evaluation loop around them.
"""

__version__ = "0.1.0"
