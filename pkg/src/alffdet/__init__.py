"""Toy anchor-free head detector with an LSTM-fused auxiliary heatmap branch
and noise-calibrated distribution focal loss, implemented on plain numpy."""

__version__ = "0.1.0"
