"""starlite: scale-wise text-conditioned autoregressive image generation, desk scale.

Pipeline: a synthetic caption->shapes world is pooled into feature maps, quantized
into a coarse-to-fine token pyramid by a residual vector quantizer, and modeled by a
block-causal transformer (normalized 2D rotary positions, prompt cross-attention).
Sampling is either classic top-k/top-p, gumbel-noise argmax, or a mask-head driven
multi-step sampler that re-introduces causality within each scale.
"""

__version__ = "0.1.0"
