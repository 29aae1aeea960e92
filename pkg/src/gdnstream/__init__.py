"""Streaming frame generation with a hybrid softmax / gated-delta attention layer.

Submodules:

* ``numerics``    fixed-order matmul with MAC counting, softmax, RoPE, norms
* ``attention``   projections, KV cache and the full-history softmax baseline
* ``gdn``         the gated delta rule: sequential and chunkwise kernels
* ``hybrid``      the hybrid layer, its access policies and serialization
* ``streaming``   toy denoiser, frame-by-frame generation and the cost model
* ``autodiff``    reverse-mode engine used for training
* ``distill``     per-layer and joint distillation
* ``selection``   recovery rates, protection scores, replacement sets
* ``cli``         the ``gdnstream`` command
"""

__version__ = "0.1.0"
