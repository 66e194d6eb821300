"""Frequency-domain learning for night-time scene parsing, at desk scale.

Modules:
    tensor     float64 tensors, tape-based gradients, finite-difference checks
    dct        orthonormal block DCT, zigzag ordering, multi-spectral pooling
    freqstats  block-DCT region statistics of images and datasets
    modules    learnable frequency encoder, spatial-frequency fusion, losses
    toynet     small segmentation network with optional frequency branch
    synth      procedural day/night scenes
    train      SGD + poly schedule, mIoU, checkpoints, ablations
"""

__version__ = "0.1.0"
