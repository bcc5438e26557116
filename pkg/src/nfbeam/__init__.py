"""Near-field XL-MIMO beam management engine.

Submodules
----------
sysgeo
    Array geometry, synthetic scenes, trajectories and GPS noise.
channel
    Spherical-wavefront multipath channels and noisy pilot reception.
codebook
    Polar-domain codebook, index bijection, gain/rate and the exhaustive oracle.
predictor
    Multimodal encoders, position-guided attention, causal backbone and heads.
training
    Soft targets, confidence targets, the loss stack and the training loop.
inference
    Confidence-gated refinement and budget-capped beam-training baselines.
dataset, metrics, experiment, cli
    Dataset generation, evaluation metrics, experiment orchestration, CLI.
"""

__version__ = "0.1.0"
