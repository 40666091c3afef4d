"""Frame voting and cross-layer refinement for speech deepfake detection, on numpy.

Modules: ``tensor`` (autodiff), ``encoder`` (MHSA blocks), ``mhv`` (frame
voting), ``clr`` (cross-layer refinement), ``model``, ``data``, ``cli``.
"""
__version__ = "0.1.0"
