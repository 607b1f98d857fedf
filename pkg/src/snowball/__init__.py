"""Snowball adversarial patch placement toolkit."""

from .classifier import (
    ClassLabel,
    CNNClassifier,
    Layer,
    ModelWeights,
    RemoteClassifier,
    Verdict,
    cnn_forward,
    load_weights,
    save_weights,
    softmax,
)
from .imaging import Contour, Raster, composite, read_png, transform_patch, write_png
from .mask import BinaryMask, MaskParams, generate_mask, shrink_mask, valid_placements
from .search import (
    AttackResult,
    CandidateScore,
    Patch,
    Placement,
    SearchConfig,
    baseline_search,
    evaluate_candidate,
    optimized_search,
    patch_base_size,
)

__version__ = "0.1.0"
