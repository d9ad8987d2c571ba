from .folds import FoldPlan, make_folds
from .io import FormatError, load_corpus, read_pgm, save_corpus, validate_manifest, write_pgm
from .preprocess import (
    AverageFaces,
    Similarity,
    align_face,
    augment,
    average_faces,
    canonical_keypoints,
    denormalize,
    estimate_similarity,
    hist_equalize,
    normalize,
    preprocess,
    resize,
)
from .synth import (
    EXPRESSION_NAMES,
    NEUTRAL,
    FaceSample,
    identity_factors,
    spurious_training_subset,
    synth_corpus,
)
