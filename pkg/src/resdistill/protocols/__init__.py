from .crossres import (
    EVAL_RESOLUTIONS,
    CrossResMatrix,
    PairSet,
    cross_resolution_matrix,
    embed_images,
    matrix_from_embeddings,
    parse_resolution,
    read_pair_list,
    resolution_label,
    write_pair_list,
)
from .curves import (
    CmcCurve,
    DetCurve,
    OperatingPoint,
    RocCurve,
    cmc,
    cmc_from_scores,
    det_auc,
    fnir_at_fpir,
    open_set_from_scores,
    open_set_identification,
    rankings_from_scores,
    retrieval_map,
    retrieval_rate,
    roc,
    tar_at_far,
    verification_accuracy,
)
from .templates import (
    DegenerateTemplate,
    ProtocolViolation,
    Template,
    build_template,
    score_matrix,
    similarity,
)

__all__ = [
    "EVAL_RESOLUTIONS",
    "CmcCurve",
    "CrossResMatrix",
    "DegenerateTemplate",
    "DetCurve",
    "OperatingPoint",
    "PairSet",
    "ProtocolViolation",
    "RocCurve",
    "Template",
    "build_template",
    "cmc",
    "cmc_from_scores",
    "cross_resolution_matrix",
    "det_auc",
    "embed_images",
    "fnir_at_fpir",
    "matrix_from_embeddings",
    "open_set_from_scores",
    "open_set_identification",
    "parse_resolution",
    "rankings_from_scores",
    "read_pair_list",
    "resolution_label",
    "retrieval_map",
    "retrieval_rate",
    "roc",
    "score_matrix",
    "similarity",
    "tar_at_far",
    "verification_accuracy",
    "write_pair_list",
]
