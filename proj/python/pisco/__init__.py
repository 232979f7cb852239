"""Python access to the pisco compression library."""

from ._core import (
    Pipeline,
    PiscoError,
    RunConfig,
    SyntheticWorld,
    Vocabulary,
    bm25_retrieve,
    flops,
    gen_synthetic,
    match_accuracy,
    normalize,
    recall_3gram,
    rouge_l,
    synthetic_vocabulary,
    token_f1,
    token_recall,
    version,
)

__all__ = [
    "Pipeline",
    "PiscoError",
    "RunConfig",
    "SyntheticWorld",
    "Vocabulary",
    "bm25_retrieve",
    "flops",
    "gen_synthetic",
    "match_accuracy",
    "normalize",
    "recall_3gram",
    "rouge_l",
    "synthetic_vocabulary",
    "token_f1",
    "token_recall",
    "version",
]
