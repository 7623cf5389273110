"""Cold-start warm-up for CTR models: a learned ID-embedding generator,
six base models, and the full evaluation pipeline."""

from .autodiff import (
    Parameter,
    Tape,
    bce_loss,
    grad,
    hvp,
    primitive_forward,
    sgd_step,
)
from .data import (
    AdGroup,
    FieldSpec,
    Instance,
    SplitSpec,
    WarmupCarve,
    carve_warmup,
    load_movielens,
    sample_meta_pair,
    split_old_new,
    synth_generate,
)
from .metrics import auc, logloss, percentage
from .models import ALL_VARIANTS, BaseModel, RandomInitPolicy, build_model, pretrain

__all__ = [
    "ALL_VARIANTS",
    "AdGroup",
    "BaseModel",
    "FieldSpec",
    "Instance",
    "Parameter",
    "RandomInitPolicy",
    "SplitSpec",
    "Tape",
    "WarmupCarve",
    "auc",
    "bce_loss",
    "build_model",
    "carve_warmup",
    "grad",
    "hvp",
    "load_movielens",
    "logloss",
    "percentage",
    "pretrain",
    "primitive_forward",
    "sample_meta_pair",
    "sgd_step",
    "split_old_new",
    "synth_generate",
]
