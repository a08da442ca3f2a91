"""Python front end for the brainmass core."""

import json as _json

from . import _core
from ._core import (
    ContractError,
    CorruptionError,
    Error,
    FormatError,
    IncompatibleError,
    IoError,
    NumericError,
    ParameterError,
    ShapeError,
    ValidationError,
    drop_count,
    gradcheck,
    oracle_pearson,
    pearson_fc,
    pfc_augment,
    run_embed,
    run_pretrain,
    run_synth,
    synth_cohort,
    version,
)

__version__ = version()


def run_probe(embeddings, out, repeats=10, seed=0):
    return _json.loads(_core.run_probe(str(embeddings), str(out), repeats, seed))


def run_ensemble(classifiers, embeddings, out, mode="zero", support_frac=0.2, seed=0):
    return _json.loads(_core.run_ensemble(str(classifiers), str(embeddings), str(out), mode, support_frac, seed))


def metrics(predictions, labels, positive_label=1):
    return _json.loads(_core.metrics(list(predictions), list(labels), positive_label))
