# SPDX-License-Identifier: Apache-2.0
"""Python bindings for the lgen C++ core."""

from ._lgen import (
    Generator,
    ave_har,
    builtin_tasks,
    compression_ratio,
    cv_aux_loss,
    detokenize,
    format_fewshot,
    gates_keeptopk,
    load_checkpoint,
    load_entropy,
    make_examples,
    run_cli,
    tokenize,
)

__all__ = [
    "Generator",
    "ave_har",
    "builtin_tasks",
    "compression_ratio",
    "cv_aux_loss",
    "detokenize",
    "format_fewshot",
    "gates_keeptopk",
    "load_checkpoint",
    "load_entropy",
    "make_examples",
    "run_cli",
    "tokenize",
]
