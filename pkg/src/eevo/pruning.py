"""Per-token vocabulary pruning of the unembedding matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .errors import InvalidInputError


@dataclass(frozen=True)
class PrunedVocab:
    """The ``K`` retained token ids and their rows of ``W`` (a copy)."""

    token_ids: np.ndarray
    W_t: np.ndarray
    source_exit: int | None = None

    @property
    def size(self) -> int:
        return int(self.token_ids.shape[0])


def prune(W: np.ndarray, logits: np.ndarray, k: int, source_exit: int | None = None) -> PrunedVocab:
    """Keep the rows of ``W`` belonging to the ``k`` highest logits.

    Row order follows :func:`eevo.core.top_k`: descending logit, ties by
    lower token id.
    """
    W = core.as_matrix(W, "W")
    logits = core.as_vector(logits, "logits")
    if logits.shape[0] != W.shape[0]:
        raise InvalidInputError(
            f"logits length {logits.shape[0]} != vocabulary size {W.shape[0]}"
        )
    ids = core.top_k(logits, k)
    W_t = np.ascontiguousarray(W[ids])
    ids.setflags(write=False)
    W_t.setflags(write=False)
    return PrunedVocab(token_ids=ids, W_t=W_t, source_exit=source_exit)


def project_pruned(pv: PrunedVocab, h: np.ndarray) -> np.ndarray:
    """Logits of the retained tokens; entry ``i`` is the full logit of ``token_ids[i]``."""
    return core.matvec(pv.W_t, h)


def remap(pv: PrunedVocab, local_index: int) -> int:
    if not 0 <= local_index < pv.size:
        raise InvalidInputError(f"local index {local_index} outside [0, {pv.size})")
    return int(pv.token_ids[local_index])
