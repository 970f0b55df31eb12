"""FLOPs accounting.

Counting conventions, applied identically to every mode:

* dot product of length n: 2n (one multiply, one add per term)
* softmax over n entries: 5n (max, subtract, exp, sum, divide)
* confidence measure over n probabilities: n (one scan)
* top-K selection over n logits: n (one comparison per entry)
* layer norm over n entries: 6n (mean, centre, square, variance, scale, gain)
* GELU: 8 per element
* row gathers, cache writes and copies: 0 (memory traffic only)

The instrumented :class:`FlopsLedger` is filled by the engine as it runs.
:func:`expected_confidence_flops` recomputes the confidence costs from exit
layers alone and serves as the cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import InvalidInputError

CATEGORIES = (
    "attention",
    "ffn",
    "layernorm",
    "confidence_projection",
    "confidence_softmax",
    "confidence_measure",
    "topk_select",
    "state_propagation",
)
CONFIDENCE_CATEGORIES = (
    "confidence_projection",
    "confidence_softmax",
    "confidence_measure",
    "topk_select",
)

SOFTMAX_PER_ELEM = 5
MEASURE_PER_ELEM = 1
TOPK_PER_ELEM = 1
LAYERNORM_PER_ELEM = 6
GELU_PER_ELEM = 8


def projection_cost(rows: int, cols: int) -> int:
    if rows < 1 or cols < 1:
        raise InvalidInputError(f"projection needs rows, cols >= 1, got {rows}x{cols}")
    return 2 * rows * cols


def softmax_cost(n: int) -> int:
    return SOFTMAX_PER_ELEM * n


def measure_cost(n: int) -> int:
    return MEASURE_PER_ELEM * n


def topk_cost(n: int) -> int:
    return TOPK_PER_ELEM * n


def layernorm_cost(n: int) -> int:
    return LAYERNORM_PER_ELEM * n


def attention_cost(config, context: int) -> int:
    """One query attending over ``context`` positions, projections included."""
    d = config.d_model
    qkv = 3 * projection_cost(d, d)
    scores = 2 * d * context
    probs = SOFTMAX_PER_ELEM * config.n_heads * context
    mix = 2 * d * context
    out = projection_cost(d, d)
    return qkv + scores + probs + mix + out + d  # + residual add


def ffn_cost(config) -> int:
    d, f = config.d_model, config.d_ff
    return projection_cost(f, d) + GELU_PER_ELEM * f + projection_cost(d, f) + d


def kv_fill_cost(config) -> int:
    """Filling one skipped layer's key/value from a copied hidden state."""
    d = config.d_model
    return layernorm_cost(d) + 2 * projection_cost(d, d)


@dataclass
class FlopsLedger:
    counters: dict[str, int] = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    per_token: list[dict[str, int]] = field(default_factory=list)
    _current: dict[str, int] | None = field(default=None, repr=False)

    def record(self, category: str, count: int) -> "FlopsLedger":
        if category not in self.counters:
            raise InvalidInputError(f"unknown FLOPs category {category!r}")
        count = int(count)
        if count < 0:
            raise InvalidInputError(f"FLOP count must be non-negative, got {count}")
        self.counters[category] += count
        if self._current is not None:
            self._current[category] += count
        return self

    def begin_token(self) -> None:
        self._current = dict.fromkeys(CATEGORIES, 0)
        self.per_token.append(self._current)

    def end_token(self) -> None:
        self._current = None

    @property
    def total(self) -> int:
        return sum(self.counters.values())

    @property
    def confidence_total(self) -> int:
        return sum(self.counters[c] for c in CONFIDENCE_CATEGORIES)

    def merge(self, other: "FlopsLedger") -> "FlopsLedger":
        merged = FlopsLedger()
        for c in CATEGORIES:
            merged.counters[c] = self.counters[c] + other.counters[c]
        merged.per_token = [dict(t) for t in self.per_token + other.per_token]
        return merged

    def to_dict(self) -> dict:
        return {
            "categories": dict(self.counters),
            "total": self.total,
            "confidence_total": self.confidence_total,
            "per_token_total": [sum(t.values()) for t in self.per_token],
        }


def expected_confidence_flops(
    policy,
    exit_layers: Sequence[int] | Iterable[int],
    d_vocab: int,
    d_model: int,
    mode: str | None = None,
    L: int | None = None,
    breakdown: bool = False,
):
    """Closed-form confidence cost of a run with the given exit layers.

    In ``"full"`` mode every exit projects onto all ``d_vocab`` rows. In
    ``"dvp"`` mode exits ``1..p`` do, later ones project onto the
    ``prune_size`` retained rows, and a top-K selection over ``d_vocab``
    logits is charged once for every token that continues past exit ``p``.
    ``mode`` defaults to ``"dvp"`` when the policy sets a pruning exit.

    Returns the total, or a per-category dict when ``breakdown`` is set.
    """
    if mode is None:
        mode = "dvp" if policy.prune_exit is not None else "full"
    if mode not in ("full", "dvp"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    prune_exit = policy.prune_exit if mode == "dvp" else None
    prune_size = policy.prune_size if mode == "dvp" else None
    if mode == "dvp" and prune_exit is None:
        raise InvalidInputError("dvp mode needs a policy with a pruning exit")
    out = dict.fromkeys(CONFIDENCE_CATEGORIES, 0)
    for exit_layer in exit_layers:
        if exit_layer < 1 or (L is not None and exit_layer > L):
            raise InvalidInputError(f"exit layer {exit_layer} out of range")
        if prune_exit is None:
            full, pruned = exit_layer, 0
        else:
            full = min(exit_layer, prune_exit)
            pruned = max(exit_layer - prune_exit, 0)
            if pruned:
                out["topk_select"] += topk_cost(d_vocab)
        rows = d_vocab * full + (prune_size or 0) * pruned
        out["confidence_projection"] += 2 * d_model * rows
        out["confidence_softmax"] += SOFTMAX_PER_ELEM * rows
        out["confidence_measure"] += MEASURE_PER_ELEM * rows
    return out if breakdown else sum(out.values())
