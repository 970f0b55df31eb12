"""Rank-convergence measurement and (p, K) calibration."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import core, flops
from .decoder import Mode, generate, ingest
from .errors import CapacityError, InvalidInputError
from .model import KvCache, ModelWeights, embed, final_norm, forward_block
from .policy import ExitPolicy

DEFAULT_KS = (1, 10, 100)


@dataclass
class RankTrace:
    """``ranks[i, l-1]``: 1-based rank at layer ``l`` of token ``i``'s final-layer argmax."""

    tokens: list[int]
    ranks: np.ndarray
    logits: np.ndarray | None = None  # (tokens, L, d_vocab) when kept


def token_rank(logits: np.ndarray, token: int) -> int:
    """Position of ``token`` in the top_k order of ``logits`` (1-based)."""
    value = logits[token]
    return 1 + int((logits > value).sum()) + int((logits[:token] == value).sum())


def rank_trace(
    weights: ModelWeights,
    prompt: Sequence[int],
    n_tokens: int,
    keep_logits: bool = False,
) -> RankTrace:
    """Generate greedily at full depth and rank the final token at every layer."""
    c = weights.config
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InvalidInputError("prompt must contain at least one token")
    if len(prompt) + n_tokens > c.max_seq:
        raise CapacityError(
            f"prompt length {len(prompt)} + {n_tokens} new tokens exceeds max_seq {c.max_seq}"
        )
    cache = KvCache(c)
    ingest(weights, cache, prompt[:-1])

    tokens = []
    ranks = np.zeros((n_tokens, c.L), dtype=np.int64)
    kept = np.zeros((n_tokens, c.L, c.d_vocab), dtype=core.DTYPE) if keep_logits else None
    current, position = prompt[-1], len(prompt) - 1
    for i in range(n_tokens):
        h = embed(weights, current, position)
        per_layer = []
        for layer in range(1, c.L + 1):
            h = forward_block(weights, layer, h, cache, position)
            per_layer.append(core.matvec(weights.W, final_norm(weights, h)))
        token = core.argmax(per_layer[-1])
        for layer, logits in enumerate(per_layer):
            ranks[i, layer] = token_rank(logits, token)
            if kept is not None:
                kept[i, layer] = logits
        tokens.append(token)
        current, position = token, position + 1
    return RankTrace(tokens=tokens, ranks=ranks, logits=kept)


@dataclass
class RankSummary:
    ks: tuple[int, ...]
    mean_rank: np.ndarray
    median_rank: np.ndarray
    coverage: np.ndarray  # (L, len(ks))

    def rows(self) -> list[dict]:
        out = []
        for i in range(self.mean_rank.shape[0]):
            row = {
                "layer": i + 1,
                "mean_rank": float(self.mean_rank[i]),
                "median_rank": float(self.median_rank[i]),
            }
            for j, k in enumerate(self.ks):
                row[f"coverage_{k}"] = float(self.coverage[i, j])
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["layer", "mean_rank", "median_rank"] + [f"coverage_{k}" for k in self.ks]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def rank_summary(traces: Sequence[RankTrace], ks: Sequence[int] = DEFAULT_KS) -> RankSummary:
    """Per-layer rank statistics pooled over every token of every trace."""
    ranks = [t.ranks for t in traces if t.ranks.size]
    if not ranks:
        raise InvalidInputError("rank_summary needs at least one token")
    ks = tuple(int(k) for k in ks)
    if not ks or min(ks) < 1:
        raise InvalidInputError(f"coverage ks must be positive, got {ks}")
    pooled = np.concatenate(ranks, axis=0)
    coverage = np.stack([(pooled <= k).mean(axis=0) for k in ks], axis=1)
    return RankSummary(
        ks=ks,
        mean_rank=pooled.mean(axis=0),
        median_rank=np.median(pooled, axis=0),
        coverage=coverage,
    )


def prefix_agreement(reference: Sequence[int], candidate: Sequence[int]) -> float:
    """Length of the common prefix as a fraction of the reference length."""
    if not reference:
        return 1.0
    n = 0
    for a, b in zip(reference, candidate):
        if a != b:
            break
        n += 1
    return n / len(reference)


@dataclass
class CalibrationReport:
    epsilon: float
    baseline_confidence_flops: int
    cells: list[dict]
    chosen: dict
    grid: list[tuple[int, int]] = field(default_factory=list)

    @property
    def chosen_point(self) -> tuple[int | None, int]:
        return self.chosen["p"], self.chosen["K"]

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "baseline_confidence_flops": self.baseline_confidence_flops,
            "grid": [{"p": p, "K": k} for p, k in self.grid],
            "cells": self.cells,
            "chosen": self.chosen,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_calibration_inputs(weights, prompts, grid, epsilon, template):
    if not grid:
        raise InvalidInputError("calibration grid is empty")
    if not prompts:
        raise InvalidInputError("calibration needs at least one prompt")
    if epsilon < 0:
        raise InvalidInputError(f"epsilon must be >= 0, got {epsilon}")
    if template.max_new_tokens < 1:
        raise InvalidInputError("calibration needs max_new_tokens >= 1")
    for p, k in grid:
        replace(template, prune_exit=p, prune_size=k).validate_for(weights.config)


def calibrate(
    weights: ModelWeights,
    prompts: Sequence[Sequence[int]],
    grid: Sequence[tuple[int, int]],
    epsilon: float,
    template: ExitPolicy,
) -> CalibrationReport:
    """Cheapest (p, K) whose agreement with full-vocabulary decoding stays within ``epsilon``.

    A cell's score is the mean prefix agreement of its tokens with the
    full-mode tokens for the same prompts; its cost is the closed-form
    confidence FLOPs at the exits it actually took. Ties on cost go to the
    smaller K, then the smaller p.
    """
    grid = [(int(p), int(k)) for p, k in grid]
    _check_calibration_inputs(weights, prompts, grid, epsilon, template)
    c = weights.config

    baseline = [generate(weights, prompt, template, Mode.FULL) for prompt in prompts]
    baseline_cost = sum(
        flops.expected_confidence_flops(template, r.exit_layers, c.d_vocab, c.d_model, mode="full")
        for r in baseline
    )

    cells = []
    for p, k in grid:
        policy = replace(template, prune_exit=p, prune_size=k)
        scores, cost = [], 0
        for prompt, ref in zip(prompts, baseline):
            run = generate(weights, prompt, policy, Mode.DVP)
            scores.append(prefix_agreement(ref.tokens, run.tokens))
            cost += flops.expected_confidence_flops(policy, run.exit_layers, c.d_vocab, c.d_model)
        score = float(np.mean(scores))
        drop = 1.0 - score
        cells.append({
            "p": p,
            "K": k,
            "score": score,
            "drop": drop,
            "confidence_flops": int(cost),
            "feasible": drop <= epsilon,
        })

    feasible = [cell for cell in cells if cell["feasible"]]
    if feasible:
        best = min(feasible, key=lambda cell: (cell["confidence_flops"], cell["K"], cell["p"]))
        chosen = dict(best, fallback=False)
    else:
        chosen = {
            "p": None,
            "K": c.d_vocab,
            "score": 1.0,
            "drop": 0.0,
            "confidence_flops": int(baseline_cost),
            "feasible": True,
            "fallback": True,
        }
    return CalibrationReport(
        epsilon=float(epsilon),
        baseline_confidence_flops=int(baseline_cost),
        cells=cells,
        chosen=chosen,
        grid=grid,
    )


def calibrate_exhaustive(
    weights: ModelWeights,
    prompts: Sequence[Sequence[int]],
    grid: Sequence[tuple[int, int]],
    epsilon: float,
    template: ExitPolicy,
) -> tuple[int | None, int]:
    """Brute-force reference for :func:`calibrate`'s selection.

    Every cell is evaluated from scratch, costed with the instrumented
    ledger rather than the closed form, and the whole grid is sorted.
    """
    grid = [(int(p), int(k)) for p, k in grid]
    _check_calibration_inputs(weights, prompts, grid, epsilon, template)
    ranked = []
    for p, k in grid:
        policy = replace(template, prune_exit=p, prune_size=k)
        agreements, cost = [], 0
        for prompt in prompts:
            full = generate(weights, prompt, policy, Mode.FULL).tokens
            run = generate(weights, prompt, policy, Mode.DVP)
            agree = 0
            while agree < len(full) and agree < len(run.tokens) and full[agree] == run.tokens[agree]:
                agree += 1
            agreements.append(agree / len(full))
            cost += run.ledger.confidence_total
        if 1.0 - sum(agreements) / len(agreements) <= epsilon:
            ranked.append((cost, k, p))
    if not ranked:
        return None, weights.config.d_vocab
    ranked.sort()
    return ranked[0][2], ranked[0][1]
