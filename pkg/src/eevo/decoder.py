"""Early-exit greedy decoding.

For every generated token the layers run one at a time. After each layer
the hidden state is normed, projected to logits and turned into a
confidence; the first layer whose confidence reaches the token's threshold
emits its argmax and the remaining layers are skipped. The last layer
always emits.

In ``dvp`` mode exits ``1..p`` use the full unembedding. If the token has
not left by exit ``p``, the top-``K`` rows of ``W`` under exit ``p``'s
logits are copied into a :class:`~eevo.pruning.PrunedVocab` and every later
exit projects onto those rows only.

Skipped layers still need keys and values for the emitted position, so
later tokens can attend to it. They are filled from the exit layer's
hidden state (state copying), see :func:`propagate_state`.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import core, flops
from .errors import CapacityError, InvalidInputError
from .model import KvCache, ModelWeights, embed, final_norm, forward_block, kv_projection
from .policy import ExitPolicy, confidence, should_exit
from .pruning import PrunedVocab, project_pruned, prune, remap

SCHEMA_VERSION = 1


class Mode(str, enum.Enum):
    FULL = "full"
    DVP = "dvp"


@dataclass
class TokenStep:
    token: int
    exit_layer: int
    confidences: list[tuple[int, float]]
    pruned_at: int | None
    threshold: float
    # Audit only: full-vocabulary top-2 stayed inside the pruned set at
    # every pruned exit. None when not audited or nothing was pruned.
    contained: bool | None = None

    def to_dict(self) -> dict:
        return {
            "token": self.token,
            "exit_layer": self.exit_layer,
            "confidences": [[layer, c] for layer, c in self.confidences],
            "pruned_at": self.pruned_at,
            "threshold": self.threshold,
        }


@dataclass
class Timer:
    total_s: float = 0.0
    confidence_s: float = 0.0


@dataclass
class GenerationResult:
    tokens: list[int]
    steps: list[TokenStep]
    ledger: flops.FlopsLedger
    prompt_ledger: flops.FlopsLedger
    timing: Timer
    mode: Mode
    policy: ExitPolicy
    prompt: list[int] = field(default_factory=list)

    @property
    def exit_layers(self) -> list[int]:
        return [s.exit_layer for s in self.steps]

    @property
    def avg_exit(self) -> float:
        if not self.steps:
            return 0.0
        return sum(self.exit_layers) / len(self.steps)

    @property
    def flops_per_token(self) -> float:
        """Generation-phase FLOPs divided by generated tokens (prompt ingestion excluded)."""
        if not self.tokens:
            return 0.0
        return self.ledger.total / len(self.tokens)

    def to_dict(self, config=None) -> dict:
        policy = self.policy
        cfg = {
            "mode": self.mode.value,
            "measure": policy.measure.value,
            "schedule": policy.schedule.kind.value,
            "lambda": policy.schedule.lam,
            "tau": policy.schedule.tau,
            "p": policy.prune_exit,
            "K": policy.prune_size,
            "max_new_tokens": policy.max_new_tokens,
            "prompt": list(self.prompt),
        }
        if config is not None:
            cfg["model"] = asdict(config)
        return {
            "schema_version": SCHEMA_VERSION,
            "config": cfg,
            "tokens": list(self.tokens),
            "steps": [s.to_dict() for s in self.steps],
            "summary": {
                "n_tokens": len(self.tokens),
                "avg_exit": self.avg_exit,
                "flops_per_token": self.flops_per_token,
            },
            "ledger": self.ledger.to_dict(),
            "prompt_ledger": self.prompt_ledger.to_dict(),
            "timing": {"total_s": self.timing.total_s, "confidence_s": self.timing.confidence_s},
        }


def propagate_state(
    weights: ModelWeights,
    cache: KvCache,
    exit_layer: int,
    h: np.ndarray,
    position: int,
    ledger: flops.FlopsLedger | None = None,
) -> KvCache:
    """Fill layers above ``exit_layer`` at ``position`` from the copied state ``h``."""
    L = weights.config.L
    if not 1 <= exit_layer <= L:
        raise InvalidInputError(f"exit layer must be in [1, {L}], got {exit_layer}")
    for layer in range(exit_layer + 1, L + 1):
        k, v = kv_projection(weights.blocks[layer - 1], h)
        cache.write(layer, position, k, v)
        if ledger is not None:
            ledger.record("state_propagation", flops.kv_fill_cost(weights.config))
    return cache


def _contains_top2(full_logits: np.ndarray, pv: PrunedVocab) -> bool:
    top2 = core.top_k(full_logits, min(2, full_logits.shape[0]))
    return bool(np.isin(top2, pv.token_ids).all())


def decode_token(
    weights: ModelWeights,
    cache: KvCache,
    position: int,
    input_token: int,
    step_index: int,
    policy: ExitPolicy,
    mode: Mode | str,
    ledger: flops.FlopsLedger,
    timer: Timer | None = None,
    audit: bool = False,
) -> TokenStep:
    """Run one token through the exit cascade and fill the cache at ``position``.

    ``step_index`` is the 0-based index of the token being generated; it
    selects the threshold from the policy's schedule.
    """
    mode = Mode(mode)
    c = weights.config
    d, V = c.d_model, c.d_vocab
    p = policy.prune_exit if mode is Mode.DVP else None
    if p is not None:
        policy.validate_for(c)
    lam = policy.threshold(step_index)
    timer = timer if timer is not None else Timer()

    h = embed(weights, input_token, position)
    pv: PrunedVocab | None = None
    confidences: list[tuple[int, float]] = []
    contained: bool | None = None
    token = exit_layer = None

    for layer in range(1, c.L + 1):
        h = forward_block(weights, layer, h, cache, position, ledger)
        z = final_norm(weights, h)
        ledger.record("layernorm", flops.layernorm_cost(d))

        start = time.perf_counter()
        if pv is None:
            logits = core.matvec(weights.W, z)
            rows = V
        else:
            logits = project_pruned(pv, z)
            rows = pv.size
        probs = core.softmax(logits)
        conf = confidence(probs, policy.measure)
        timer.confidence_s += time.perf_counter() - start
        ledger.record("confidence_projection", flops.projection_cost(rows, d))
        ledger.record("confidence_softmax", flops.softmax_cost(rows))
        ledger.record("confidence_measure", flops.measure_cost(rows))
        confidences.append((layer, conf))

        if audit and pv is not None:
            ok = _contains_top2(core.matvec(weights.W, z), pv)
            contained = ok if contained is None else (contained and ok)

        if should_exit(conf, lam) or layer == c.L:
            local = core.argmax(logits)
            token = local if pv is None else remap(pv, local)
            exit_layer = layer
            break

        if p is not None and layer == p:
            start = time.perf_counter()
            pv = prune(weights.W, logits, policy.prune_size, source_exit=p)
            timer.confidence_s += time.perf_counter() - start
            ledger.record("topk_select", flops.topk_cost(V))

    propagate_state(weights, cache, exit_layer, h, position, ledger)
    return TokenStep(
        token=int(token),
        exit_layer=exit_layer,
        confidences=confidences,
        pruned_at=None if pv is None else p,
        threshold=lam,
        contained=contained,
    )


def ingest(weights: ModelWeights, cache: KvCache, tokens: Sequence[int], ledger=None) -> None:
    """Run prompt tokens through all layers without evaluating exits."""
    for position, token in enumerate(tokens):
        h = embed(weights, token, position)
        for layer in range(1, weights.config.L + 1):
            h = forward_block(weights, layer, h, cache, position, ledger)


def generate(
    weights: ModelWeights,
    prompt: Sequence[int],
    policy: ExitPolicy,
    mode: Mode | str = Mode.FULL,
    end_token: int | None = None,
    audit: bool = False,
) -> GenerationResult:
    """Greedy early-exit generation of up to ``policy.max_new_tokens`` tokens.

    The prompt's last token is the input of the first decode step, so the
    whole prompt except that token is ingested at full depth first.
    """
    mode = Mode(mode)
    c = weights.config
    prompt = [int(t) for t in prompt]
    n = policy.max_new_tokens
    if not prompt:
        raise InvalidInputError("prompt must contain at least one token")
    for t in prompt:
        if not 0 <= t < c.d_vocab:
            raise InvalidInputError(f"prompt token {t} out of range [0, {c.d_vocab})")
    if mode is Mode.DVP:
        policy.validate_for(c)
    if len(prompt) + n > c.max_seq:
        raise CapacityError(
            f"prompt length {len(prompt)} + {n} new tokens exceeds max_seq {c.max_seq}"
        )

    started = time.perf_counter()
    timer = Timer()
    cache = KvCache(c)
    prompt_ledger = flops.FlopsLedger()
    ledger = flops.FlopsLedger()
    ingest(weights, cache, prompt[:-1], prompt_ledger)

    tokens: list[int] = []
    steps: list[TokenStep] = []
    current, position = prompt[-1], len(prompt) - 1
    for i in range(n):
        ledger.begin_token()
        step = decode_token(weights, cache, position, current, i, policy, mode, ledger, timer, audit)
        ledger.end_token()
        steps.append(step)
        tokens.append(step.token)
        if end_token is not None and step.token == end_token:
            break
        current, position = step.token, position + 1

    timer.total_s = time.perf_counter() - started
    return GenerationResult(
        tokens=tokens,
        steps=steps,
        ledger=ledger,
        prompt_ledger=prompt_ledger,
        timing=timer,
        mode=mode,
        policy=policy,
        prompt=prompt,
    )
