"""Independent float64 reference implementations used as test oracles.

Nothing here calls into the engine's kernels; the formulas are written out
again in double precision (or plain Python) from their definitions.
"""

from __future__ import annotations

import math

import numpy as np


def matvec64(W, h):
    W = np.asarray(W, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    return np.array([math.fsum(W[i, j] * h[j] for j in range(W.shape[1])) for i in range(W.shape[0])])


def softmax64(l):
    l = np.asarray(l, dtype=np.float64)
    e = np.exp(l - l.max())
    return e / math.fsum(e)


def layer_norm64(h, gain, eps=1e-6):
    h = np.asarray(h, dtype=np.float64)
    mu = math.fsum(h) / h.size
    var = math.fsum((x - mu) ** 2 for x in h) / h.size
    return (h - mu) / math.sqrt(var + eps) * np.asarray(gain, dtype=np.float64)


def gelu64(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def top_k_sorted(values, k):
    """Brute force: full sort on (-value, index)."""
    return [i for _, i in sorted((-float(v), i) for i, v in enumerate(values))[:k]]


def rank_by_sort(logits, token):
    order = top_k_sorted(logits, len(logits))
    return order.index(token) + 1


class ReferenceModel:
    """Float64 replay of the toy transformer, position by position.

    ``run`` feeds a token at a position; ``exit_layer`` says how deep the
    real pass went, and layers above it get keys/values from the exit
    layer's hidden state (the engine's state-copying rule).
    """

    def __init__(self, weights):
        self.w = weights
        c = weights.config
        self.c = c
        self.keys = [[] for _ in range(c.L)]
        self.values = [[] for _ in range(c.L)]

    def _block_kv(self, layer, h):
        b = self.w.blocks[layer - 1]
        x = layer_norm64(h, b.ln1)
        return matvec64(b.Wk, x), matvec64(b.Wv, x)

    def block(self, layer, h):
        c, b = self.c, self.w.blocks[layer - 1]
        x = layer_norm64(h, b.ln1)
        q = matvec64(b.Wq, x)
        k, v = matvec64(b.Wk, x), matvec64(b.Wv, x)
        self.keys[layer - 1].append(k)
        self.values[layer - 1].append(v)
        K = np.array(self.keys[layer - 1])
        V = np.array(self.values[layer - 1])
        H, dh = c.n_heads, c.d_head
        mixed = np.zeros(c.d_model)
        for head in range(H):
            sl = slice(head * dh, (head + 1) * dh)
            scores = K[:, sl] @ q[sl] / math.sqrt(dh)
            a = softmax64(scores)
            mixed[sl] = a @ V[:, sl]
        h = h + matvec64(b.Wo, mixed)
        x = layer_norm64(h, b.ln2)
        return h + matvec64(b.W2, gelu64(matvec64(b.W1, x)))

    def run(self, token, position, exit_layer=None):
        """Return hidden states h^1..h^exit for one position."""
        exit_layer = exit_layer or self.c.L
        h = np.asarray(self.w.E[token], dtype=np.float64) + self.w.P[position]
        states = []
        for layer in range(1, exit_layer + 1):
            h = self.block(layer, h)
            states.append(h)
        for layer in range(exit_layer + 1, self.c.L + 1):
            k, v = self._block_kv(layer, h)
            self.keys[layer - 1].append(k)
            self.values[layer - 1].append(v)
        return states

    def logits(self, h):
        return matvec64(self.w.W, layer_norm64(h, self.w.ln_f))
