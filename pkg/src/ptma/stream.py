"""Frame-by-frame inference with bounded state, and the full-sequence reference path.

The GRU hidden state carries the whole history; only the attention term is
confined to the last T frames. ``batch_infer`` computes the same scores in
one pass with a K x K temporal mask and serves as the oracle for
``stream_step``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import ModelParams, forward_window, prob_encode


@dataclass
class StreamState:
    hidden: np.ndarray
    keys: deque = field(default_factory=deque)      # raw encodings h_j, oldest first
    queries: deque = field(default_factory=deque)   # f_q(z_j), oldest first
    frames_seen: int = 0


def stream_init(params: ModelParams) -> StreamState:
    T = params.config.T
    return StreamState(np.zeros(params.config.E, dtype=params.dtype), deque(maxlen=T), deque(maxlen=T), 0)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def stream_step(state: StreamState, params: ModelParams, x_t) -> tuple[np.ndarray, StreamState]:
    """Consume one frame; return class probabilities and the advanced state.

    The incoming state is left untouched.
    """
    cfg = params.config
    p = params.arrays()
    x = np.asarray(x_t, dtype=params.dtype).reshape(-1)
    if x.shape != (cfg.D,):
        raise nx.ShapeError(f"stream_step: expected a {cfg.D}-vector, got shape {np.shape(x_t)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("stream_step: non-finite input frame")

    u = x @ p["in_proj.W"] + p["in_proj.b"]
    h = state.hidden
    zg = _sigmoid(u @ p["gru.W_z"] + h @ p["gru.U_z"] + p["gru.b_z"])
    rg = _sigmoid(u @ p["gru.W_r"] + h @ p["gru.U_r"] + p["gru.b_r"])
    cand = np.tanh(u @ p["gru.W_h"] + (rg * h) @ p["gru.U_h"] + p["gru.b_h"])
    h_new = h + zg * (cand - h)

    keys = deque(state.keys, maxlen=cfg.T)
    queries = deque(state.queries, maxlen=cfg.T)
    keys.append(h_new)
    if cfg.uses_latent:
        hid = np.maximum(x @ p["enc.W"] + p["enc.b"], 0)
        mu = hid @ p["mu.W"] + p["mu.b"]
        q = mu @ p["fq.W"] + p["fq.b"]
        queries.append(q)
        K = np.stack(keys)
        w = _softmax((K @ q) * (1.0 / math.sqrt(cfg.alpha)))
        a = w @ K
        h_tilde = h_new + a
    else:
        h_tilde = h_new
    scores = _softmax(h_tilde @ p["cls.W"] + p["cls.b"])
    return scores, StreamState(h_new, keys, queries, state.frames_seen + 1)


def stream_video(params: ModelParams, X) -> np.ndarray:
    state = stream_init(params)
    out = []
    for x in np.asarray(X):
        s, state = stream_step(state, params, x)
        out.append(s)
    return np.stack(out)


def batch_infer(params: ModelParams, X, rng=None) -> np.ndarray:
    """K x (C+1) class probabilities from one pass over the full sequence.

    Uses z = mu unless ``rng`` is given, in which case z is sampled.
    """
    X = np.asarray(X, dtype=params.dtype)
    sample = rng is not None and params.config.uses_latent
    with nx.no_grad():
        tr = forward_window(params, X, rng=rng, sample=sample)
        return nx.softmax(tr.logits).data


def encode_latents(params: ModelParams, X) -> np.ndarray:
    """Posterior means per frame, for latent dumps."""
    with nx.no_grad():
        mu, _ = prob_encode(params, np.asarray(X, dtype=params.dtype))
    return mu.data
