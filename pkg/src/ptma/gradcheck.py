"""Finite-difference check of the full window loss on a tiny configuration."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .model import ModelConfig, ModelParams, forward_window, init_params
from .objectives import LossWeights, window_loss
from .rng import Xoshiro256pp

TINY = dict(T=4, D=8, E=6, D_z=3, C=2, enc_hidden=5, dec_hidden=5)


def tiny_config(mode: str = "full") -> ModelConfig:
    return ModelConfig(mode=mode, **TINY)


def window_gradcheck(cfg: ModelConfig | None = None, seed: int = 0, weights: LossWeights | None = None,
                     eps: float = 1e-5, tol: float = 1e-4) -> nx.GradCheckReport:
    """Check d(window loss)/d(every parameter) in double precision.

    The reparameterization noise is drawn once and held fixed so the loss is a
    deterministic function of the parameters. Biases are randomized too, so
    that no ReLU sits on its kink at zero.
    """
    cfg = cfg or tiny_config()
    weights = weights or LossWeights(1.0, 1.0, 0.1)
    rng = Xoshiro256pp(seed, "misc")
    base = init_params(cfg, seed, dtype=np.float64)
    arrays = {k: t.data + 0.3 * rng.normal(t.shape) if t.data.ndim == 1 else t.data * 1.5
              for k, t in base}
    params = ModelParams.from_arrays(cfg, arrays)
    X = rng.normal((cfg.T, cfg.D))
    target = rng.normal((cfg.T, cfg.D))
    labels = rng.integers(0, cfg.C, size=cfg.T)
    noise = rng.normal((cfg.T, cfg.D_z))
    names = params.names()

    def loss(*tensors):
        p = ModelParams(cfg, dict(zip(names, tensors)))
        tr = forward_window(p, X, eps=noise if cfg.uses_latent else None, sample=cfg.uses_latent)
        return window_loss(tr, labels, weights, cfg.mode, recon_target=target).total

    return nx.grad_check(loss, [params[n].data for n in names], eps=eps, tol=tol, names=names)
