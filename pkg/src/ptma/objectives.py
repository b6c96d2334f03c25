"""Classification, reconstruction and KL losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    rec: float = 1.0
    kld: float = 0.1

    def __post_init__(self):
        if not self.cls > 0:
            raise ValueError("classification weight must be > 0")
        if self.rec < 0 or self.kld < 0:
            raise ValueError("loss weights must be nonnegative")

    def for_mode(self, mode: str) -> "LossWeights":
        """Weights actually applied in ``mode`` (disabled terms forced to 0)."""
        if mode == "full":
            return self
        if mode == "ae":
            return LossWeights(self.cls, self.rec, 0.0)
        if mode == "kld-only":
            return LossWeights(self.cls, 0.0, self.kld)
        if mode in ("query-only", "baseline-gru"):
            return LossWeights(self.cls, 0.0, 0.0)
        raise ValueError(f"unknown mode {mode!r}")


@dataclass
class LossBreakdown:
    cls: Tensor
    rec: Tensor | None
    kld: Tensor | None
    total: Tensor
    frames_counted: int
    weights: LossWeights

    def values(self) -> dict[str, float]:
        f = lambda t: 0.0 if t is None else float(t.data)  # noqa: E731
        return {"L_cls": f(self.cls), "L_rec": f(self.rec), "L_kld": f(self.kld), "total": f(self.total)}


def _valid(valid, n: int) -> np.ndarray:
    v = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if v.shape != (n,):
        raise nx.ShapeError(f"validity flags have shape {v.shape}, expected ({n},)")
    return v


def _row_weights(v: np.ndarray, scale: float, like: Tensor) -> Tensor:
    # full shape: broadcasting is leading-axis only
    w = (v.astype(np.float64) * scale).astype(like.dtype)[:, None]
    return Tensor(np.broadcast_to(w, like.shape).copy())


def cls_loss(logits: Tensor, labels, valid=None, normalize: bool = False) -> Tensor:
    """Cross-entropy summed over valid frames (averaged when ``normalize``)."""
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    v = _valid(valid, n)
    if not v.any():
        raise ValueError("cls_loss: no valid frames")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cls_loss: labels must be {n} ints in [0, {k - 1}]")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    onehot[~v] = 0.0
    if normalize:
        onehot /= v.sum()
    return nx.mul(nx.sum_(nx.mul(nx.log_softmax(logits), Tensor(onehot))), Tensor(np.asarray(-1.0, logits.dtype)))


def rec_loss(X_target, X_rec: Tensor, valid=None) -> Tensor:
    """Squared error summed over features, averaged over valid frames."""
    target = X_target if isinstance(X_target, Tensor) else Tensor(np.asarray(X_target, dtype=X_rec.dtype))
    if target.shape != X_rec.shape:
        raise nx.ShapeError(f"rec_loss: target {target.shape} vs reconstruction {X_rec.shape}")
    v = _valid(valid, X_rec.shape[0])
    if not v.any():
        raise ValueError("rec_loss: no valid frames")
    r = nx.sub(target, X_rec)
    return nx.sum_(nx.mul(nx.mul(r, r), _row_weights(v, 1.0 / v.sum(), X_rec)))


def kld_loss(mu: Tensor, sigma: Tensor, valid=None) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)), summed over latent dims, averaged over valid frames."""
    if np.any(sigma.data <= 0):
        raise ValueError("kld_loss: sigma must be positive")
    v = _valid(valid, mu.shape[0])
    if not v.any():
        raise ValueError("kld_loss: no valid frames")
    two = Tensor(np.asarray(2.0, mu.dtype))
    var = nx.mul(sigma, sigma)
    term = nx.sub(nx.sub(nx.add(nx.mul(mu, mu), var), Tensor(np.asarray(1.0, mu.dtype))),
                  nx.mul(nx.log(sigma), two))
    return nx.sum_(nx.mul(term, _row_weights(v, 0.5 / v.sum(), mu)))


def total_loss(cls: Tensor, rec: Tensor | None, kld: Tensor | None, weights: LossWeights,
               mode: str = "full", frames_counted: int = 0) -> LossBreakdown:
    w = weights.for_mode(mode)
    dt = cls.dtype
    total = nx.mul(cls, Tensor(np.asarray(w.cls, dt)))
    if rec is not None and w.rec > 0:
        total = nx.add(total, nx.mul(rec, Tensor(np.asarray(w.rec, dt))))
    if kld is not None and w.kld > 0:
        total = nx.add(total, nx.mul(kld, Tensor(np.asarray(w.kld, dt))))
    return LossBreakdown(cls, rec, kld, total, frames_counted, w)


def window_loss(trace, labels, weights: LossWeights, mode: str, recon_target=None,
                normalize_cls: bool = False) -> LossBreakdown:
    """All loss terms for one forward trace.

    ``recon_target`` holds the frames the decoder should reproduce: the window
    itself, or the synchronized window from a second view.
    """
    v = trace.valid
    lc = cls_loss(trace.logits, labels, v, normalize=normalize_cls)
    lr = lk = None
    if trace.X_rec is not None and recon_target is not None:
        lr = rec_loss(recon_target, trace.X_rec, v)
    if trace.mu is not None:
        lk = kld_loss(trace.mu, trace.sigma, v)
    return total_loss(lc, lr, lk, weights, mode, int(v.sum()))
