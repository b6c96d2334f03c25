"""Window sampling, Adam with cosine annealing, early stopping and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataio import DataError, FeatureSequence
from .evalproto import DetectionRun, evaluate_run
from .model import ModelConfig, ModelParams, forward_window, init_params
from .objectives import LossWeights, window_loss
from .rng import Xoshiro256pp
from .stream import batch_infer

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PTMACKPT"
CKPT_VERSION = 1


class NumericError(RuntimeError):
    """Training produced non-finite values."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr0: float = 1.4e-4
    lr_min: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    patience: int = 3
    recon_view_policy: str = "self"  # or "paired"
    window_sampling: str = "random"  # or "stride"
    normalize_cls: bool = False
    truncate_pairs: bool = False
    threads: int = 1
    metric: str = "mAP"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if self.recon_view_policy not in ("self", "paired"):
            raise ValueError(f"unknown recon_view_policy {self.recon_view_policy!r}")
        if self.window_sampling not in ("random", "stride"):
            raise ValueError(f"unknown window_sampling {self.window_sampling!r}")


@dataclass(frozen=True)
class WindowSpec:
    start: int
    valid: np.ndarray

    def extract(self, arr: np.ndarray) -> np.ndarray:
        T = self.valid.size
        n = int(self.valid.sum())
        piece = arr[self.start:self.start + n]
        if n == T:
            return piece
        pad = np.zeros((T - n,) + arr.shape[1:], dtype=arr.dtype)
        return np.concatenate([pad, piece], axis=0)


def sample_windows(seq, T: int, rng: Xoshiro256pp | None = None, mode: str = "random") -> list[WindowSpec]:
    """ceil(K/T) windows with uniform random starts in [0, K-T]; K <= T gives one left-padded window."""
    K = seq if isinstance(seq, (int, np.integer)) else seq.K
    if K < 1:
        raise ValueError("cannot window an empty sequence")
    if K <= T:
        valid = np.zeros(T, dtype=bool)
        valid[T - K:] = True
        return [WindowSpec(0, valid)]
    n = math.ceil(K / T)
    full = np.ones(T, dtype=bool)
    if mode == "stride":
        starts = [min(i * T, K - T) for i in range(n)]
    else:
        if rng is None:
            raise ValueError("random window sampling needs an rng")
        starts = [int(s) for s in rng.integers(0, K - T, size=n)]
    return [WindowSpec(s, full) for s in starts]


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        return lr0
    return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params},
                   {k: np.zeros_like(t.data) for k, t in params})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.data = (t.data - upd).astype(t.dtype)


# ----------------------------------------------------------------- one window

@dataclass
class _Job:
    X: np.ndarray
    labels: np.ndarray
    valid: np.ndarray
    target: np.ndarray | None
    eps: np.ndarray | None


def window_gradients(params: ModelParams, job: _Job, cfg: TrainConfig):
    """Gradients and loss values for one window (runs on its own thread-local tape)."""
    nx.clear_tape()
    tr = forward_window(params, job.X, valid=job.valid, eps=job.eps, sample=job.eps is not None)
    lb = window_loss(tr, job.labels, cfg.weights, params.config.mode,
                     recon_target=job.target, normalize_cls=cfg.normalize_cls)
    vals = lb.values()
    if not math.isfinite(vals["total"]):
        nx.clear_tape()
        raise NumericError(f"non-finite training loss {vals}")
    g = nx.backward(lb.total)
    names = {id(t): k for k, t in params}
    return {names[id(t)]: arr for t, arr in g.items() if id(t) in names}, vals


# -------------------------------------------------------------------- training

@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("-inf")
    total_steps: int = 0

    def steps_csv(self) -> str:
        buf = io.StringIO()
        cols = ["step", "epoch", "lr", "L_cls", "L_rec", "L_kld", "total"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.steps:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in cols})
        return buf.getvalue()


def _pair_targets(train, targets, truncate: bool):
    pairs = []
    for s, t in zip(train, targets):
        if s.K != t.K or not np.array_equal(s.labels[:min(s.K, t.K)], t.labels[:min(s.K, t.K)]):
            if not truncate:
                raise DataError(f"video {s.video_id}: paired views have {s.K} vs {t.K} frames")
            n = min(s.K, t.K)
            s = FeatureSequence(s.features[:n], s.labels[:n], s.view_id, s.subject_id, s.video_id, s.fps, s.C)
            t = FeatureSequence(t.features[:n], t.labels[:n], t.view_id, t.subject_id, t.video_id, t.fps, t.C)
        pairs.append((s, t))
    return pairs


def validation_metric(params: ModelParams, seqs: list[FeatureSequence], metric: str = "mAP") -> float:
    run = DetectionRun([batch_infer(params, s.features) for s in seqs], [s.labels for s in seqs])
    m = evaluate_run(run, metric).mean
    return m if math.isfinite(m) else 0.0


def train_run(train: list[FeatureSequence], val: list[FeatureSequence], model_cfg: ModelConfig,
              train_cfg: TrainConfig, train_targets: list[FeatureSequence] | None = None,
              init: ModelParams | None = None) -> tuple[ModelParams, TrainLog]:
    """Train with windowed batches; return the best-validation parameters and the log.

    With ``recon_view_policy="paired"`` each training video is reconstructed
    from its synchronized partner in ``train_targets``. An empty ``val`` set
    falls back to scoring the training videos.
    """
    if not train:
        raise DataError("empty training set")
    params = init.copy() if init is not None else init_params(model_cfg, train_cfg.seed)
    for _, t in params:
        t.requires_grad = True
    mode = model_cfg.mode
    paired = train_cfg.recon_view_policy == "paired" and model_cfg.uses_decoder
    if paired:
        if train_targets is None or len(train_targets) != len(train):
            raise DataError("paired reconstruction needs one target sequence per training video")
        pairs = _pair_targets(train, train_targets, train_cfg.truncate_pairs)
    else:
        pairs = [(s, s) for s in train]
    val_seqs = val or [s for s, _ in pairs]

    T = model_cfg.T
    n_windows = sum(math.ceil(s.K / T) for s, _ in pairs)
    steps_per_epoch = math.ceil(n_windows / train_cfg.batch_size)
    total = train_cfg.epochs * steps_per_epoch

    wrng = Xoshiro256pp(train_cfg.seed, "windows")
    erng = Xoshiro256pp(train_cfg.seed, "eps")
    opt = OptimizerState.zeros_like(params)
    tlog = TrainLog(total_steps=total)
    best = params.copy()
    stale = 0
    pool = ThreadPoolExecutor(train_cfg.threads) if train_cfg.threads > 1 else None
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            jobs = []
            for s, tgt in pairs:
                for w in sample_windows(s, T, wrng, train_cfg.window_sampling):
                    jobs.append((s, tgt, w))
            order = wrng.permutation(len(jobs))
            jobs = [jobs[i] for i in order]
            sums = {"L_cls": 0.0, "L_rec": 0.0, "L_kld": 0.0, "total": 0.0}
            for b in range(0, len(jobs), train_cfg.batch_size):
                batch = []
                for s, tgt, w in jobs[b:b + train_cfg.batch_size]:
                    eps = erng.normal((T, model_cfg.D_z)) if model_cfg.uses_latent else None
                    batch.append(_Job(w.extract(s.features), w.extract(s.labels), w.valid,
                                      w.extract(tgt.features) if model_cfg.uses_decoder else None, eps))
                run = (lambda j: window_gradients(params, j, train_cfg))
                results = list(pool.map(run, batch)) if pool else [run(j) for j in batch]
                grads: dict[str, np.ndarray] = {}
                vals = {k: 0.0 for k in sums}
                for g, v in results:
                    for k, arr in g.items():
                        grads[k] = grads[k] + arr if k in grads else arr.copy()
                    for k in vals:
                        vals[k] += v[k] / len(results)
                for k in grads:
                    grads[k] /= len(results)
                step = len(tlog.steps)
                lr = cosine_lr(step, total, train_cfg.lr0, train_cfg.lr_min)
                adam_step(params, grads, opt, lr)
                tlog.steps.append({"step": step + 1, "epoch": epoch, "lr": lr, **vals})
                for k in sums:
                    sums[k] += vals[k]
            metric = validation_metric(params, val_seqs, train_cfg.metric)
            means = {k: v / steps_per_epoch for k, v in sums.items()}
            tlog.epochs.append({"epoch": epoch, "val_metric": metric, **means})
            log.info("epoch %d: loss %.4f val %s %.4f", epoch, means["total"], train_cfg.metric, metric)
            if metric > tlog.best_metric:
                tlog.best_metric, tlog.best_epoch = metric, epoch
                best = params.copy()
                stale = 0
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    break
    finally:
        if pool:
            pool.shutdown()
    for _, t in best:
        t.requires_grad = False
    return best, tlog


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(params: ModelParams, path) -> bytes:
    cfg = params.config.to_text().encode()
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(cfg)) + cfg
    for name, t in params:
        nb = name.encode()
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape)
        buf += t.data.astype("<f4").tobytes()
    data = bytes(buf)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e.strerror or e}") from e
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, n = struct.unpack_from("<II", raw, 8)
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        cfg = ModelConfig.from_text(raw[off:off + n].decode())
        off += n
        arrays = {}
        while off < len(raw):
            (ln,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4:off + 4 + ln].decode()
            off += 4 + ln
            (rank,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{rank}I", raw, off + 4)
            off += 4 + 4 * rank
            cnt = int(np.prod(shape))
            if off + 4 * cnt > len(raw):
                raise DataError(f"{path}: truncated tensor {name}")
            arrays[name] = np.frombuffer(raw, "<f4", cnt, off).reshape(shape).astype(np.float32)
            off += 4 * cnt
    except struct.error as e:
        raise DataError(f"{path}: truncated checkpoint ({e})") from e
    try:
        return ModelParams.from_arrays(cfg, arrays)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
