"""The PTMA network: probabilistic branch, GRU, temporal mask and masked attention."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .numerics import MASK_VALUE, Tensor
from .rng import Xoshiro256pp

MODES = ("baseline-gru", "query-only", "ae", "kld-only", "full")


@dataclass
class ModelConfig:
    D: int
    C: int
    E: int = 512
    D_z: int = 256
    T: int = 16
    alpha: float | None = None  # None -> E
    enc_hidden: int = 256
    dec_hidden: int = 256
    mode: str = "full"

    def __post_init__(self):
        for name in ("D", "C", "E", "D_z", "T", "enc_hidden", "dec_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.alpha is None:
            self.alpha = float(self.E)
        if not self.alpha > 0:
            raise ValueError(f"ModelConfig.alpha must be > 0, got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    @property
    def n_classes(self) -> int:
        return self.C + 1

    @property
    def uses_latent(self) -> bool:
        return self.mode != "baseline-gru"

    @property
    def uses_decoder(self) -> bool:
        return self.mode in ("ae", "full")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition("=")
            k = k.strip()
            if k not in types:
                raise ValueError(f"unknown ModelConfig key {k!r}")
            v = v.strip()
            if k == "mode":
                kw[k] = v
            elif k == "alpha":
                kw[k] = float(v)
            else:
                kw[k] = int(v)
        return cls(**kw)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, E, Dz, H1, H2, K = cfg.D, cfg.E, cfg.D_z, cfg.enc_hidden, cfg.dec_hidden, cfg.n_classes
    return {
        "in_proj.W": (D, E), "in_proj.b": (E,),
        "gru.W_z": (E, E), "gru.U_z": (E, E), "gru.b_z": (E,),
        "gru.W_r": (E, E), "gru.U_r": (E, E), "gru.b_r": (E,),
        "gru.W_h": (E, E), "gru.U_h": (E, E), "gru.b_h": (E,),
        "enc.W": (D, H1), "enc.b": (H1,),
        "mu.W": (H1, Dz), "mu.b": (Dz,),
        "logvar.W": (H1, Dz), "logvar.b": (Dz,),
        "dec.W1": (Dz, H2), "dec.b1": (H2,),
        "dec.W2": (H2, D), "dec.b2": (D,),
        "fq.W": (Dz, E), "fq.b": (E,),
        "cls.W": (E, K), "cls.b": (K,),
    }


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype, requires_grad: bool | None = None) -> "ModelParams":
        return ModelParams(self.config, {
            k: Tensor(t.data.astype(dtype, copy=True),
                      requires_grad=t.requires_grad if requires_grad is None else requires_grad, name=k)
            for k, t in self.tensors.items()
        })

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray], requires_grad=False):
        shapes = param_shapes(config)
        if set(arrays) != set(shapes):
            missing = sorted(set(shapes) - set(arrays))
            extra = sorted(set(arrays) - set(shapes))
            raise ValueError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        out = {}
        for k in shapes:
            a = np.asarray(arrays[k])
            if a.shape != shapes[k]:
                raise ValueError(f"parameter {k}: shape {a.shape}, expected {shapes[k]}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {k} has non-finite entries")
            out[k] = Tensor(a, requires_grad=requires_grad, name=k)
        return cls(config, out)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn from the ``init`` stream in name order."""
    rng = Xoshiro256pp(seed, "init")
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = ((rng.uniform(shape) * 2.0 - 1.0) * a).astype(dtype)
    return ModelParams.from_arrays(cfg, arrays, requires_grad=True)


# --------------------------------------------------------------------- pieces

def build_temporal_mask(T: int, K: int) -> np.ndarray:
    """K x K additive mask; (i, j) is 0 iff i - T < j <= i, else the mask sentinel."""
    if T < 1 or K < 1:
        raise ValueError(f"build_temporal_mask: need T >= 1 and K >= 1, got T={T}, K={K}")
    i = np.arange(K)[:, None]
    j = np.arange(K)[None, :]
    allowed = (j <= i) & (j > i - T)
    return np.where(allowed, 0.0, MASK_VALUE)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, W), b)


def gru_cell(p: ModelParams, x_t: Tensor, h: Tensor) -> Tensor:
    z = nx.sigmoid(nx.add(nx.add(nx.matmul(x_t, p["gru.W_z"]), nx.matmul(h, p["gru.U_z"])), p["gru.b_z"]))
    r = nx.sigmoid(nx.add(nx.add(nx.matmul(x_t, p["gru.W_r"]), nx.matmul(h, p["gru.U_r"])), p["gru.b_r"]))
    cand = nx.tanh(nx.add(nx.add(nx.matmul(x_t, p["gru.W_h"]), nx.matmul(nx.mul(r, h), p["gru.U_h"])),
                          p["gru.b_h"]))
    # h' = h + z * (cand - h)  ==  (1 - z) h + z cand
    return nx.add(h, nx.mul(z, nx.sub(cand, h)))


def gru_forward(p: ModelParams, X, h_init=None) -> Tensor:
    """Project frames to E dims, then run the GRU left to right. Returns T x E."""
    X = _as_tensor(X, p.dtype)
    E = p.config.E
    h = _as_tensor(np.zeros((1, E), dtype=p.dtype) if h_init is None
                   else np.asarray(h_init, dtype=p.dtype).reshape(1, E), p.dtype)
    U = linear(X, p["in_proj.W"], p["in_proj.b"])
    rows = []
    for t in range(X.shape[0]):
        h = gru_cell(p, nx.slice_(U, t, t + 1), h)
        rows.append(h)
    return nx.concat(rows, axis=0)


def prob_encode(p: ModelParams, X) -> tuple[Tensor, Tensor]:
    """Per-frame Gaussian parameters. The second head predicts log sigma^2."""
    X = _as_tensor(X, p.dtype)
    hid = nx.relu(linear(X, p["enc.W"], p["enc.b"]))
    mu = linear(hid, p["mu.W"], p["mu.b"])
    logvar = linear(hid, p["logvar.W"], p["logvar.b"])
    sigma = nx.exp(nx.mul(logvar, Tensor(np.asarray(0.5, dtype=p.dtype))))
    return mu, sigma


def reparameterize(mu: Tensor, sigma: Tensor, rng: Xoshiro256pp | None = None,
                   eps: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """z = mu + sigma * eps with eps ~ N(0, I); eps is a constant of the graph."""
    if eps is None:
        if rng is None:
            raise ValueError("reparameterize needs an rng or an explicit eps")
        eps = rng.normal(mu.shape)
    eps = np.asarray(eps, dtype=mu.dtype).reshape(mu.shape)
    return nx.add(mu, nx.mul(sigma, Tensor(eps))), eps


def prob_decode(p: ModelParams, z) -> Tensor:
    z = _as_tensor(z, p.dtype)
    hid = nx.relu(linear(z, p["dec.W1"], p["dec.b1"]))
    return linear(hid, p["dec.W2"], p["dec.b2"])


def tma_attention(p: ModelParams, z, H: Tensor, mask: np.ndarray, alpha: float) -> Tensor:
    """A = softmax(f_q(z) H^T / sqrt(alpha) + M) H."""
    z = _as_tensor(z, p.dtype)
    if mask.shape != (H.shape[0], H.shape[0]):
        raise nx.ShapeError(f"tma_attention: mask {mask.shape} does not match {H.shape[0]} time steps")
    Fz = linear(z, p["fq.W"], p["fq.b"])
    scores = nx.mul(nx.matmul(Fz, nx.transpose(H)), Tensor(np.asarray(1.0 / math.sqrt(alpha), dtype=p.dtype)))
    w = nx.softmax(scores, mask)
    return nx.matmul(w, H)


# -------------------------------------------------------------------- window

@dataclass
class ForwardTrace:
    H: Tensor
    A: Tensor
    H_tilde: Tensor
    logits: Tensor
    valid: np.ndarray
    mu: Tensor | None = None
    sigma: Tensor | None = None
    eps: np.ndarray | None = None
    z: Tensor | None = None
    X_rec: Tensor | None = None


def forward_window(p: ModelParams, X, rng: Xoshiro256pp | None = None, valid=None,
                   sample: bool = True, eps: np.ndarray | None = None,
                   config: ModelConfig | None = None) -> ForwardTrace:
    """Run both branches over one window of frames (rows of ``X``).

    ``valid`` flags padded rows (False); padded rows are excluded as attention
    keys. With ``sample=False`` the latent is the posterior mean.
    """
    cfg = config or p.config
    if cfg.mode not in MODES:
        raise ValueError(f"unknown mode {cfg.mode!r}")
    if (cfg.D, cfg.E, cfg.D_z, cfg.C) != (p.config.D, p.config.E, p.config.D_z, p.config.C):
        raise ValueError("forward_window: config dimensions do not match the parameters")
    X = _as_tensor(X, p.dtype)
    if X.data.ndim != 2 or X.shape[1] != cfg.D:
        raise nx.ShapeError(f"forward_window: expected n x {cfg.D} features, got {X.shape}")
    n = X.shape[0]
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)

    H = gru_forward(p, X)
    if not cfg.uses_latent:
        A = Tensor(np.zeros_like(H.data))
        logits = linear(H, p["cls.W"], p["cls.b"])
        return ForwardTrace(H=H, A=A, H_tilde=H, logits=logits, valid=valid)

    mu, sigma = prob_encode(p, X)
    if sample or eps is not None:
        z, eps = reparameterize(mu, sigma, rng, eps)
    else:
        z, eps = mu, np.zeros(mu.shape, dtype=p.dtype)
    X_rec = prob_decode(p, z) if cfg.uses_decoder else None

    mask = build_temporal_mask(cfg.T, n)
    if not valid.all():
        mask = mask.copy()
        mask[:, ~valid] = MASK_VALUE
    A = tma_attention(p, z, H, mask, cfg.alpha)
    H_tilde = nx.add(H, A)
    logits = linear(H_tilde, p["cls.W"], p["cls.b"])
    return ForwardTrace(H=H, A=A, H_tilde=H_tilde, logits=logits, valid=valid,
                        mu=mu, sigma=sigma, eps=eps, z=z, X_rec=X_rec)


def pad_window(X: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad with zero rows to exactly T rows; returns (window, valid flags)."""
    n = X.shape[0]
    if n >= T:
        return X[-T:], np.ones(T, dtype=bool)
    out = np.zeros((T, X.shape[1]), dtype=X.dtype)
    out[T - n:] = X
    valid = np.zeros(T, dtype=bool)
    valid[T - n:] = True
    return out, valid
