"""Feature files, dataset catalogs, the synthetic multi-view generator and protocol splits."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Xoshiro256pp

FEAT_MAGIC = b"PTMAFEAT"
FEAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIf")

PROTOCOLS = ("cs", "cv", "csv", "m-cv", "m-csv")


class DataError(Exception):
    """Malformed, missing or inconsistent input data."""


@dataclass
class FeatureSequence:
    features: np.ndarray
    labels: np.ndarray
    view_id: int = 0
    subject_id: int = 0
    video_id: str = ""
    fps: float = 0.0
    C: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be K x D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(f"{self.features.shape[0]} frames but {self.labels.size} labels")
        if self.C is None:
            self.C = int(self.labels.max()) if self.labels.size else 0

    @property
    def K(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.view_id)


def write_feature_file(seq: FeatureSequence, path) -> None:
    if seq.K == 0:
        raise DataError("refusing to write a sequence with K=0 frames")
    if seq.labels.min() < 0 or seq.labels.max() > min(seq.C, 0xFFFF):
        raise DataError(f"labels out of range [0, {seq.C}]")
    header = _HEADER.pack(FEAT_MAGIC, FEAT_VERSION, seq.K, seq.D, seq.C,
                          seq.view_id, seq.subject_id, seq.fps)
    body = seq.features.astype("<f4").tobytes() + seq.labels.astype("<u2").tobytes()
    Path(path).write_bytes(header + body)


def read_feature_file(path, video_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read feature file {path}: {e.strerror or e}") from e
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(raw)}")
    magic, version, K, D, C, view, subject, fps = _HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {FEAT_MAGIC!r}")
    if version != FEAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * K * D + 2 * K
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for K={K}, D={D}, got {len(raw)}")
    off = _HEADER.size
    feats = np.frombuffer(raw, dtype="<f4", count=K * D, offset=off).reshape(K, D).astype(np.float32)
    labels = np.frombuffer(raw, dtype="<u2", count=K, offset=off + 4 * K * D).astype(np.int64)
    return FeatureSequence(feats, labels, view, subject, video_id or path.stem, fps, C)


# ----------------------------------------------------------------- catalogs

@dataclass
class DatasetCatalog:
    sequences: list[FeatureSequence]
    C: int
    paths: dict[tuple[str, int], str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        dims = {s.D for s in self.sequences}
        if len(dims) > 1:
            raise DataError(f"sequences disagree on feature dim: {sorted(dims)}")
        for s in self.sequences:
            if s.key in seen:
                raise DataError(f"duplicate (video, view) pair {s.key}")
            seen.add(s.key)
            if s.labels.size and s.labels.max() > self.C:
                raise DataError(f"video {s.video_id} has labels above C={self.C}")

    @property
    def views(self) -> list[int]:
        return sorted({s.view_id for s in self.sequences})

    @property
    def subjects(self) -> list[int]:
        return sorted({s.subject_id for s in self.sequences})

    @property
    def D(self) -> int:
        return self.sequences[0].D

    def lookup(self, video_id: str, view_id: int) -> FeatureSequence:
        for s in self.sequences:
            if s.video_id == video_id and s.view_id == view_id:
                return s
        raise DataError(f"no sequence for video {video_id!r} in view {view_id}")

    def select(self, views=None, subjects=None) -> list[FeatureSequence]:
        return [s for s in self.sequences
                if (views is None or s.view_id in views) and (subjects is None or s.subject_id in subjects)]


def save_catalog(catalog: DatasetCatalog, out_dir) -> Path:
    """Write one feature file per sequence plus a ``catalog.json`` manifest."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in catalog.sequences:
        rel = f"features/{s.video_id}_v{s.view_id}.feat"
        write_feature_file(s, out_dir / rel)
        entries.append({"path": rel, "video_id": s.video_id, "view_id": s.view_id,
                        "subject_id": s.subject_id, "K": s.K})
    manifest = {"C": catalog.C, "D": catalog.D, "views": catalog.views,
                "subjects": catalog.subjects, "sequences": entries}
    path = out_dir / "catalog.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_catalog(path) -> DatasetCatalog:
    path = Path(path)
    if path.is_dir():
        path = path / "catalog.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as e:
        raise DataError(f"cannot read catalog {path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    seqs, paths = [], {}
    for e in manifest["sequences"]:
        p = path.parent / e["path"]
        s = read_feature_file(p, video_id=e["video_id"])
        if s.view_id != e["view_id"] or s.subject_id != e["subject_id"]:
            raise DataError(f"{p}: header view/subject disagree with {path}")
        seqs.append(s)
        paths[s.key] = str(p)
    return DatasetCatalog(seqs, int(manifest["C"]), paths)


# ---------------------------------------------------------------- synthetic

@dataclass
class SynthSpec:
    n_subjects: int = 4
    n_views: int = 3
    n_actions: int = 4
    latent_dim: int = 8
    D: int = 32
    frames: int = 200
    videos_per_subject: int = 1
    seg_min: int = 10
    seg_max: int = 30
    action_scale: float = 1.5
    subject_spread: float = 0.3
    jitter: float = 0.3
    ar_coef: float = 0.9
    view_spread: float = 0.5
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.D < self.latent_dim:
            raise ValueError(f"D={self.D} must be >= latent_dim={self.latent_dim}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 1 <= self.seg_min <= self.seg_max:
            raise ValueError("need 1 <= seg_min <= seg_max")


@dataclass
class SynthTruth:
    """Generator internals kept for oracle tests."""
    mixing: dict[int, np.ndarray]
    latents: dict[str, np.ndarray]
    segments: list[int]


def _label_track(rng: Xoshiro256pp, spec: SynthSpec, segments: list[int]) -> np.ndarray:
    labels = np.empty(spec.frames, dtype=np.int64)
    t, prev = 0, -1
    while t < spec.frames:
        n = rng.integers(spec.seg_min, spec.seg_max)
        lab = rng.integers(0, spec.n_actions)
        if lab == prev:
            lab = (lab + 1 + rng.integers(0, spec.n_actions - 1)) % (spec.n_actions + 1)
        labels[t:t + n] = lab
        if t + n <= spec.frames:
            segments.append(n)
        t += n
        prev = lab
    return labels


def synth_generate(spec: SynthSpec, return_truth: bool = False):
    """Frame-synchronized multi-view dataset.

    A latent track per (subject, video) is the current action's mean vector plus
    a subject offset plus AR(1) jitter; view ``v`` renders it through an
    orthonormal D x L mixing matrix and adds isotropic noise.
    """
    rng = Xoshiro256pp(spec.seed, "synth")
    L, D, C = spec.latent_dim, spec.D, spec.n_actions
    means = rng.normal((C + 1, L)) * spec.action_scale
    base = rng.normal((D, L))
    mixing = {}
    for v in range(1, spec.n_views + 1):
        q, r = np.linalg.qr(base + spec.view_spread * rng.normal((D, L)))
        mixing[v] = q * np.sign(np.diag(r))[None, :]
    offsets = {s: rng.normal(L) * spec.subject_spread for s in range(1, spec.n_subjects + 1)}

    seqs, latents, segments = [], {}, []
    innov = spec.jitter * np.sqrt(1.0 - spec.ar_coef ** 2)
    for s in range(1, spec.n_subjects + 1):
        for k in range(spec.videos_per_subject):
            vid = f"s{s:02d}_{k:02d}"
            labels = _label_track(rng, spec, segments)
            shocks = rng.normal((spec.frames, L))
            j = np.zeros((spec.frames, L))
            j[0] = shocks[0] * spec.jitter
            for t in range(1, spec.frames):
                j[t] = spec.ar_coef * j[t - 1] + innov * shocks[t]
            lat = means[labels] + offsets[s][None, :] + j
            latents[vid] = lat
            for v in range(1, spec.n_views + 1):
                x = lat @ mixing[v].T + spec.noise * rng.normal((spec.frames, D))
                seqs.append(FeatureSequence(x.astype(np.float32), labels.copy(), v, s, vid, 25.0, C))
    cat = DatasetCatalog(seqs, C)
    if return_truth:
        return cat, SynthTruth(mixing, latents, segments)
    return cat


# ------------------------------------------------------------------- splits

@dataclass
class Split:
    protocol: str
    train: list[FeatureSequence]
    val: list[FeatureSequence]
    test: list[FeatureSequence]
    # synchronized reconstruction targets, parallel to train / val (m-cv, m-csv)
    train_targets: list[FeatureSequence] | None = None
    val_targets: list[FeatureSequence] | None = None
    train_views: tuple[int, ...] = ()
    recon_view: int | None = None
    test_views: tuple[int, ...] = ()

    def to_json(self) -> dict:
        keys = lambda seqs: [[s.video_id, s.view_id] for s in seqs]  # noqa: E731
        return {
            "protocol": self.protocol,
            "train_views": list(self.train_views),
            "recon_view": self.recon_view,
            "test_views": list(self.test_views),
            "train": keys(self.train),
            "val": keys(self.val),
            "test": keys(self.test),
            "train_targets": None if self.train_targets is None else keys(self.train_targets),
            "val_targets": None if self.val_targets is None else keys(self.val_targets),
        }

    @classmethod
    def from_json(cls, obj: dict, catalog: DatasetCatalog) -> "Split":
        get = lambda ks: None if ks is None else [catalog.lookup(v, int(w)) for v, w in ks]  # noqa: E731
        return cls(obj["protocol"], get(obj["train"]), get(obj["val"]), get(obj["test"]),
                   get(obj.get("train_targets")), get(obj.get("val_targets")),
                   tuple(obj.get("train_views", ())), obj.get("recon_view"),
                   tuple(obj.get("test_views", ())))


def _subject_hash(seed: int, subject: int) -> int:
    return zlib.crc32(f"{seed}:{subject}".encode())


def _split_subjects(subjects: list[int], seed: int, test_fraction: float) -> tuple[list[int], list[int]]:
    if len(subjects) < 2:
        raise DataError("protocol needs at least two subjects to hold some out")
    perm = Xoshiro256pp(seed, "split").permutation(len(subjects))
    n_test = min(len(subjects) - 1, max(1, int(round(test_fraction * len(subjects)))))
    order = [subjects[i] for i in perm]
    return sorted(order[n_test:]), sorted(order[:n_test])


def _val_subjects(subjects: list[int], seed: int, fraction: float = 0.2) -> set[int]:
    if len(subjects) < 2:
        return set()
    n_val = max(1, int(round(fraction * len(subjects))))
    ranked = sorted(subjects, key=lambda s: (_subject_hash(seed, s), s))
    return set(ranked[:n_val])


def _as_views(v) -> tuple[int, ...]:
    if v is None:
        return ()
    if isinstance(v, (int, np.integer)):
        return (int(v),)
    return tuple(int(x) for x in v)


def make_protocol_split(catalog: DatasetCatalog, protocol: str, train_view, test_view=None,
                        recon_view: int | None = None, seed: int = 0,
                        test_fraction: float = 0.3, val_fraction: float = 0.2) -> Split:
    """Build train/val/test lists for one evaluation protocol.

    cs: one view, disjoint subjects. cv: same subjects, different views.
    csv: disjoint subjects and different views. m-cv / m-csv: like cv / csv,
    with training inputs from ``train_view`` paired with synchronized
    reconstruction targets from ``recon_view``.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    train_views = _as_views(train_view)
    if len(train_views) != 1:
        raise DataError(f"{protocol}: exactly one training input view expected, got {train_views}")
    vi = train_views[0]
    test_views = _as_views(test_view) or ((vi,) if protocol == "cs" else ())
    multi = protocol.startswith("m-")
    needed = {vi, *test_views} | ({recon_view} if multi and recon_view is not None else set())
    if protocol != "cs" and not test_views:
        raise DataError(f"{protocol}: a test view is required")
    if multi and recon_view is None:
        raise DataError(f"{protocol}: a reconstruction view is required")
    n_needed = 1 if protocol == "cs" else (3 if multi else 2)
    if len(catalog.views) < n_needed or not needed <= set(catalog.views):
        raise DataError(f"{protocol} needs views {sorted(needed)} (at least {n_needed} distinct); "
                        f"catalog has {catalog.views}")
    if protocol == "cs" and test_views != (vi,):
        raise DataError("cs trains and tests on the same view")
    if protocol != "cs" and vi in test_views:
        raise DataError(f"{protocol}: test view must differ from the training view")
    if multi and (recon_view == vi or recon_view in test_views):
        raise DataError(f"{protocol}: reconstruction view must differ from input and test views")

    subjects = catalog.subjects
    if protocol in ("cs", "csv", "m-csv"):
        train_subj, test_subj = _split_subjects(subjects, seed, test_fraction)
    else:
        train_subj, test_subj = subjects, subjects
    held = _val_subjects(train_subj, seed, val_fraction)

    pool = catalog.select(views={vi}, subjects=set(train_subj))
    train = [s for s in pool if s.subject_id not in held]
    val = [s for s in pool if s.subject_id in held]
    test = [s for tv in test_views for s in catalog.select(views={tv}, subjects=set(test_subj))]

    train_t = val_t = None
    if multi:
        train_t = [catalog.lookup(s.video_id, recon_view) for s in train]
        val_t = [catalog.lookup(s.video_id, recon_view) for s in val]

    if protocol in ("cs", "csv", "m-csv"):
        tr = {s.subject_id for s in train + val}
        te = {s.subject_id for s in test}
        assert not tr & te, "train and test subjects overlap"
    if protocol != "cs":
        assert not {s.view_id for s in train} & set(test_views), "train and test views overlap"
    return Split(protocol, train, val, test, train_t, val_t, train_views, recon_view, test_views)
