"""Per-frame (calibrated) average precision, mAP/mcAP, and the protocol runner."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TIE_RULE = "descending score; ties broken by ascending pooled frame index (stable)"


def average_precision(scores, positives, calibrated: bool = False) -> tuple[float | None, float | None]:
    """AP of one class over pooled frames; returns ``(ap, w)``.

    With ``calibrated`` the precision at each true positive is
    ``w*TP / (w*TP + FP)`` where ``w = negatives / positives``. Returns
    ``(None, None)`` when there are no positive frames.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    pos = np.asarray(positives, dtype=bool).reshape(-1)
    if scores.size == 0:
        raise ValueError("average_precision: no frames")
    if scores.shape != pos.shape:
        raise ValueError(f"average_precision: {scores.size} scores vs {pos.size} flags")
    P = int(pos.sum())
    if P == 0:
        return None, None
    N = pos.size - P
    if N == 0:
        return 1.0, 0.0
    w = N / P if calibrated else 1.0
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    prec = (w * tp) / (w * tp + fp)
    ap = float(prec[hits].sum() / P)
    return ap, (N / P)


@dataclass
class DetectionRun:
    scores: list[np.ndarray]
    labels: list[np.ndarray]
    views: list[int] = field(default_factory=list)
    video_ids: list[str] = field(default_factory=list)
    protocol: str = ""

    def __post_init__(self):
        for s, y in zip(self.scores, self.labels):
            if s.shape[0] != y.shape[0]:
                raise ValueError(f"score rows {s.shape[0]} vs {y.shape[0]} labels")
            if not np.allclose(s.sum(axis=1), 1.0, atol=1e-5):
                raise ValueError("score rows must be probability vectors")


@dataclass
class MetricReport:
    metric: str
    per_class: dict[int, float | None]
    weights: dict[int, float | None]
    mean: float
    frames: int
    per_view: dict[str, float] = field(default_factory=dict)
    protocol: str = ""

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "metric": self.metric,
            "mean": self.mean,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "w": {str(k): v for k, v in self.weights.items()},
            "per_view": self.per_view,
            "frames": self.frames,
            "tie_rule": TIE_RULE,
        }


def _evaluate(scores: np.ndarray, labels: np.ndarray, calibrated: bool):
    C = scores.shape[1] - 1
    per_class, weights = {}, {}
    for c in range(1, C + 1):
        ap, w = average_precision(scores[:, c], labels == c, calibrated)
        per_class[c] = ap
        weights[c] = w
    present = [v for v in per_class.values() if v is not None]
    mean = float(np.mean(present)) if present else float("nan")
    return per_class, weights, mean


def evaluate_run(run: DetectionRun, metric: str = "mAP") -> MetricReport:
    """Pool frames over all videos and average AP over action classes 1..C.

    Background (class 0) is excluded; classes without positive frames are
    reported as ``None`` and left out of the mean. When the run spans several
    views each view is scored separately as well and averaged into ``Avg.``.
    """
    if metric not in ("mAP", "mcAP"):
        raise ValueError(f"unknown metric {metric!r}")
    calibrated = metric == "mcAP"
    scores = np.concatenate(run.scores, axis=0)
    labels = np.concatenate(run.labels, axis=0)
    per_class, weights, mean = _evaluate(scores, labels, calibrated)
    per_view = {}
    views = sorted(set(run.views))
    if len(views) > 1:
        for v in views:
            idx = [i for i, vv in enumerate(run.views) if vv == v]
            _, _, m = _evaluate(np.concatenate([run.scores[i] for i in idx]),
                                np.concatenate([run.labels[i] for i in idx]), calibrated)
            per_view[f"v{v}"] = m
        per_view["Avg."] = float(np.mean(list(per_view.values())))
    return MetricReport(metric, per_class, weights, mean, int(labels.size), per_view, run.protocol)


def protocol_table(cells: dict[str, float]) -> dict[str, float]:
    """Table layout: one ``v_i->v_j`` cell per run plus their average."""
    out = dict(cells)
    out["Avg."] = float(np.mean(list(cells.values()))) if cells else float("nan")
    return out


def digest_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()[:16]


def run_protocol(split, params, metric: str = "mAP", out_dir=None, dump_latents: bool = False,
                 checkpoint_digest: str = "") -> MetricReport:
    """Infer every test video, score the run, and write report / per-frame artifacts."""
    from .dataio import FeatureSequence, write_feature_file
    from .stream import batch_infer, encode_latents

    scores, labels, views, vids = [], [], [], []
    for seq in split.test:
        scores.append(batch_infer(params, seq.features))
        labels.append(seq.labels)
        views.append(seq.view_id)
        vids.append(seq.video_id)
    run = DetectionRun(scores, labels, views, vids, split.protocol)
    report = evaluate_run(run, metric)
    if out_dir is None:
        return report

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_json()
    doc["train_views"] = list(split.train_views)
    doc["test_views"] = list(split.test_views)
    doc["recon_view"] = split.recon_view
    doc["config_digest"] = digest_bytes(params.config.to_text().encode())
    doc["checkpoint_digest"] = checkpoint_digest
    if split.train_views and split.test_views:
        vi = split.train_views[0]
        prefix = f"v{vi}{split.recon_view}" if split.recon_view else f"v{vi}"
        cells = {f"{prefix}->v{v}": report.per_view.get(f"v{v}", report.mean) for v in split.test_views}
        doc["table"] = protocol_table(cells)
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(out / "frames.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        C1 = params.config.n_classes
        wr.writerow(["video_id", "view_id", "frame_index", "label", "argmax_label"]
                    + [f"score_{c}" for c in range(C1)])
        for s, y, v, vid in zip(scores, labels, views, vids):
            am = s.argmax(axis=1)
            for t in range(s.shape[0]):
                wr.writerow([vid, v, t, int(y[t]), int(am[t])] + [repr(float(x)) for x in s[t]])
    if dump_latents and params.config.uses_latent:
        lat_dir = out / "latents"
        lat_dir.mkdir(exist_ok=True)
        for seq in split.test:
            mu = encode_latents(params, seq.features)
            write_feature_file(FeatureSequence(mu, seq.labels, seq.view_id, seq.subject_id,
                                               seq.video_id, seq.fps, seq.C),
                               lat_dir / f"{seq.video_id}_v{seq.view_id}.feat")
    return report
