"""Command-line entry point: synth, split, train, eval, infer, gradcheck, dump-latents.

Settings resolve in three layers: built-in defaults, then a flat ``key=value``
config file (``--config``), then explicit flags. Every command writes a
``<command>.manifest.json`` next to its outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    DataError, Split, SynthSpec, load_catalog, make_protocol_split, read_feature_file, save_catalog, synth_generate,
)
from .evalproto import digest_bytes, run_protocol
from .gradcheck import tiny_config, window_gradcheck
from .model import MODES, ModelConfig
from .objectives import LossWeights
from .stream import batch_infer
from .trainer import NumericError, TrainConfig, load_checkpoint, save_checkpoint, train_run

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ptma")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# Every tunable, with its type and default. Flags map onto these keys with
# dashes; config files may use either spelling.
SETTINGS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "threads": (int, 1),
    "out_dir": (str, "."),
    # data
    "catalog": (str, None),
    "split": (str, None),
    "protocol": (str, "cv"),
    "train_view": (str, "1"),
    "test_view": (str, None),
    "recon_view": (int, None),
    "test_fraction": (float, 0.3),
    "truncate_pairs": (bool, False),
    # synth
    "subjects": (int, 4),
    "views": (int, 3),
    "actions": (int, 4),
    "frames": (int, 200),
    "feature_dim": (int, 32),
    "synth_latent": (int, 8),
    "videos_per_subject": (int, 1),
    "seg_min": (int, 10),
    "seg_max": (int, 30),
    "noise": (float, 0.1),
    "jitter": (float, 0.3),
    "view_spread": (float, 0.5),
    # model
    "mode": (str, "full"),
    "embed_dim": (int, 512),
    "latent_dim": (int, 256),
    "window": (int, 16),
    "alpha": (float, None),
    "enc_hidden": (int, 256),
    "dec_hidden": (int, 256),
    # training
    "epochs": (int, 10),
    "batch_size": (int, 16),
    "lr": (float, 1.4e-4),
    "lr_min": (float, 0.0),
    "lambda1": (float, 1.0),
    "lambda2": (float, 1.0),
    "lambda3": (float, 0.1),
    "patience": (int, 3),
    "normalize_cls": (bool, False),
    "window_sampling": (str, "random"),
    # eval / infer
    "checkpoint": (str, None),
    "metric": (str, "mAP"),
    "features": (str, None),
    "output": (str, None),
    "dump_latents": (bool, False),
    "tiny": (bool, False),
}


def _to_bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def _convert(key: str, raw):
    typ, _ = SETTINGS[key]
    if raw is None or (isinstance(raw, str) and raw.strip().lower() == "none"):
        return None
    try:
        if typ is bool:
            return raw if isinstance(raw, bool) else _to_bool(raw)
        return typ(raw)
    except ValueError as e:
        raise UsageError(f"bad value for {key}: {raw!r}") from e


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e.strerror or e}") from e
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in SETTINGS:
            raise UsageError(f"{path}:{n}: unknown key {k!r}")
        out[k] = _convert(k, v)
    return out


def _add_flags(p: argparse.ArgumentParser, keys):
    for k in keys:
        typ, _ = SETTINGS[k]
        flag = "--" + k.replace("_", "-")
        if typ is bool:
            p.add_argument(flag, dest=k, action="store_const", const=True, default=argparse.SUPPRESS)
        else:
            p.add_argument(flag, dest=k, default=argparse.SUPPRESS)


COMMON = ["seed", "threads", "out_dir"]
SPLIT_KEYS = ["catalog", "split", "protocol", "train_view", "test_view", "recon_view", "test_fraction"]
SYNTH_KEYS = ["subjects", "views", "actions", "frames", "feature_dim", "synth_latent", "videos_per_subject",
              "seg_min", "seg_max", "noise", "jitter", "view_spread"]
MODEL_KEYS = ["mode", "embed_dim", "latent_dim", "window", "alpha", "enc_hidden", "dec_hidden"]
TRAIN_KEYS = ["epochs", "batch_size", "lr", "lr_min", "lambda1", "lambda2", "lambda3", "patience",
              "normalize_cls", "window_sampling", "truncate_pairs", "checkpoint", "metric"]

COMMANDS = {
    "synth": SYNTH_KEYS,
    "split": SPLIT_KEYS,
    "train": SPLIT_KEYS + MODEL_KEYS + TRAIN_KEYS,
    "eval": SPLIT_KEYS + ["checkpoint", "metric", "dump_latents"],
    "infer": ["checkpoint", "features", "output"],
    "gradcheck": ["tiny", "mode"],
    "dump-latents": SPLIT_KEYS + ["checkpoint"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ptma", description="Cross-view online action detection toolkit.")
    parser.add_argument("--version", action="version", version=f"ptma {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value settings file")
        p.add_argument("-v", "--verbose", action="store_true")
        _add_flags(p, COMMON + [k for k in keys if k not in COMMON])
        if "train_view" in keys:
            p.add_argument("--train-views", dest="train_view", default=argparse.SUPPRESS,
                           help="alias of --train-view, e.g. 12 for input v1 with reconstruction v2")
    return parser


def resolve(ns: argparse.Namespace) -> dict:
    cfg = {k: d for k, (_, d) in SETTINGS.items()}
    if ns.config:
        cfg.update(read_config_file(ns.config))
    for k, v in vars(ns).items():
        if k in SETTINGS:
            cfg[k] = _convert(k, v)
    return cfg


def _views(spec) -> tuple[int, ...]:
    if spec is None:
        return ()
    s = str(spec).strip().lower().lstrip("v")
    parts = [p for p in s.replace(",", " ").split() if p]
    try:
        if len(parts) == 1 and len(parts[0]) > 1 and parts[0].isdigit():
            # "12" as in "v12": the second digit names the reconstruction view
            return tuple(int(c) for c in parts[0])
        return tuple(int(p.lstrip("v")) for p in parts)
    except ValueError as e:
        raise UsageError(f"bad view list {spec!r}") from e


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _model_config(cfg: dict, D: int, C: int) -> ModelConfig:
    if cfg["mode"] not in MODES:
        raise UsageError(f"unknown mode {cfg['mode']!r}; expected one of {MODES}")
    return ModelConfig(D=D, C=C, E=cfg["embed_dim"], D_z=cfg["latent_dim"], T=cfg["window"],
                       alpha=cfg["alpha"], enc_hidden=cfg["enc_hidden"], dec_hidden=cfg["dec_hidden"],
                       mode=cfg["mode"])


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr0=cfg["lr"], lr_min=cfg["lr_min"],
                       weights=LossWeights(cfg["lambda1"], cfg["lambda2"], cfg["lambda3"]), seed=cfg["seed"],
                       patience=cfg["patience"], normalize_cls=cfg["normalize_cls"],
                       window_sampling=cfg["window_sampling"], truncate_pairs=cfg["truncate_pairs"],
                       threads=cfg["threads"], metric=cfg["metric"],
                       recon_view_policy="paired" if cfg["protocol"].startswith("m-") else "self")


def _need(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _load_split(cfg: dict, inputs: dict):
    _need(cfg, "catalog")
    catalog = load_catalog(cfg["catalog"])
    cat_path = Path(cfg["catalog"])
    cat_path = cat_path / "catalog.json" if cat_path.is_dir() else cat_path
    inputs["catalog"] = _file_digest(cat_path)
    if cfg["split"]:
        try:
            obj = json.loads(Path(cfg["split"]).read_text())
        except OSError as e:
            raise DataError(f"cannot read split {cfg['split']}: {e.strerror or e}") from e
        inputs["split"] = _file_digest(cfg["split"])
        split = Split.from_json(obj, catalog)
        cfg["protocol"] = split.protocol
        return catalog, split
    tv = _views(cfg["train_view"])
    recon = cfg["recon_view"]
    if len(tv) == 2 and recon is None:
        tv, recon = tv[:1], tv[1]
    split = make_protocol_split(catalog, cfg["protocol"], tv, _views(cfg["test_view"]) or None,
                                recon_view=recon, seed=cfg["seed"], test_fraction=cfg["test_fraction"])
    return catalog, split


def _load_params(cfg: dict, inputs: dict):
    _need(cfg, "checkpoint")
    params = load_checkpoint(cfg["checkpoint"])
    inputs["checkpoint"] = _file_digest(cfg["checkpoint"])
    return params


# ------------------------------------------------------------------ commands

def cmd_synth(cfg, out: Path, inputs, outputs):
    spec = SynthSpec(n_subjects=cfg["subjects"], n_views=cfg["views"], n_actions=cfg["actions"],
                     latent_dim=cfg["synth_latent"], D=cfg["feature_dim"], frames=cfg["frames"],
                     videos_per_subject=cfg["videos_per_subject"], seg_min=cfg["seg_min"],
                     seg_max=cfg["seg_max"], noise=cfg["noise"], jitter=cfg["jitter"],
                     view_spread=cfg["view_spread"], seed=cfg["seed"])
    outputs["catalog"] = str(save_catalog(synth_generate(spec), out))
    return EXIT_OK


def cmd_split(cfg, out, inputs, outputs):
    _, split = _load_split(cfg, inputs)
    path = out / "split.json"
    path.write_text(json.dumps(split.to_json(), indent=2) + "\n")
    outputs["split"] = str(path)
    return EXIT_OK


def cmd_train(cfg, out, inputs, outputs):
    catalog, split = _load_split(cfg, inputs)
    mcfg = _model_config(cfg, catalog.D, catalog.C)
    tcfg = _train_config(cfg)
    params, tlog = train_run(split.train, split.val, mcfg, tcfg, train_targets=split.train_targets)
    ckpt = Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "model.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, ckpt)
    (out / "steps.csv").write_text(tlog.steps_csv())
    summary = {"best_epoch": tlog.best_epoch, "best_metric": tlog.best_metric, "metric": tcfg.metric,
               "total_steps": tlog.total_steps, "epochs": tlog.epochs}
    (out / "train_log.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    outputs.update(checkpoint=str(ckpt), steps=str(out / "steps.csv"), log=str(out / "train_log.json"))
    return EXIT_OK


def cmd_eval(cfg, out, inputs, outputs):
    _, split = _load_split(cfg, inputs)
    params = _load_params(cfg, inputs)
    rep = run_protocol(split, params, cfg["metric"], out_dir=out, dump_latents=cfg["dump_latents"],
                       checkpoint_digest=inputs["checkpoint"])
    print(f"{cfg['metric']} {rep.mean:.6f}")
    outputs.update(report=str(out / "report.json"), frames=str(out / "frames.csv"))
    return EXIT_OK


def cmd_infer(cfg, out, inputs, outputs):
    _need(cfg, "features")
    params = _load_params(cfg, inputs)
    seq = read_feature_file(cfg["features"])
    inputs["features"] = _file_digest(cfg["features"])
    if seq.D != params.config.D:
        raise DataError(f"{cfg['features']}: feature dim {seq.D} but model expects {params.config.D}")
    scores = batch_infer(params, seq.features)
    path = Path(cfg["output"]) if cfg["output"] else out / f"{Path(cfg['features']).stem}.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame_index", "argmax_label"] + [f"score_{c}" for c in range(scores.shape[1])])
        for t, row in enumerate(scores):
            wr.writerow([t, int(row.argmax())] + [repr(float(x)) for x in row])
    outputs["scores"] = str(path)
    return EXIT_OK


def cmd_gradcheck(cfg, out, inputs, outputs):
    if not cfg["tiny"]:
        raise UsageError("gradcheck currently supports only --tiny")
    report = window_gradcheck(tiny_config(cfg["mode"]), seed=cfg["seed"])
    text = report.format()
    print(text)
    (out / "gradcheck.txt").write_text(text + "\n")
    outputs["report"] = str(out / "gradcheck.txt")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_dump_latents(cfg, out, inputs, outputs):
    from .dataio import FeatureSequence, write_feature_file
    from .stream import encode_latents

    _, split = _load_split(cfg, inputs)
    params = _load_params(cfg, inputs)
    if not params.config.uses_latent:
        raise UsageError(f"mode {params.config.mode!r} has no latent encoder")
    lat = out / "latents"
    lat.mkdir(exist_ok=True)
    for s in split.test:
        write_feature_file(FeatureSequence(encode_latents(params, s.features), s.labels, s.view_id,
                                           s.subject_id, s.video_id, s.fps, s.C),
                           lat / f"{s.video_id}_v{s.view_id}.feat")
    outputs["latents"] = str(lat)
    return EXIT_OK


HANDLERS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "gradcheck": cmd_gradcheck, "dump-latents": cmd_dump_latents}


def _build_id() -> str:
    try:
        return f"ptma {metadata.version('ptma')} numpy {np.__version__}"
    except metadata.PackageNotFoundError:
        return f"ptma {__version__} numpy {np.__version__}"


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not ns.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = resolve(ns)
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = {}, {}
        t0 = time.perf_counter()
        code = HANDLERS[ns.command](cfg, out, inputs, outputs)
        used = {k: cfg[k] for k in sorted(set(COMMON) | set(COMMANDS[ns.command]))}
        manifest = {
            "command": ns.command,
            "config": used,
            "config_digest": digest_bytes(json.dumps(used, sort_keys=True).encode()),
            "seed": cfg["seed"],
            "inputs": inputs,
            "outputs": outputs,
            "wall_clock_s": round(time.perf_counter() - t0, 3),
            "build": _build_id(),
            "exit_code": code,
        }
        (out / f"{ns.command}.manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return code
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)


def main() -> None:
    sys.exit(dispatch())
