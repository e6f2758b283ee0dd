"""Command-line surface for the pipeline.

Subcommands: synth, train-estimator, train-gen, transform, eval,
audit-dtw, audit-probe, inspect-model.  Every command writes a
seed-stamped JSON report; reruns with the same config are identical
except for the timestamp field.

Exit codes: 0 ok, 2 usage, 3 config/dependency, 4 data, 5 training.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import audit, dataio, guardian, modelstore
from . import estimator as est
from .errors import (
    ArgumentError,
    ConfigError,
    GenShieldError,
    LabeledDataError,
    ParseError,
    SchemaError,
    TrainingError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_TRAINING = 5


def load_config(path):
    """Flat key=value file -> dict of strings."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def _merged(args, keys):
    """Config-file values overridden by explicitly passed flags."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(load_config(args.config))
    for key in keys:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            merged[key] = val
    return merged


def _file_checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_report(out_dir, name, payload, seed, config_snapshot, artifacts=()):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "command": name,
        "seed": seed,
        "config": {k: str(v) for k, v in sorted(config_snapshot.items())},
        "artifacts": {str(p): _file_checksum(p) for p in artifacts},
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    report.update(payload)
    path = out_dir / f"{name}_report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def _prepare_windows(data_dir, d, stride, split_mode, fold):
    """Load -> split -> normalize on train -> window; returns train/test
    windows, the normalizer and profiles."""
    recordings, profiles = dataio.load_recordings(data_dir)
    if not recordings:
        raise SchemaError(f"no recordings found in {data_dir}")
    plan = dataio.make_split(recordings, mode=split_mode, fold_index=fold)
    train_recs, test_recs = dataio.apply_split(recordings, plan)
    stats = dataio.fit_normalizer(train_recs)
    train_w = dataio.make_windows(
        [dataio.normalize(r, stats) for r in train_recs], d=d, stride=stride
    )
    test_w = dataio.make_windows(
        [dataio.normalize(r, stats) for r in test_recs], d=d, stride=stride
    )
    dataio.attach_gender(train_w, profiles)
    dataio.attach_gender(test_w, profiles)
    return train_w, test_w, stats, profiles, plan


def _int(cfg, key, default):
    return int(cfg.get(key, default))


def _float(cfg, key, default):
    return float(cfg.get(key, default))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    cfg = _merged(args, ["subjects", "trials", "fingerprint", "seed", "out"])
    seed = _int(cfg, "seed", 0)
    out = Path(cfg.get("out", "synth_out"))
    recordings, profiles = dataio.generate_synthetic(
        n_subjects=_int(cfg, "subjects", 8),
        trials_per_activity=_int(cfg, "trials", 3),
        seed=seed,
        fingerprint_strength=_float(cfg, "fingerprint", 1.0),
    )
    data_dir = out / "data"
    written = dataio.write_recordings(data_dir, recordings, profiles)
    _write_report(
        out,
        "synth",
        {
            "n_recordings": len(recordings),
            "n_subjects": len(profiles),
            "data_dir": str(data_dir),
        },
        seed,
        cfg,
        artifacts=written,
    )
    return EXIT_OK


def cmd_train_estimator(args):
    cfg = _merged(
        args,
        ["data", "d", "stride", "split", "fold", "epochs", "batch", "lr", "seed", "out"],
    )
    if "data" not in cfg:
        raise ConfigError("train-estimator requires --data")
    seed = _int(cfg, "seed", 0)
    out = Path(cfg.get("out", "estimator_out"))
    d, stride = _int(cfg, "d", 128), _int(cfg, "stride", 64)
    train_w, test_w, stats, _profiles, _plan = _prepare_windows(
        cfg["data"], d, stride, cfg.get("split", "trial"), _int(cfg, "fold", 0)
    )
    m = train_w[0].data.shape[0]
    model = est.build_mtcnn(m, d, seed=seed)
    model.normalization = stats
    config = est.TrainConfig(
        epochs=_int(cfg, "epochs", 30),
        batch_size=_int(cfg, "batch", 64),
        learning_rate=_float(cfg, "lr", 1e-3),
        seed=seed,
    )
    history = est.train_estimator(model, train_w, config)
    report = est.evaluate(model, test_w) if test_w else None
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "estimator.model"
    modelstore.save(model, model_path)
    _write_report(
        out,
        "train-estimator",
        {
            "model": str(model_path),
            "history": history,
            "test_eval": report.to_dict() if report else None,
            "n_train_windows": len(train_w),
            "n_test_windows": len(test_w),
        },
        seed,
        cfg,
        artifacts=[model_path],
    )
    return EXIT_OK


def cmd_train_gen(args):
    cfg = _merged(
        args,
        [
            "data", "estimator", "d", "stride", "split", "fold",
            "epochs", "batch", "lr", "seed", "out", "target",
        ],
    )
    if "estimator" not in cfg:
        raise ConfigError(
            "train-gen requires --estimator (run train-estimator first)"
        )
    if "data" not in cfg:
        raise ConfigError("train-gen requires --data")
    if not Path(cfg["estimator"]).exists():
        raise ConfigError(
            f"estimator model not found: {cfg['estimator']} "
            "(run train-estimator before train-gen)"
        )
    seed = _int(cfg, "seed", 0)
    out = Path(cfg.get("out", "gen_out"))
    estimator_model = modelstore.load(cfg["estimator"])
    est.freeze(estimator_model)
    m, d = estimator_model.input_shape
    stride = _int(cfg, "stride", max(1, d // 2))
    stats = estimator_model.normalization
    recordings, profiles = dataio.load_recordings(cfg["data"])
    if not recordings:
        raise SchemaError(f"no recordings found in {cfg['data']}")
    plan = dataio.make_split(
        recordings, mode=cfg.get("split", "trial"), fold_index=_int(cfg, "fold", 0)
    )
    train_recs, _ = dataio.apply_split(recordings, plan)
    if stats is None:
        stats = dataio.fit_normalizer(train_recs)
    train_w = dataio.make_windows(
        [dataio.normalize(r, stats) for r in train_recs], d=d, stride=stride
    )
    dataio.attach_gender(train_w, profiles)
    gmodel = guardian.build_guardian(m, d, seed=seed)
    config = guardian.NeutralizerConfig(
        target_confidence=_float(cfg, "target", 0.5),
        epochs=_int(cfg, "epochs", 30),
        batch_size=_int(cfg, "batch", 64),
        learning_rate=_float(cfg, "lr", 1e-3),
        seed=seed,
    )
    history = guardian.train_gen(gmodel, estimator_model, train_w, config)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "guardian.model"
    modelstore.save(gmodel, model_path, normalization=stats)
    _write_report(
        out,
        "train-gen",
        {
            "model": str(model_path),
            "history": history,
            "n_train_windows": len(train_w),
        },
        seed,
        cfg,
        artifacts=[model_path],
    )
    return EXIT_OK


def cmd_transform(args):
    cfg = _merged(args, ["data", "guardian", "stride", "seed", "out"])
    for key in ("data", "guardian"):
        if key not in cfg:
            raise ConfigError(f"transform requires --{key}")
    seed = _int(cfg, "seed", 0)
    out = Path(cfg.get("out", "transform_out"))
    gmodel = modelstore.load(cfg["guardian"])
    stats = gmodel.normalization
    if stats is None:
        raise ConfigError("guardian file carries no normalization stats")
    m, d = gmodel.input_shape
    stride = _int(cfg, "stride", max(1, d // 2))
    recordings, profiles = dataio.load_recordings(cfg["data"])
    if not recordings:
        raise SchemaError(f"no recordings found in {cfg['data']}")
    transformed = []
    for rec in recordings:
        norm = dataio.normalize(rec, stats)
        windows = dataio.make_windows([norm], d=d, stride=stride)
        if not windows:
            continue
        for w in windows:
            w.gender_label = 0  # placeholder; labels unused by transform
        new_windows = guardian.transform(gmodel, windows)
        series = guardian.reconstruct_series(new_windows, stride)
        transformed.append(
            dataio.SensorRecording(
                subject_id=rec.subject_id,
                trial_id=rec.trial_id,
                activity=rec.activity,
                samples=dataio.denormalize_array(series, stats),
                sample_rate_hz=rec.sample_rate_hz,
            )
        )
    data_dir = out / "data"
    written = dataio.write_recordings(
        data_dir,
        transformed,
        profiles,
        sidecar={"transformed": True, "guardian": _file_checksum(cfg["guardian"])},
    )
    _write_report(
        out,
        "transform",
        {"n_recordings": len(transformed), "data_dir": str(data_dir)},
        seed,
        cfg,
        artifacts=written,
    )
    return EXIT_OK


def cmd_eval(args):
    cfg = _merged(
        args,
        ["estimator", "data", "transformed-data", "d", "stride", "split", "fold", "seed", "out"],
    )
    if "estimator" not in cfg:
        raise ConfigError("eval requires --estimator")
    if "data" not in cfg and "transformed-data" not in cfg:
        raise ConfigError("eval requires --data and/or --transformed-data")
    seed = _int(cfg, "seed", 0)
    out = Path(cfg.get("out", "eval_out"))
    model = modelstore.load(cfg["estimator"])
    m, d = model.input_shape
    stride = _int(cfg, "stride", max(1, d // 2))
    stats = model.normalization
    if stats is None:
        raise ConfigError("estimator file carries no normalization stats")

    def eval_dir(path):
        recordings, profiles = dataio.load_recordings(path)
        if not recordings:
            raise SchemaError(f"no recordings found in {path}")
        plan = dataio.make_split(
            recordings, mode=cfg.get("split", "trial"), fold_index=_int(cfg, "fold", 0)
        )
        _, test_recs = dataio.apply_split(recordings, plan)
        if not test_recs:
            test_recs = recordings
        windows = dataio.make_windows(
            [dataio.normalize(r, stats) for r in test_recs], d=d, stride=stride
        )
        dataio.attach_gender(windows, profiles)
        return est.evaluate(model, windows)

    cells = {}
    if "data" in cfg:
        raw = eval_dir(cfg["data"])
        cells["raw"] = raw.to_dict()
    if "transformed-data" in cfg:
        tr = eval_dir(cfg["transformed-data"])
        cells["transformed"] = tr.to_dict()
    table = {
        "activity": {k: v["activity_accuracy"] for k, v in cells.items()},
        "gender": {k: v["gender_accuracy"] for k, v in cells.items()},
    }
    _write_report(out, "eval", {"cells": cells, "table": table}, seed, cfg)
    return EXIT_OK


def _series_per_subject(data_dir, plan_mode, fold):
    """Per-subject per-activity series: concatenated test-partition trials."""
    recordings, profiles = dataio.load_recordings(data_dir)
    if not recordings:
        raise SchemaError(f"no recordings found in {data_dir}")
    plan = dataio.make_split(recordings, mode=plan_mode, fold_index=fold)
    _, test_recs = dataio.apply_split(recordings, plan)
    if not test_recs:
        test_recs = recordings
    series = {}
    for rec in sorted(test_recs, key=lambda r: (r.subject_id, r.activity, r.trial_id)):
        acts = series.setdefault(rec.subject_id, {})
        if rec.activity in acts:
            acts[rec.activity] = np.concatenate(
                [acts[rec.activity], rec.samples], axis=1
            )
        else:
            acts[rec.activity] = rec.samples
    return series, profiles


def cmd_audit_dtw(args):
    cfg = _merged(
        args,
        ["data", "transformed-data", "k", "radius", "lmax", "split", "fold", "seed", "out", "export-matrices"],
    )
    if "data" not in cfg:
        raise ConfigError("audit-dtw requires --data (raw dataset)")
    seed = _int(cfg, "seed", 0)
    out = Path(cfg.get("out", "audit_out"))
    radius = _int(cfg, "radius", audit.DEFAULT_RADIUS)
    l_max = _int(cfg, "lmax", audit.DEFAULT_L_MAX)
    split, fold = cfg.get("split", "trial"), _int(cfg, "fold", 0)

    def audit_dir(path):
        series, profiles = _series_per_subject(path, split, fold)
        _per_act, avg = audit.build_distance_matrices(series, radius=radius, l_max=l_max)
        k = _int(cfg, "k", len(avg.subject_ids) - 1)
        return {
            attr: audit.knn_estimate(avg, profiles, attr, k=k).to_dict()
            for attr in audit.ATTRIBUTES
        }, avg

    payload = {}
    matrices = {}
    est_raw, d_raw = audit_dir(cfg["data"])
    payload["raw"] = est_raw
    matrices["raw"] = d_raw
    if "transformed-data" in cfg:
        est_tr, d_tr = audit_dir(cfg["transformed-data"])
        payload["transformed"] = est_tr
        matrices["transformed"] = d_tr
    artifacts = []
    if str(cfg.get("export-matrices", "")).lower() in ("1", "true", "yes"):
        out.mkdir(parents=True, exist_ok=True)
        for tag, mat in matrices.items():
            path = out / f"distance_matrix_{tag}.csv"
            header = ",".join(str(s) for s in mat.subject_ids)
            np.savetxt(path, mat.values, delimiter=",", header=header)
            artifacts.append(path)
    _write_report(out, "audit-dtw", payload, seed, cfg, artifacts=artifacts)
    return EXIT_OK


def cmd_audit_probe(args):
    cfg = _merged(
        args,
        ["transformed-data", "d", "stride", "split", "fold", "epochs", "batch", "lr", "seed", "out"],
    )
    if "transformed-data" not in cfg:
        raise ConfigError("audit-probe requires --transformed-data")
    seed = _int(cfg, "seed", 0)
    out = Path(cfg.get("out", "probe_out"))
    d, stride = _int(cfg, "d", 128), _int(cfg, "stride", 64)
    train_w, test_w, _stats, _profiles, _plan = _prepare_windows(
        cfg["transformed-data"], d, stride, cfg.get("split", "trial"), _int(cfg, "fold", 0)
    )
    config = est.TrainConfig(
        epochs=_int(cfg, "epochs", 30),
        batch_size=_int(cfg, "batch", 64),
        learning_rate=_float(cfg, "lr", 1e-3),
        seed=seed,
    )
    result = audit.supervised_probe(train_w, test_w or train_w, config)
    _write_report(out, "audit-probe", {"probe": result.to_dict()}, seed, cfg)
    return EXIT_OK


def cmd_inspect_model(args):
    cfg = _merged(args, ["model", "seed", "out"])
    if "model" not in cfg:
        raise ConfigError("inspect-model requires --model")
    digest, summary = modelstore.fingerprint(cfg["model"])
    print(f"sha256: {digest}")
    print(summary)
    if cfg.get("out"):
        _write_report(
            Path(cfg["out"]),
            "inspect-model",
            {"sha256": digest, "summary": summary},
            _int(cfg, "seed", 0),
            cfg,
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="genshield",
        description="Transform motion-sensor data to keep activity recognition "
        "while neutralizing gender inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--subjects", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--fingerprint", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-estimator", help="train the multi-task classifier")
    common(p)
    p.add_argument("--data")
    p.add_argument("--d", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--split", choices=["trial", "subject"])
    p.add_argument("--fold", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train_estimator)

    p = sub.add_parser("train-gen", help="train the guardian against a frozen estimator")
    common(p)
    p.add_argument("--data")
    p.add_argument("--estimator")
    p.add_argument("--stride", type=int)
    p.add_argument("--split", choices=["trial", "subject"])
    p.add_argument("--fold", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--target", type=float)
    p.set_defaults(func=cmd_train_gen)

    p = sub.add_parser("transform", help="rewrite a dataset through the guardian")
    common(p)
    p.add_argument("--data")
    p.add_argument("--guardian")
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("eval", help="evaluate an estimator on raw/transformed data")
    common(p)
    p.add_argument("--estimator")
    p.add_argument("--data")
    p.add_argument("--transformed-data")
    p.add_argument("--stride", type=int)
    p.add_argument("--split", choices=["trial", "subject"])
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit-dtw", help="DTW + k-NN attribute leakage audit")
    common(p)
    p.add_argument("--data")
    p.add_argument("--transformed-data")
    p.add_argument("--k", type=int)
    p.add_argument("--radius", type=int)
    p.add_argument("--lmax", type=int)
    p.add_argument("--split", choices=["trial", "subject"])
    p.add_argument("--fold", type=int)
    p.add_argument("--export-matrices", action="store_const", const="true")
    p.set_defaults(func=cmd_audit_dtw)

    p = sub.add_parser("audit-probe", help="retrain-from-scratch probe on transformed data")
    common(p)
    p.add_argument("--transformed-data")
    p.add_argument("--d", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--split", choices=["trial", "subject"])
    p.add_argument("--fold", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_audit_probe)

    p = sub.add_parser("inspect-model", help="fingerprint and summarize a model file")
    common(p)
    p.add_argument("--model")
    p.set_defaults(func=cmd_inspect_model)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, ParseError, LabeledDataError, ArgumentError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except GenShieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
