"""``dsdkit`` command line.

Subcommands: ``manifest stats|compose|audit|fixture``, ``extract``, ``train``,
``eval``, ``score``, ``simulate``. Reports are JSON, tabular data CSV. Exit
codes: 0 ok, 2 config, 3 format, 4 integrity, 5 numeric, 6 state.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import corpora, features, manifest as mf, metrics, pipeline, simulate
from .config import RunConfig
from .errors import ConfigError, DSDError, FormatError, ShapeError

log = logging.getLogger("dsdkit")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _emit(args, name: str, report: dict) -> None:
    text = _dump(report)
    if args.out:
        _write(Path(args.out) / name, text)
    else:
        sys.stdout.write(text)


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.override(**{"seed": args.seed, "inference.boundary": args.boundary})


def _provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash, "seed": cfg.seed}


def _load_manifest_arg(spec: str) -> mf.DatasetManifest:
    if spec.startswith("fixture:"):
        return corpora.fixture(spec.split(":", 1)[1])
    return mf.load_manifest(spec)


# --- manifest ------------------------------------------------------------------

def cmd_manifest(args) -> int:
    if args.manifest_cmd == "stats":
        m = _load_manifest_arg(args.manifest)
        _emit(args, "stats.json", {"manifest": m.name, "n_records": len(m), "stats": mf.stats(m).to_dict()})
    elif args.manifest_cmd == "compose":
        parts = [_load_manifest_arg(p) for p in args.parts]
        composed = mf.compose(parts, args.name, prefix=not args.no_prefix)
        st = mf.stats(composed)
        report = {
            "name": args.name,
            "parts": [p.name for p in parts],
            "n_records": len(composed),
            "stats": st.to_dict(),
            "part_stats": {p.name: mf.stats(p).to_dict() for p in parts},
        }
        if args.reference:
            report["reference_check"] = corpora.reference_check(args.reference, st)
        if args.save_manifest:
            mf.save_manifest(composed, args.save_manifest)
        _emit(args, "compose.json", report)
    elif args.manifest_cmd == "audit":
        a, b = _load_manifest_arg(args.a), _load_manifest_arg(args.b)
        rep = mf.audit_balance(mf.stats(a), mf.stats(b), names=(a.name, b.name))
        _emit(args, "audit.json", rep.to_dict())
    elif args.manifest_cmd == "fixture":
        mf.save_manifest(corpora.fixture(args.name), args.path)
    return 0


# --- extract -------------------------------------------------------------------

def extract_embeddings(m: mf.DatasetManifest, bcfg: features.BackboneConfig, workers: int = 1,
                       root: Path | None = None) -> list[features.EmbeddingVector]:
    """Embed every record with a path; results keep manifest order whatever the pool size."""
    todo = [r for r in m if r.path]
    if len(todo) != len(m):
        raise FormatError(f"{len(m) - len(todo)} records have no audio path")

    def one(rec):
        p = Path(rec.path)
        if root is not None and not p.is_absolute():
            p = root / p
        return features.embed_file(p, rec.utt_id, bcfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one, todo))
    else:
        chunks = [one(r) for r in todo]
    return [v for chunk in chunks for v in chunk]


def cmd_extract(args) -> int:
    cfg = _run_config(args)
    bcfg = cfg.backbone_config()
    m = mf.load_manifest(args.manifest)
    vecs = extract_embeddings(m, bcfg, args.workers, Path(args.manifest).parent)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    dest = out / args.name
    features.save_embeddings(dest, vecs)
    _write(out / "extract.json", _dump({
        **_provenance(cfg), "manifest": str(args.manifest), "embeddings": str(dest),
        "n_utterances": len(m), "n_segments": len(vecs), "dim": bcfg.dim,
    }))
    return 0


# --- train ---------------------------------------------------------------------

def _training_data(cfg: RunConfig, manifest_path, embeddings_path) -> pipeline.TrainingSet:
    m = mf.load_manifest(manifest_path)
    if cfg["embedding.source"] == "surrogate":
        vecs = extract_embeddings(m, cfg.backbone_config(), root=Path(manifest_path).parent)
    else:
        vecs = features.load_embeddings(embeddings_path)
    return pipeline.assemble(m, vecs)


def _history_csv(det: pipeline.TrainedDetector) -> str:
    rows = [["stage", "epoch", "loss", "asoftmax", "contrastive", "center"]]
    h1 = det.history.get("stage1", {})
    for i, e in enumerate(h1.get("epoch", [])):
        rows.append([1, e] + [repr(h1[k][i]) for k in ("loss", "asoftmax", "contrastive", "center")])
    h2 = det.history.get("stage2", {})
    for i, e in enumerate(h2.get("epoch", [])):
        rows.append([2, e, repr(h2["loss"][i]), "", "", ""])
    return "".join(",".join(str(c) for c in r) + "\n" for r in rows)


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigError("train requires --config")
    cfg = _run_config(args)
    cfg.validate_for_training()
    stage_cfg = cfg.stage_config()
    out = Path(args.out or cfg["paths.out_dir"] or ".")
    data = _training_data(cfg, cfg["paths.train_manifest"], cfg["paths.train_embeddings"])
    det = pipeline.train(data, stage_cfg, stages=cfg["train.stages"], run_config_hash=cfg.config_hash)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "train_log.csv", _history_csv(det))
    digest = pipeline.save_detector(det, out / "detector.ckpt")

    report = {
        **_provenance(cfg),
        "checkpoint": "detector.ckpt",
        "checkpoint_sha256": digest,
        "stages": det.stages,
        "n_segments": len(data),
        "stage1_excluded_unknown_generator": det.history.get("stage1_excluded_unknown", 0),
        "choices": {
            "stage1_heads": "angular-margin softmax, contrastive and centre losses share the body output",
            "stage2": "stage-1 heads dropped; fresh two-way head; whole body keeps training (nothing frozen)",
            "stage3": f"bonafide Gaussian on body output, covariance={stage_cfg.covariance}",
        },
        "config": cfg.canonical_text().splitlines(),
    }
    if 2 in det.stages:
        dec = pipeline.infer(det, data.x, "probability_boundary")
        report["train_accuracy_at_boundary"] = metrics.metrics_at_boundary(
            dec.p_fake, data.binary, stage_cfg.boundary).accuracy
    if det.distance_threshold is not None:
        report["distance_threshold"] = det.distance_threshold
    _write(out / "train_report.json", _dump(report))
    return 0


# --- eval / score --------------------------------------------------------------

def _load_eval_inputs(args, det):
    m = mf.load_manifest(args.manifest)
    vecs = features.load_embeddings(args.embeddings)
    data = pipeline.assemble(m, vecs)
    if data.x.shape[1] != det.input_dim:
        raise ShapeError(f"embeddings have dim {data.x.shape[1]}, checkpoint expects {det.input_dim}")
    return data


def evaluate_detector(det: pipeline.TrainedDetector, data: pipeline.TrainingSet, boundary: float,
                      n_bins: int = 50) -> metrics.EvalReport:
    dec = pipeline.infer(det, data.x, "probability_boundary")
    report = metrics.evaluate(dec.p_fake, data.binary, boundary=boundary, n_bins=n_bins)
    extra = {"n_segments": len(data)}
    both = len(set(data.binary.tolist())) == 2
    if det.mahalanobis is not None:
        d = dec.distance
        extra["mahalanobis"] = {
            "auc": metrics.auc(-d, data.binary) if both else None,
            "eer": metrics.compute_eer(-d, data.binary).to_dict() if both else None,
            "mean_distance_bonafide": float(d[data.binary == 0].mean()) if (data.binary == 0).any() else None,
            "mean_distance_fake": float(d[data.binary == 1].mean()) if (data.binary == 1).any() else None,
            "distance_threshold": det.distance_threshold,
        }
        pred = d > det.distance_threshold
        conf = np.zeros((2, 2), dtype=np.int64)
        np.add.at(conf, (data.binary, pred.astype(np.int64)), 1)
        acc, f1 = metrics.accuracy_f1(conf)
        extra["mahalanobis"].update(accuracy=acc, f1=f1, confusion=conf.tolist())
    utt = pipeline.infer_utterances(det, data.x, data.utt_ids, "probability_boundary")
    first = {}
    for u, y in zip(data.utt_ids, data.binary):
        first.setdefault(u, y)
    y_utt = np.array([first[u] for u in utt.utt_ids])
    conf = np.zeros((2, 2), dtype=np.int64)
    np.add.at(conf, (y_utt, utt.is_fake.astype(np.int64)), 1)
    acc, f1 = metrics.accuracy_f1(conf)
    extra["utterance_level"] = {
        "aggregation": det.config.aggregation,
        "n_utterances": len(utt.utt_ids),
        "accuracy": acc,
        "f1": f1,
        "confusion": conf.tolist(),
    }
    if len(set(y_utt.tolist())) == 2:
        extra["utterance_level"]["eer"] = metrics.compute_eer(utt.log_score, y_utt).to_dict()
    report.extra = extra
    return report


def cmd_eval(args) -> int:
    det = pipeline.load_detector(args.checkpoint)
    boundary = args.boundary if args.boundary is not None else det.config.boundary
    data = _load_eval_inputs(args, det)
    report = evaluate_detector(det, data, boundary)
    out = Path(args.out or ".")
    body = report.to_dict()
    body["checkpoint_sha256"] = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    body["seed"] = det.config.seed
    body["config_hash"] = det.run_config_hash
    body["boundary_source"] = "--boundary" if args.boundary is not None else "checkpoint config"
    _write(out / "eval_report.json", _dump(body))
    for name, h in report.histograms.items():
        _write(out / f"hist_{name}.csv", h.to_csv())
    return 0


def cmd_score(args) -> int:
    det = pipeline.load_detector(args.checkpoint)
    vecs = features.load_embeddings(args.embeddings)
    x = features.stack_embeddings(vecs)
    if x.shape[1] != det.input_dim:
        raise ShapeError(f"embeddings have dim {x.shape[1]}, checkpoint expects {det.input_dim}")
    dec = pipeline.infer(det, x, args.mode)
    rows = ["utt_id,segment_index,p_bonafide,p_fake,log_score,distance,label\n"]
    for v, pb, pf, ls, d, lab in zip(vecs, dec.p_bonafide, dec.p_fake, dec.log_score, dec.distance, dec.labels):
        rows.append(f"{v.source_utt},{v.segment_index},{pb!r},{pf!r},{ls!r},{d!r},{lab}\n")
    _write(Path(args.out or ".") / "scores.csv", "".join(rows))
    return 0


# --- simulate ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    seed = args.seed if args.seed is not None else 7
    regimes = tuple(simulate.REGIMES) if args.regime == "all" else (args.regime,)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    report = simulate.run_experiment(seed=seed, regimes=regimes, **overrides)
    report["config_hash"] = hashlib.sha256(
        json.dumps({"seed": seed, "regimes": regimes, **overrides}, sort_keys=True).encode()).hexdigest()
    out = Path(args.out or ".")
    _write(out / "simulate_report.json", _dump(report))
    for regime, res in report["regimes"].items():
        for name in ("log_score_bonafide", "log_score_fake", "p_fake_bonafide", "p_fake_fake"):
            h = res["histograms"][name]
            hist = metrics.Histogram(np.array(h["edges"]), np.array(h["counts"]), h["underflow"], h["overflow"])
            _write(out / f"hist_{regime}_{name}.csv", hist.to_csv())
    return 0 if report["sign_pattern_matches"] else 1


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value run config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--boundary", type=float, default=argparse.SUPPRESS, help="P_F decision boundary")

    p = argparse.ArgumentParser(prog="dsdkit", description="Deepfake speech detection toolkit")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--boundary", type=float, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pm = sub.add_parser("manifest", help="manifest statistics, composition and audit")
    msub = pm.add_subparsers(dest="manifest_cmd", required=True)
    s = msub.add_parser("stats", parents=[common])
    s.add_argument("manifest", help="CSV path or fixture:<ag|br|br_ag>")
    c = msub.add_parser("compose", parents=[common])
    c.add_argument("parts", nargs="+")
    c.add_argument("--name", required=True)
    c.add_argument("--no-prefix", action="store_true", help="fail on utt_id collisions instead of prefixing")
    c.add_argument("--reference", choices=sorted(corpora.PUBLISHED), help="compare with published totals")
    c.add_argument("--save-manifest", help="also write the composed manifest CSV here")
    a = msub.add_parser("audit", parents=[common])
    a.add_argument("a")
    a.add_argument("b")
    f = msub.add_parser("fixture", parents=[common])
    f.add_argument("name", choices=["ag", "br", "br_ag"])
    f.add_argument("path")
    pm.set_defaults(func=cmd_manifest)

    e = sub.add_parser("extract", parents=[common], help="embed the audio listed in a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--name", default="embeddings.emb")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", parents=[common], help="three-stage training")
    t.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a labelled set")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--embeddings", required=True)
    ev.set_defaults(func=cmd_eval)

    sc = sub.add_parser("score", parents=[common], help="score embeddings with a checkpoint")
    sc.add_argument("--checkpoint", required=True)
    sc.add_argument("--embeddings", required=True)
    sc.add_argument("--mode", choices=pipeline.DECISION_MODES)
    sc.set_defaults(func=cmd_score)

    sm = sub.add_parser("simulate", parents=[common], help="synthetic resource/generator imbalance experiment")
    sm.add_argument("--regime", default="all", choices=["all", *simulate.REGIMES])
    sm.add_argument("--epochs", type=int)
    sm.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DSDError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc.filename or exc)
        return ConfigError.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
