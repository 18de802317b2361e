"""Command line entry point: ``flowctx <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error (error class name printed
on standard error).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys

import numpy as np

from . import __version__
from .bundle import load_model, save_model
from .cluster import k_distance, write_pseudo_labels
from .config import ConfigError, RunConfig, load_config
from .errors import FlowctxError
from .evaluate import bench, export_embeddings, folds_table, sparsity_report
from .flows import extract_pcaps, iter_flows_csv, read_flows_csv, write_flows_csv
from .pcap import write_pcap
from .pipeline import (cluster_sample, cross_test, evaluate_bundle, train_bundle,
                       train_embedding_bundle)
from .preprocess import FlowVectorizer, LabelSpec, join_labels

COMMANDS = ("extract", "fit", "cluster", "train-embed", "train", "eval", "bench", "predict", "inspect")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_options(p):
    """Options that map onto RunConfig keys. Defaults are None so file values survive."""
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="flat key=value configuration file")
    g.add_argument("--seed", type=int)
    g.add_argument("--idle-timeout", type=float)
    g.add_argument("--active-timeout", type=float)
    g.add_argument("--duration-floor", type=float)
    g.add_argument("--eps", type=float)
    g.add_argument("--min-pts", type=int)
    g.add_argument("--downsample-rate", type=float)
    g.add_argument("--kdist-k", type=int)
    g.add_argument("--margin", type=float)
    g.add_argument("--embed-epochs", type=int)
    g.add_argument("--embed-batch-size", type=int)
    g.add_argument("--embed-lr", type=float)
    g.add_argument("--detector-epochs", type=int)
    g.add_argument("--detector-batch-size", type=int)
    g.add_argument("--detector-lr", type=float)
    g.add_argument("--optimizer", choices=("adam", "sgd"))
    g.add_argument("--folds", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--iters", dest="bench_iters", type=int)
    g.add_argument("--warmup", dest="bench_warmup", type=int)


def build_parser():
    parser = _Parser(prog="flowctx", description="Context-aware flow features and embedding-based traffic detection")
    parser.add_argument("--version", action="version", version=f"flowctx {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("extract", help="pcap(s) -> flow CSV")
    p.add_argument("--pcap", dest="pcaps", action="append", help="capture file (repeatable)")
    p.add_argument("--out")
    p.add_argument("--labels", help="label rules CSV; adds a label column")
    p.add_argument("--allow-truncated", action="store_true",
                   help="keep flows read before a truncated record instead of failing")
    _config_options(p)

    p = sub.add_parser("fit", help="fit the min-max scaler and vectorize")
    p.add_argument("--flows")
    p.add_argument("--out", help="vector CSV")
    p.add_argument("--scaler-out", help="scaler JSON (default: <out>.scaler.json)")
    _config_options(p)

    p = sub.add_parser("cluster", help="DBSCAN pseudo-labels on the downsample")
    p.add_argument("--flows")
    p.add_argument("--out", help="pseudo-label CSV")
    _config_options(p)

    p = sub.add_parser("train-embed", help="train the contrastive embedding")
    p.add_argument("--flows")
    p.add_argument("--model", help="output bundle")
    _config_options(p)

    p = sub.add_parser("train", help="train the detector and write a model bundle")
    p.add_argument("--flows")
    p.add_argument("--labels", help="label rules applied before training")
    p.add_argument("--embed-model", help="bundle from train-embed to reuse")
    p.add_argument("--model", help="output bundle")
    _config_options(p)

    p = sub.add_parser("eval", help="metrics for a model, or k-fold cross-test without --model")
    p.add_argument("--flows")
    p.add_argument("--labels")
    p.add_argument("--model")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--embeddings", help="also export embeddings to this CSV (with --model)")
    _config_options(p)

    p = sub.add_parser("bench", help="latency / throughput benchmark")
    p.add_argument("--model")
    p.add_argument("--flows")
    p.add_argument("--out", help="JSON report path")
    _config_options(p)

    p = sub.add_parser("predict", help="classify each flow in a CSV")
    p.add_argument("--model")
    p.add_argument("--flows")
    p.add_argument("--out", help="prediction CSV (default: stdout)")
    _config_options(p)

    p = sub.add_parser("inspect", help="parameter count, manifest, optional sparsity report")
    p.add_argument("--model")
    p.add_argument("--flows")
    _config_options(p)

    p = sub.add_parser("synth", help="write a synthetic capture and matching label rules")
    p.add_argument("--out", help="pcap path")
    p.add_argument("--labels-out", help="label rules CSV path")
    p.add_argument("--flows-count", type=int, default=5000)
    _config_options(p)
    return parser


_NOT_CONFIG = {"command", "config", "scaler_out", "allow_truncated", "labels_out", "flows_count", "embeddings"}


def resolve_config(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG and v is not None}
    return load_config(args.config, overrides)


def _require(cfg, *names):
    missing = [n for n in names if not getattr(cfg, n)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(output_path, command, cfg: RunConfig, inputs=()):
    """Sidecar ``<output>.manifest.json``. No wall-clock fields, so reruns compare equal."""
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "inputs": {str(p): _sha256_file(p) for p in inputs if p and os.path.exists(p)},
        "versions": {"flowctx": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    with open(f"{output_path}.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _labelled(cfg):
    records = read_flows_csv(cfg.flows)
    if cfg.labels:
        records = join_labels(records, LabelSpec.load(cfg.labels))
    if any(r.label is None for r in records):
        raise UsageError("records carry no labels: pass --labels or a flow CSV with a label column")
    return records


# -- commands --------------------------------------------------------------

def cmd_extract(cfg, args):
    _require(cfg, "pcaps", "out")
    records, reports = extract_pcaps(cfg.pcaps, allow_truncated=args.allow_truncated,
                                     idle_timeout=cfg.idle_timeout, active_timeout=cfg.active_timeout,
                                     duration_floor=cfg.duration_floor)
    if cfg.labels:
        records = join_labels(records, LabelSpec.load(cfg.labels))
    write_flows_csv(records, cfg.out, with_labels=bool(cfg.labels))
    report = {"captures": reports, "flows": len(records),
              "packets_read": sum(r["packets_read"] for r in reports),
              "skipped": sum(sum(r["skipped"].values()) for r in reports)}
    with open(f"{cfg.out}.ingest.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(cfg.out, "extract", cfg, cfg.pcaps + [cfg.labels])
    print(f"{len(records)} flows from {report['packets_read']} packets "
          f"({report['skipped']} skipped) -> {cfg.out}")


def cmd_fit(cfg, args):
    _require(cfg, "flows", "out")
    records = read_flows_csv(cfg.flows)
    scaler = FlowVectorizer().fit(records)
    X = scaler.transform(records)
    with open(cfg.out, "w") as fh:
        fh.write(",".join(["index"] + [f"x{k}" for k in range(X.shape[1])] + ["label"]) + "\n")
        for i, (row, rec) in enumerate(zip(X, records)):
            fh.write(",".join([str(i)] + [f"{float(v):.9g}" for v in row] + [rec.label or ""]) + "\n")
    scaler_path = args.scaler_out or f"{cfg.out}.scaler.json"
    with open(scaler_path, "w") as fh:
        json.dump({"min": scaler.data_min_.tolist(), "max": scaler.data_max_.tolist()}, fh, indent=2)
        fh.write("\n")
    write_manifest(cfg.out, "fit", cfg, [cfg.flows])
    print(f"{len(records)} vectors -> {cfg.out}; scaler -> {scaler_path}")


def cmd_cluster(cfg, args):
    _require(cfg, "flows", "out")
    records = read_flows_csv(cfg.flows)
    idx, labels, sample = cluster_sample(records, cfg)
    with open(cfg.out, "w") as fh:
        fh.write("index,cluster\n")
        for i, lab in zip(idx, labels):
            fh.write(f"{int(i)},{int(lab)}\n")
    k = cfg.kdist_k or cfg.min_pts
    kd = k_distance(sample, k)
    with open(f"{cfg.out}.kdist.txt", "w") as fh:
        fh.write(f"# sorted distance to the {k}-th nearest neighbour (self included); eps={cfg.eps}\n")
        for v in kd:
            fh.write(f"{v:.9g}\n")
    write_manifest(cfg.out, "cluster", cfg, [cfg.flows])
    n_clusters = int(labels.max() + 1) if len(labels) else 0
    print(f"{len(idx)} sampled records, {n_clusters} clusters, {int((labels < 0).sum())} noise -> {cfg.out}")


def cmd_train_embed(cfg, args):
    _require(cfg, "flows", "model")
    records = read_flows_csv(cfg.flows)
    bundle, det = train_embedding_bundle(records, cfg)
    save_model(bundle, cfg.model)
    write_manifest(cfg.model, "train-embed", cfg, [cfg.flows])
    curve = det.embedder_.loss_curve_
    print(f"embedding trained: loss {curve[0]:.6f} -> {curve[-1]:.6f} over {len(curve)} epochs -> {cfg.model}")


def cmd_train(cfg, args):
    _require(cfg, "flows", "model")
    records = _labelled(cfg)
    embed_bundle = load_model(cfg.embed_model) if cfg.embed_model else None
    bundle = train_bundle(records, cfg, embed_bundle)
    save_model(bundle, cfg.model)
    write_manifest(cfg.model, "train", cfg, [cfg.flows, cfg.labels, cfg.embed_model])
    print(f"detector trained on {len(records)} flows -> {cfg.model}")


def cmd_eval(cfg, args):
    _require(cfg, "flows")
    records = _labelled(cfg)
    if cfg.model:
        bundle = load_model(cfg.model)
        report = evaluate_bundle(bundle, records)
        print(report.to_text())
        doc = report.to_dict()
        if args.embeddings:
            labels = [r.label for r in records]
            export_embeddings(bundle, bundle.scaler.transform(records), args.embeddings, labels)
    else:
        reports = cross_test(records, cfg)
        for i, rep in enumerate(reports, start=1):
            print(f"fold {i}")
            print(rep.to_text())
        print(folds_table(reports))
        doc = {"folds": [r.to_dict() for r in reports]}
    if cfg.out:
        with open(cfg.out, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(cfg.out, "eval", cfg, [cfg.flows, cfg.labels, cfg.model])


def cmd_bench(cfg, args):
    _require(cfg, "model", "flows")
    bundle = load_model(cfg.model)
    records = read_flows_csv(cfg.flows)
    report = bench(bundle, records, cfg.bench_iters, cfg.bench_warmup)
    print(report.to_text())
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(report.to_json() + "\n")
        write_manifest(cfg.out, "bench", cfg, [cfg.model, cfg.flows])


def cmd_predict(cfg, args):
    _require(cfg, "model", "flows")
    bundle = load_model(cfg.model)
    fh = open(cfg.out, "w") if cfg.out else sys.stdout
    try:
        fh.write("index,class,p_benign,p_malicious\n")
        for i, rec in enumerate(iter_flows_csv(cfg.flows)):
            cls, (p0, p1) = bundle.predict(rec)
            fh.write(f"{i},{cls},{p0:.9g},{p1:.9g}\n")
    finally:
        if cfg.out:
            fh.close()
    if cfg.out:
        write_manifest(cfg.out, "predict", cfg, [cfg.model, cfg.flows])


def cmd_inspect(cfg, args):
    _require(cfg, "model")
    bundle = load_model(cfg.model)
    print(f"trainable parameters: {bundle.n_params()}")
    print(f"  embedding: {bundle.embedding.n_params()}")
    print(f"  encoder:   {bundle.encoder.n_params()}")
    print(f"  head:      {bundle.head.n_params()}")
    print(f"weight payload bytes: {bundle.payload_size()}")
    print(f"detector trained: {bundle.detector_trained}")
    print("manifest:")
    print(json.dumps(bundle.manifest, indent=2, sort_keys=True))
    if cfg.flows:
        records = read_flows_csv(cfg.flows)
        rep = sparsity_report(bundle.scaler.transform(records), cfg.tau)
        print(f"sparsity (|x| < {rep.tau}): overall {rep.overall:.4f}")
        print("  per feature: " + " ".join(f"{v:.3f}" for v in rep.per_feature))


def cmd_synth(cfg, args):
    from .synth import make_corpus

    _require(cfg, "out")
    corpus = make_corpus(n_flows=args.flows_count, seed=cfg.seed)
    write_pcap(cfg.out, corpus.packets)
    labels_out = args.labels_out or f"{cfg.out}.labels.csv"
    with open(labels_out, "w") as fh:
        fh.write(corpus.label_spec)
    print(f"{len(corpus.packets)} packets -> {cfg.out}; label rules -> {labels_out}")


HANDLERS = {
    "extract": cmd_extract, "fit": cmd_fit, "cluster": cmd_cluster, "train-embed": cmd_train_embed,
    "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "predict": cmd_predict,
    "inspect": cmd_inspect, "synth": cmd_synth,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FlowctxError, OSError, ValueError, KeyError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
