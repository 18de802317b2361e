"""Metrics, input-sparsity and gradient-norm diagnostics, latency benchmark,
and embedding export.

Accuracy is intentionally absent: the classes are heavily imbalanced.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import LengthMismatch
from .nn import Dense, LeakyReLU, Sequential, cross_entropy_loss
from .preprocess import CLASSES


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    support: int


@dataclass
class MetricsReport:
    per_class: Dict[str, ClassMetrics]
    total: int
    confusion: List[List[int]] = field(default_factory=list)  # rows: true class, cols: predicted

    def to_dict(self):
        return {
            "per_class": {k: asdict(v) for k, v in self.per_class.items()},
            "total": self.total,
            "confusion": self.confusion,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        lines = [f"{'class':<10} {'precision':>9} {'recall':>9} {'f1':>9} {'support':>8}"]
        for name, m in self.per_class.items():
            lines.append(f"{name:<10} {m.precision:>9.4f} {m.recall:>9.4f} {m.f1:>9.4f} {m.support:>8d}")
        lines.append(f"total {self.total}")
        return "\n".join(lines)


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def score(predictions, labels, classes=CLASSES) -> MetricsReport:
    """Per-class one-vs-rest precision, recall and F1 for integer class ids."""
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if len(pred) != len(true):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(true)} labels")
    if len(pred) == 0:
        raise LengthMismatch("nothing to score")
    k = len(classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    per_class = {}
    n = len(pred)
    for c, name in enumerate(classes):
        tp = int(confusion[c, c])
        fp = int(confusion[:, c].sum() - tp)
        fn = int(confusion[c, :].sum() - tp)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        per_class[name] = ClassMetrics(p, r, _f1(p, r), tp, fp, fn, n - tp - fp - fn, tp + fn)
    return MetricsReport(per_class, n, confusion.tolist())


def folds_table(reports: List[MetricsReport]) -> str:
    """Per-fold precision / recall / F1 rows per class, in percent."""
    lines = [f"{'fold':<6}{'class':<11}{'Precision':>10}{'Recall':>10}{'F1-Score':>10}"]
    for i, rep in enumerate(reports, start=1):
        for name, m in rep.per_class.items():
            lines.append(f"{i:<6}{name:<11}{100 * m.precision:>9.2f}%{100 * m.recall:>9.2f}%{100 * m.f1:>9.2f}%")
    return "\n".join(lines)


# -- sparsity --------------------------------------------------------------

@dataclass
class SparsityReport:
    tau: float
    per_feature: List[float]
    overall: float

    def to_dict(self):
        return asdict(self)


def sparsity_report(vectors, tau: float = 0.01) -> SparsityReport:
    """Fraction of components with ``|x| < tau``, per feature and overall."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.size == 0:
        raise ValueError("sparsity_report needs at least one vector")
    X = X.reshape(len(X), -1)
    near_zero = np.abs(X) < tau
    return SparsityReport(tau, near_zero.mean(axis=0).tolist(), float(near_zero.mean()))


# -- gradient norms --------------------------------------------------------

def gradient_norm_probe(x, scales=(1.0, 0.5, 0.25, 0.125), hidden=16, n_classes=2, target=0, seed=0):
    """First-layer weight-gradient Frobenius norm for scaled copies of ``x``.

    Only the first layer's weight gradient is measured. The upstream error
    signal is held fixed: it is computed once at the unscaled input and
    reused for every scale, so the norms differ only through the input.
    Returns a list of ``{"scale", "input_norm", "grad_norm", "bias_grad_norm"}``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    net = Sequential([
        ("fc1", Dense(len(x), hidden, rng, np.float64)),
        ("act1", LeakyReLU()),
        ("fc2", Dense(hidden, n_classes, rng, np.float64)),
    ])
    fc1 = net.layer("fc1")
    net.zero_grad()
    logits = net.forward(x[None, :], train=True)
    _, d_logits = cross_entropy_loss(logits, np.array([target]))
    net.layer("fc2").backward(d_logits)
    delta = net.layer("act1").backward(d_logits @ net.layer("fc2").weight)
    rows = []
    for s in scales:
        xs = s * x
        fc1.zero_grad()
        fc1.forward(xs[None, :])
        fc1.backward(delta)
        rows.append({
            "scale": float(s),
            "input_norm": float(np.linalg.norm(xs)),
            "grad_norm": float(np.linalg.norm(fc1.d_weight)),
            "bias_grad_norm": float(np.linalg.norm(fc1.d_bias)),
        })
    return rows


# -- benchmark -------------------------------------------------------------

@dataclass
class StageTiming:
    p50_us: float
    p90_us: float
    p99_us: float
    mean_us: float
    qps_measured: float
    qps_from_mean: float


@dataclass
class BenchReport:
    stages: Dict[str, StageTiming]
    batch_size: int
    warmup: int
    iterations: int

    def to_dict(self):
        return {"stages": {k: asdict(v) for k, v in self.stages.items()}, "batch_size": self.batch_size,
                "warmup": self.warmup, "iterations": self.iterations}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        lines = [f"{'stage':<12}{'p50 us':>9}{'p90 us':>9}{'p99 us':>9}{'mean us':>9}{'qps':>12}"]
        for name, t in self.stages.items():
            lines.append(f"{name:<12}{t.p50_us:>9.2f}{t.p90_us:>9.2f}{t.p99_us:>9.2f}"
                         f"{t.mean_us:>9.2f}{t.qps_measured:>12.0f}")
        lines.append(f"batch size {self.batch_size}, warmup {self.warmup}, iterations {self.iterations}")
        return "\n".join(lines)


def _time_stage(fn, inputs, n_iters, warmup):
    clock = time.perf_counter_ns
    m = len(inputs)
    for k in range(warmup):
        fn(inputs[k % m])
    samples = np.empty(n_iters, dtype=np.int64)
    start = clock()
    for k in range(n_iters):
        t0 = clock()
        fn(inputs[k % m])
        samples[k] = clock() - t0
    wall = clock() - start
    us = samples / 1000.0
    p50, p90, p99 = np.percentile(us, [50, 90, 99])
    mean = float(us.mean())
    return StageTiming(float(p50), float(p90), float(p99), mean,
                       n_iters / (wall / 1e9), 1e6 / mean if mean > 0 else float("inf"))


def bench(bundle, records, n_iters=1000, warmup=100) -> BenchReport:
    """Single-thread, batch-1 timing of the embedding, encoder+head and full predict."""
    if n_iters < 1000 or warmup < 100:
        raise ValueError("bench needs n_iters >= 1000 and warmup >= 100")
    records = list(records)
    if not records:
        raise ValueError("bench needs at least one record")
    fused = bundle.fused
    vectors = bundle.vectorize(records)
    concats = np.concatenate([vectors, fused.embed(vectors)], axis=1).astype(np.float32)
    with threadpool_limits(limits=1):
        stages = {
            "embedding": _time_stage(fused.embed, vectors, n_iters, warmup),
            "encoder": _time_stage(fused.encode_head, concats, n_iters, warmup),
            "end_to_end": _time_stage(bundle.predict, records, n_iters, warmup),
        }
    return BenchReport(stages, 1, warmup, n_iters)


# -- embedding export ------------------------------------------------------

def export_embeddings(bundle, vectors, path, labels=None, clusters: Optional[dict] = None):
    """CSV of ``index, e0..e15, label, cluster`` in dataset order.

    ``clusters`` maps dataset index to cluster id for the rows that were
    clustered; other rows get an empty cluster field.
    """
    emb = bundle.embed(np.asarray(vectors, dtype=np.float32))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index"] + [f"e{k}" for k in range(emb.shape[1])] + ["label", "cluster"])
        for i, row in enumerate(emb):
            label = "" if labels is None else labels[i]
            cluster = "" if clusters is None or i not in clusters else clusters[i]
            writer.writerow([i] + [f"{float(v) + 0.0:.9g}" for v in row] + [label, cluster])
    return len(emb)
