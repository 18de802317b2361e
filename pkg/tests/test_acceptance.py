"""Acceptance gate: one PASS/FAIL line per criterion, at the stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed straight to the terminal.
"""
import time

import numpy as np
import pytest

from flowctx.bundle import ModelBundle
from flowctx.cli import run
from flowctx.cluster import dbscan
from flowctx.config import RunConfig
from flowctx.evaluate import bench, gradient_norm_probe
from flowctx.flows import aggregate, extract_pcaps
from flowctx.nn import (BatchNorm, ClassifierHead, Dense, EmbeddingNet, EncoderNet, LeakyReLU, Sequential,
                        contrastive_loss, cross_entropy_loss, finite_diff_check, input_grad_check, margin_hinge,
                        param_count)
from flowctx.pcap import write_pcap
from flowctx.pipeline import cross_test
from flowctx.preprocess import LabelSpec, join_labels
from flowctx.synth import make_corpus, scan_packets
from flowctx.training import EmbedTrainConfig, train_embedding

from conftest import gaussian_blobs, ipv4_tcp_frame, pcap_bytes
from test_cluster import as_partition, naive_dbscan

F64 = np.float64


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
        assert ok, detail
    return emit


def test_01_parameter_accounting(verdict):
    t0 = time.perf_counter()
    emb, enc, head = EmbeddingNet(rng=0), EncoderNet(rng=0), ClassifierHead(rng=0)
    counts = (emb.n_params(), enc.n_params(), head.n_params())
    payload = ModelBundle(None, emb, enc, head).payload_size()
    blob = ModelBundle.untrained().to_bytes()
    hlen = int.from_bytes(blob[8:12], "little")
    on_disk = len(blob) - 12 - hlen - 4
    elapsed = time.perf_counter() - t0
    ok = (counts == (4368, 180608, 258) and param_count(emb, enc, head) == 185234
          and payload == on_disk == 740936 and elapsed < 1)
    verdict(1, "parameter accounting", ok,
            f"{counts} total {sum(counts)}, payload {on_disk} bytes, {elapsed:.2f}s")


def _fd_errors(seed):
    rng = np.random.default_rng(seed)
    h = 1e-4
    errors = []
    # embedding (dense, batch norm, leaky relu) under the contrastive loss
    net = EmbeddingNet(n_in=5, hidden=6, n_out=3, rng=seed, dtype=F64)
    net.layer("bn1").gamma[...] = rng.uniform(0.5, 1.5, 6)
    net.layer("bn1").beta[...] = rng.normal(0, 0.3, 6)
    x = rng.random((8, 5))
    out = net.forward(x, train=True)
    i, j = rng.integers(0, 8, 12), rng.integers(0, 8, 12)
    j = np.where(i == j, (j + 1) % 8, j)
    pairs = np.stack([i, j, np.arange(12) % 2], axis=1)
    margin = 0.6 * float(np.median(np.linalg.norm(out[i] - out[j], axis=1)))
    loss = lambda o: contrastive_loss(o, pairs, margin)
    errors += [finite_diff_check(net, loss, x, h=h), input_grad_check(net, loss, x, h=h)]
    # encoder + head under cross-entropy
    stack = Sequential(EncoderNet(n_in=7, widths=(6, 5, 4), rng=seed, dtype=F64).layers
                       + ClassifierHead(n_in=4, rng=seed, dtype=F64).layers)
    x = rng.standard_normal((6, 7))
    y = rng.integers(0, 2, 6)
    loss = lambda o: cross_entropy_loss(o, y)
    errors += [finite_diff_check(stack, loss, x, h=h, train=False),
               input_grad_check(stack, loss, x, h=h, train=False)]
    # each layer type alone
    x = rng.standard_normal((5, 4))
    target = rng.standard_normal((5, 4))
    quad = lambda o: (0.5 * float(((o - target) ** 2).sum()), o - target)
    bn = BatchNorm(4, dtype=F64)
    bn.gamma[...] = rng.uniform(0.5, 2, 4)
    bn.beta[...] = rng.standard_normal(4)
    for layer in (Dense(4, 4, rng=seed, dtype=F64), bn, LeakyReLU()):
        single = Sequential([("layer", layer)])
        if layer.trainable:
            errors.append(finite_diff_check(single, quad, x, h=h))
        errors.append(input_grad_check(single, quad, x, h=h))
    return errors


def test_02_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst = max(max(_fd_errors(seed)) for seed in range(20))
    elapsed = time.perf_counter() - t0
    verdict(2, "finite differences vs analytic gradients", worst < 1e-4 and elapsed < 60,
            f"20 seeds, max relative error {worst:.2e} (< 1e-4), {elapsed:.1f}s")


def test_03_dbscan_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(100):
        n, dim = int(rng.integers(1, 201)), int(rng.integers(1, 16))
        eps, min_pts = float(rng.uniform(0.05, 1.5)), int(rng.integers(1, 13))
        centers = rng.random((3, dim)) * 2
        X = centers[rng.integers(0, 3, n)] + 0.2 * rng.standard_normal((n, dim))
        labels, _ = dbscan(X, eps, min_pts)
        mismatches += as_partition(labels) != naive_dbscan(X.tolist(), eps, min_pts)
    elapsed = time.perf_counter() - t0
    verdict(3, "DBSCAN matches naive reference", mismatches == 0 and elapsed < 60,
            f"{100 - mismatches}/100 instances identical, {elapsed:.1f}s")


def test_04_contrastive_margin(verdict):
    t0 = time.perf_counter()
    X, y = gaussian_blobs(n_per=100, k=3, dim=15, sigma=0.05, seed=1)
    m = 1.0
    net, losses = train_embedding(X, y, EmbedTrainConfig(epochs=150, margin=m, seed=0))
    E = net.forward(X, train=False).astype(F64)
    D = np.linalg.norm(E[:, None, :] - E[None, :, :], axis=2)
    upper = np.triu(np.ones_like(D, dtype=bool), k=1)
    same = (y[:, None] == y[None, :]) & upper
    diff = (y[:, None] != y[None, :]) & upper
    intra = float(np.mean(D[same] <= m + 0.1))
    inter = float(np.mean(D[diff] >= 2 * m - 0.1))
    ratio = losses[-1] / losses[0]
    elapsed = time.perf_counter() - t0
    ok = intra >= 0.95 and inter >= 0.95 and ratio < 0.1 and elapsed < 120
    verdict(4, "contrastive margin property", ok,
            f"intra<=m+0.1 {intra:.3f}, inter>=2m-0.1 {inter:.3f}, final/initial loss {ratio:.2e}, "
            f"{elapsed:.1f}s")


def test_05_condition_two_grid(verdict):
    m = 1.0
    e_pos = np.linspace(0.0, 3.0 * m, 100)[:, None]
    e_neg = e_pos + m  # along the margin line
    eps = np.linspace(m / 100, m, 100)[None, :]
    before = margin_hinge(e_pos, e_neg, m)
    after = margin_hinge(e_pos - eps, e_neg + eps, m)
    violations = int(np.sum(after > before))
    verdict(5, "hinge non-increasing under the pull/push step", after.shape == (100, 100) and violations == 0,
            f"{after.size} grid points, {violations} violations")


def test_06_golden_pcap_and_scan(verdict, tmp_path):
    frames = [
        (1000, 0, ipv4_tcp_frame("10.1.1.1", "10.2.2.2", 33000, 80, 0x02)),
        (1000, 100000, ipv4_tcp_frame("10.2.2.2", "10.1.1.1", 80, 33000, 0x12)),
        (1000, 300000, ipv4_tcp_frame("10.1.1.1", "10.2.2.2", 33000, 80, 0x10)),
    ]
    path = tmp_path / "golden.pcap"
    path.write_bytes(pcap_bytes(frames))
    (rec,), _ = extract_pcaps([path])
    got = (rec.flow_dur, rec.iat_mean, rec.iat_std, rec.pkts_per_sec)
    golden = got == (0.3, 0.15, 0.05, 10.0)

    n_ports, duration = 50, 10.0
    flows = aggregate(scan_packets(src="10.66.0.1", target="10.9.0.1", n_ports=n_ports, duration=duration))
    last = max(flows, key=lambda r: r.first_ts_ns)
    # ground truth: the generator sends n_ports SYNs, the last one `duration` seconds after the first
    truth_rate = n_ports / duration
    scan_ok = last.num_d_port == n_ports and last.con_per_sec == truth_rate
    verdict(6, "golden capture and scan ground truth", golden and scan_ok,
            f"golden {got}; scan num_d_port {last.num_d_port}, con_per_sec {last.con_per_sec} "
            f"(expected {truth_rate:.6g})")


@pytest.mark.slow
def test_07_end_to_end_detection(verdict, tmp_path):
    t0 = time.perf_counter()
    corpus = make_corpus(n_flows=50_000, seed=0)
    write_pcap(tmp_path / "corpus.pcap", corpus.packets)
    records, _ = extract_pcaps([tmp_path / "corpus.pcap"])
    records = join_labels(records, LabelSpec.parse(corpus.label_spec))
    reports = cross_test(records, RunConfig())
    f1 = [(r.per_class["benign"].f1, r.per_class["malicious"].f1) for r in reports]
    worst = min(min(pair) for pair in f1)
    elapsed = time.perf_counter() - t0
    verdict(7, "end-to-end synthetic detection", worst >= 0.95 and elapsed < 600,
            f"{len(records)} flows, 3-fold F1 (benign, malicious) "
            + ", ".join(f"({b:.4f}, {m:.4f})" for b, m in f1) + f", {elapsed:.0f}s")


def test_08_gradient_norm_law(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        rows = gradient_norm_probe(rng.random(15), seed=int(rng.integers(1 << 31)))
        for a, b in zip(rows, rows[1:]):
            expected = b["input_norm"] / a["input_norm"]
            worst = max(worst, abs(b["grad_norm"] / a["grad_norm"] - expected))
    verdict(8, "first-layer gradient norm linear in input norm", worst < 1e-6,
            f"max ratio error {worst:.2e} over 20 inputs")


def test_09_latency(verdict):
    t0 = time.perf_counter()
    corpus = make_corpus(n_flows=2000, seed=9)
    records = aggregate(corpus.packets)
    bundle = ModelBundle.untrained(seed=1)
    bundle.scaler.fit(records)
    bundle.embedding.forward(bundle.scaler.transform(records)[:256], train=True)
    bundle.refresh()
    rep = bench(bundle, records[:500], n_iters=5000, warmup=500)
    s = rep.stages
    ordered = all(t.p50_us <= t.p90_us <= t.p99_us for t in s.values())
    ordered &= s["embedding"].p50_us <= s["end_to_end"].p50_us
    e2e = s["end_to_end"]
    qps_consistent = abs(e2e.qps_measured / e2e.qps_from_mean - 1) < 0.2
    elapsed = time.perf_counter() - t0
    ok = e2e.p50_us < 50 and ordered and qps_consistent and elapsed < 60
    verdict(9, "single-thread batch-1 latency", ok,
            f"end-to-end p50 {e2e.p50_us:.1f}us p99 {e2e.p99_us:.1f}us, embedding p50 "
            f"{s['embedding'].p50_us:.1f}us, encoder p50 {s['encoder'].p50_us:.1f}us, "
            f"qps {e2e.qps_measured:.0f}, {elapsed:.1f}s")


def _pipeline(d):
    flows, model = str(d / "flows.csv"), str(d / "model.bin")
    common = ["--seed", "11", "--downsample-rate", "0.1"]
    steps = [
        ["extract", "--pcap", str(d / "c.pcap"), "--labels", str(d / "labels.csv"), "--out", flows],
        ["cluster", "--flows", flows, "--out", str(d / "clusters.csv")] + common,
        ["train-embed", "--flows", flows, "--model", str(d / "embed.bin")] + common,
        ["train", "--flows", flows, "--embed-model", str(d / "embed.bin"), "--model", model] + common,
        ["eval", "--flows", flows, "--model", model, "--out", str(d / "eval.json")] + common,
        ["eval", "--flows", flows, "--folds", "3", "--detector-epochs", "3", "--out", str(d / "cross.json")]
        + common,
    ]
    codes = [run(step) for step in steps]
    outputs = sorted(p for p in d.iterdir() if p.name not in ("c.pcap", "labels.csv"))
    return codes, {p.name: p.read_bytes() for p in outputs}


def test_10_determinism(verdict, tmp_path):
    corpus = make_corpus(n_flows=5000, seed=4)
    write_pcap(tmp_path / "c.pcap", corpus.packets)
    (tmp_path / "labels.csv").write_text(corpus.label_spec)
    codes_a, first = _pipeline(tmp_path)
    codes_b, second = _pipeline(tmp_path)
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = codes_a == codes_b == [0] * 6 and not differing and first.keys() == second.keys()
    verdict(10, "re-runs are byte-identical", ok,
            f"{len(first)} output files compared, exit codes {codes_a}, differing {differing or 'none'}")
