import math
import struct
import zlib

import numpy as np
import pytest

from flowctx.bundle import MAGIC, ModelBundle, load_model, predict, save_model
from flowctx.errors import CorruptModelFile
from flowctx.preprocess import FlowVectorizer

from conftest import make_record


def _trained_like(seed=0):
    b = ModelBundle.untrained(seed=seed, manifest={"note": "test"})
    b.embedding.forward(np.random.default_rng(seed).random((64, 15)).astype(np.float32), train=True)
    b.refresh()
    return b


def test_payload_size_and_file_layout(tmp_path):
    b = _trained_like()
    assert b.n_params() == 185234
    assert b.payload_size() == 740936
    path = tmp_path / "m.bin"
    size = save_model(b, path)
    data = path.read_bytes()
    assert size == len(data) and data[:8] == MAGIC
    (hlen,) = struct.unpack_from("<I", data, 8)
    assert len(data) == 8 + 4 + hlen + 740936 + 4
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_round_trip_is_byte_identical(tmp_path):
    b = _trained_like(3)
    save_model(b, tmp_path / "a.bin")
    back = load_model(tmp_path / "a.bin")
    save_model(back, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    bn, bn2 = b.embedding.layer("bn1"), back.embedding.layer("bn1")
    assert np.array_equal(bn.running_mean, bn2.running_mean) and np.array_equal(bn.running_var, bn2.running_var)
    X = np.random.default_rng(1).random((20, 15)).astype(np.float32)
    assert np.array_equal(b.logits(X), back.logits(X))
    assert back.manifest == {"note": "test"}


@pytest.mark.parametrize("mutate", [
    lambda d: d[:100],
    lambda d: d[:-1],
    lambda d: b"FLOWXPT2" + d[8:],
    lambda d: d[:5000] + bytes([d[5000] ^ 0xFF]) + d[5001:],
    lambda d: b"",
])
def test_corrupt_files_are_rejected(mutate):
    data = _trained_like().to_bytes()
    with pytest.raises(CorruptModelFile):
        ModelBundle.from_bytes(mutate(data))


def test_inconsistent_header_with_valid_crc():
    data = _trained_like().to_bytes()
    body = data[:-4] + b"\x00" * 4  # payload longer than declared
    with pytest.raises(CorruptModelFile):
        ModelBundle.from_bytes(body + struct.pack("<I", zlib.crc32(body)))


def test_zero_network_predicts_benign_with_even_odds():
    b = ModelBundle.untrained()
    for _, arr in b.named_tensors():
        arr[...] = 0
    b.refresh()
    label, probs = b.predict(make_record())
    assert label == "benign" and probs == (0.5, 0.5)


def test_hand_set_bundle_class():
    b = ModelBundle.untrained()
    for _, arr in b.named_tensors():
        arr[...] = 0
    b.head.layer("fc").bias[...] = [0.0, 1.0]
    b.refresh()
    label, (p0, p1) = predict(b, make_record())
    assert label == "malicious"
    assert p1 == pytest.approx(1 / (1 + math.exp(-1)), rel=1e-6)
    assert p0 + p1 == pytest.approx(1.0, abs=1e-12)


def test_single_record_predict_agrees_with_batch():
    recs = [make_record(flow_dur=float(v), pkt_num=int(v * 40) + 1) for v in np.linspace(0, 5, 25)]
    b = _trained_like(5)
    b.scaler = FlowVectorizer().fit(recs)
    ids, probs = b.predict_vectors(b.vectorize(recs))
    for rec, i, p in zip(recs, ids, probs):
        label, q = b.predict(rec)
        assert label == ("benign", "malicious")[i]
        assert np.allclose(q, p, atol=1e-6)
        assert sum(q) == pytest.approx(1.0, abs=1e-12)
