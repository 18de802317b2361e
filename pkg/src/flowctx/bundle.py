"""Model bundle and its binary file format.

Layout::

    b"FLOWXPT1"                      8-byte magic
    uint32 LE                        header length in bytes
    header                           UTF-8 JSON (sorted keys, compact)
    tensors                          little-endian float32, in header order
    uint32 LE                        CRC-32 of every preceding byte

Only trainable tensors go in the payload; batch-norm running statistics,
scaler ranges and the manifest live in the header.
"""
from __future__ import annotations

import hashlib
import math
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CorruptModelFile
from .flows import RawFeatureRecord, record_row
from .nn import ClassifierHead, EmbeddingNet, EncoderNet, FusedDetector, param_count
from .preprocess import CLASSES, PROTOCOL_VOCAB, FlowVectorizer
from .training import predict_from_logits

MAGIC = b"FLOWXPT1"
FORMAT_VERSION = 1


@dataclass
class ModelBundle:
    scaler: FlowVectorizer
    embedding: EmbeddingNet
    encoder: EncoderNet
    head: ClassifierHead
    margin: float = 1.0
    dbscan: dict = field(default_factory=lambda: {"eps": 0.3, "min_pts": 10})
    manifest: dict = field(default_factory=dict)
    detector_trained: bool = True
    _fused: Optional[FusedDetector] = field(default=None, repr=False, compare=False)

    @classmethod
    def untrained(cls, scaler=None, seed=0, **kwargs):
        rng = np.random.default_rng(seed)
        if scaler is None:
            scaler = FlowVectorizer.from_range(np.zeros(12), np.ones(12))
        return cls(scaler, EmbeddingNet(rng=rng), EncoderNet(rng=rng), ClassifierHead(rng=rng), **kwargs)

    @property
    def fused(self) -> FusedDetector:
        if self._fused is None:
            self._fused = FusedDetector(self.embedding, self.encoder, self.head)
        return self._fused

    def refresh(self):
        """Drop cached inference weights after the networks were modified."""
        self._fused = None

    def n_params(self) -> int:
        return param_count(self.embedding, self.encoder, self.head)

    def named_tensors(self):
        for prefix, net in (("embedding", self.embedding), ("encoder", self.encoder), ("head", self.head)):
            for name, arr in net.named_parameters():
                yield f"{prefix}.{name}", arr

    def vectorize(self, records):
        return self.scaler.transform(records)

    def logits(self, X):
        return self.fused.logits(X)

    def predict_vectors(self, X):
        return predict_from_logits(self.fused.logits(X))

    def predict(self, record: RawFeatureRecord):
        """Returns ``(class name, (p_benign, p_malicious))``."""
        l0, l1 = self.fused.logits_one(self.scaler.transform_record(record)).tolist()
        top = l0 if l0 >= l1 else l1
        e0, e1 = math.exp(l0 - top), math.exp(l1 - top)
        total = e0 + e1
        return CLASSES[1 if l1 > l0 else 0], (e0 / total, e1 / total)

    def embed(self, X):
        return self.fused.embed(np.asarray(X, dtype=np.float32))

    # -- serialisation ---------------------------------------------------
    def header(self) -> dict:
        bn = self.embedding.layer("bn1")
        return {
            "format": FORMAT_VERSION,
            "architecture": {
                "input_dim": self.embedding.n_in,
                "embedding": [self.embedding.n_in, self.embedding.hidden, self.embedding.n_out],
                "encoder": [self.encoder.n_in, *self.encoder.widths],
                "classes": self.head.n_classes,
                "leaky_slope": self.embedding.layer("act1").slope,
            },
            "batchnorm": {
                "momentum": bn.momentum,
                "eps": bn.eps,
                "running_mean": [float(v) for v in bn.running_mean],
                "running_var": [float(v) for v in bn.running_var],
            },
            "scaler": {
                "min": [float(v) for v in self.scaler.data_min_],
                "max": [float(v) for v in self.scaler.data_max_],
            },
            "protocol_vocab": list(PROTOCOL_VOCAB),
            "class_names": list(CLASSES),
            "margin": self.margin,
            "dbscan": self.dbscan,
            "frozen": ["embedding"],
            "detector_trained": self.detector_trained,
            "tensors": [{"name": n, "shape": list(a.shape)} for n, a in self.named_tensors()],
            "manifest": self.manifest,
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in self.named_tensors())
        body = MAGIC + struct.pack("<I", len(header)) + header + payload
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelBundle":
        if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
            raise CorruptModelFile("bad magic")
        (crc,) = struct.unpack("<I", data[-4:])
        if zlib.crc32(data[:-4]) != crc:
            raise CorruptModelFile("checksum mismatch")
        (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
        start = len(MAGIC) + 4
        if start + hlen > len(data) - 4:
            raise CorruptModelFile("header length exceeds file")
        try:
            header = json.loads(data[start:start + hlen].decode())
            arch = header["architecture"]
            tensors = header["tensors"]
        except (ValueError, KeyError) as exc:
            raise CorruptModelFile(f"unreadable header: {exc}") from None
        payload = data[start + hlen:-4]
        expected = sum(int(np.prod(t["shape"])) for t in tensors) * 4
        if len(payload) != expected:
            raise CorruptModelFile(f"payload is {len(payload)} bytes, header declares {expected}")

        n_in, hidden, n_out = arch["embedding"]
        emb = EmbeddingNet(n_in, hidden, n_out, slope=arch["leaky_slope"])
        enc = EncoderNet(arch["encoder"][0], tuple(arch["encoder"][1:]), slope=arch["leaky_slope"])
        head = ClassifierHead(arch["encoder"][-1], arch["classes"])
        bn = emb.layer("bn1")
        bn.momentum = header["batchnorm"]["momentum"]
        bn.eps = header["batchnorm"]["eps"]
        bn.running_mean[...] = header["batchnorm"]["running_mean"]
        bn.running_var[...] = header["batchnorm"]["running_var"]
        bundle = cls(
            FlowVectorizer.from_range(header["scaler"]["min"], header["scaler"]["max"]),
            emb, enc, head,
            margin=header["margin"],
            dbscan=header["dbscan"],
            manifest=header["manifest"],
            detector_trained=header["detector_trained"],
        )
        targets = dict(bundle.named_tensors())
        offset = 0
        for t in tensors:
            arr = targets.get(t["name"])
            if arr is None or list(arr.shape) != t["shape"]:
                raise CorruptModelFile(f"unexpected tensor {t['name']} {t['shape']}")
            count = arr.size
            arr[...] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(arr.shape)
            offset += count * 4
        return bundle

    def payload_size(self) -> int:
        return self.n_params() * 4


def save_model(bundle: ModelBundle, path):
    data = bundle.to_bytes()
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_model(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return ModelBundle.from_bytes(fh.read())


def predict(bundle: ModelBundle, record: RawFeatureRecord):
    return bundle.predict(record)


def dataset_hash(records) -> str:
    """SHA-256 over the records' CSV rows; identifies training data in manifests."""
    h = hashlib.sha256()
    for rec in records:
        h.update(",".join(record_row(rec) + [rec.label or ""]).encode())
        h.update(b"\n")
    return h.hexdigest()
