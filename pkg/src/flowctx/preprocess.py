"""From raw flow records to 15-dimensional model inputs.

Layout of a vector: one-hot protocol (TCP, UDP, OTHER) followed by the twelve
continuous features min-max scaled onto [0, 1] using the training split's
range. Values outside the fitted range are clamped.
"""
from __future__ import annotations

import csv
import dataclasses
import ipaddress
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import EmptyTrainingSet, MalformedRule, TooFewRecords
from .flows import CONTINUOUS_FEATURES, RawFeatureRecord
from .pcap import Protocol

PROTOCOL_VOCAB = ("TCP", "UDP", "OTHER")
N_CONTINUOUS = len(CONTINUOUS_FEATURES)
N_ONEHOT = len(PROTOCOL_VOCAB)
CLASSES = ("benign", "malicious")


def records_to_array(records: Sequence[RawFeatureRecord]) -> np.ndarray:
    """(n, 13) float64 array: protocol code then the continuous features."""
    out = np.empty((len(records), 1 + N_CONTINUOUS), dtype=np.float64)
    for i, rec in enumerate(records):
        out[i, 0] = int(rec.protocol)
        out[i, 1:] = [getattr(rec, name) for name in CONTINUOUS_FEATURES]
    return out


def _as_raw_array(X) -> np.ndarray:
    if len(X) and isinstance(X[0], RawFeatureRecord):
        return records_to_array(X)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 1 + N_CONTINUOUS:
        raise ValueError(f"expected records or an (n, {1 + N_CONTINUOUS}) array")
    return X


class FlowVectorizer(TransformerMixin, BaseEstimator):
    """One-hot the protocol and min-max scale the continuous features.

    ``fit`` accepts a list of :class:`RawFeatureRecord` or the equivalent
    ``(n, 13)`` array from :func:`records_to_array`.
    """

    def __init__(self, clamp=True):
        self.clamp = clamp

    def fit(self, X, y=None):
        if len(X) == 0:
            raise EmptyTrainingSet("cannot fit the scaler on an empty training split")
        raw = _as_raw_array(X)
        self.data_min_ = raw[:, 1:].min(axis=0)
        self.data_max_ = raw[:, 1:].max(axis=0)
        self.n_features_in_ = raw.shape[1]
        self._prepare()
        return self

    def _prepare(self):
        span = self.data_max_ - self.data_min_
        # constant features divide by inf and map to 0
        self._span = np.where(span > 0, span, np.inf)
        self._pairs = list(zip(self.data_min_.tolist(), self._span.tolist()))

    @classmethod
    def from_range(cls, data_min, data_max, clamp=True):
        vec = cls(clamp=clamp)
        vec.data_min_ = np.asarray(data_min, dtype=np.float64)
        vec.data_max_ = np.asarray(data_max, dtype=np.float64)
        vec.n_features_in_ = 1 + N_CONTINUOUS
        vec._prepare()
        return vec

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, ("data_min_", "data_max_"))
        raw = _as_raw_array(X)
        n = raw.shape[0]
        out = np.zeros((n, N_ONEHOT + N_CONTINUOUS), dtype=np.float32)
        codes = raw[:, 0].astype(np.int64)
        if n and (codes.min() < 0 or codes.max() >= N_ONEHOT):
            raise ValueError("protocol code out of range")
        out[np.arange(n), codes] = 1.0
        scaled = (raw[:, 1:] - self.data_min_) / self._span
        if self.clamp:
            np.clip(scaled, 0.0, 1.0, out=scaled)
        out[:, N_ONEHOT:] = scaled
        return out

    def transform_record(self, rec: RawFeatureRecord, out: Optional[np.ndarray] = None) -> np.ndarray:
        """Single-record fast path used by prediction."""
        if out is None:
            out = np.zeros(N_ONEHOT + N_CONTINUOUS, dtype=np.float32)
        else:
            out[:N_ONEHOT] = 0.0
        out[int(rec.protocol)] = 1.0
        # plain float arithmetic: same IEEE results as the batch path, less overhead
        vals = [(v - lo) / span for v, (lo, span) in zip(
            (rec.flow_dur, rec.iat_mean, rec.iat_std, rec.fin_num, rec.syn_num, rec.rst_num,
             rec.pkt_num, rec.pkts_per_sec, rec.num_s_port, rec.num_d_ip, rec.num_d_port,
             rec.con_per_sec), self._pairs)]
        if self.clamp:
            vals = [0.0 if v < 0.0 else 1.0 if v > 1.0 else v for v in vals]
        out[N_ONEHOT:] = vals
        return out


# function-style API mirroring the estimator

def fit_scaler(records) -> FlowVectorizer:
    return FlowVectorizer().fit(records)


def vectorize(record: RawFeatureRecord, scaler: FlowVectorizer) -> np.ndarray:
    return scaler.transform_record(record)


# -- label rules -----------------------------------------------------------

WILDCARD = "*"


@dataclass(frozen=True)
class LabelRule:
    src_ip: Optional[str]
    dst_ip: Optional[str]
    src_port: Optional[int]
    dst_port: Optional[int]
    protocol: Optional[Protocol]
    label: str

    def matches(self, src_ip, dst_ip, src_port, dst_port, protocol) -> bool:
        return ((self.src_ip is None or self.src_ip == src_ip)
                and (self.dst_ip is None or self.dst_ip == dst_ip)
                and (self.src_port is None or self.src_port == src_port)
                and (self.dst_port is None or self.dst_port == dst_port)
                and (self.protocol is None or self.protocol == protocol))


def _norm_ip(text):
    try:
        return str(ipaddress.ip_address(text))
    except ValueError:
        return text


def _parse_ip(text, lineno):
    text = text.strip()
    if text == WILDCARD:
        return None
    try:
        return str(ipaddress.ip_address(text))
    except ValueError:
        raise MalformedRule(f"line {lineno}: bad IP literal {text!r}") from None


def _parse_port(text, lineno):
    text = text.strip()
    if text == WILDCARD:
        return None
    if not text.isdigit() or int(text) > 65535:
        raise MalformedRule(f"line {lineno}: bad port literal {text!r}")
    return int(text)


def _parse_protocol(text, lineno):
    text = text.strip().upper()
    if text == WILDCARD:
        return None
    aliases = {"6": "TCP", "17": "UDP"}
    try:
        return Protocol[aliases.get(text, text)]
    except KeyError:
        raise MalformedRule(f"line {lineno}: bad protocol {text!r}") from None


@dataclass
class LabelSpec:
    """Ordered label rules; the first match wins, unmatched flows are benign."""

    rules: List[LabelRule]
    default: str = "benign"

    @classmethod
    def parse(cls, text_or_lines) -> "LabelSpec":
        lines = text_or_lines.splitlines() if isinstance(text_or_lines, str) else list(text_or_lines)
        reader = csv.reader(lines)
        header = [h.strip() for h in next(reader, [])]
        expected = ["src_ip", "dst_ip", "src_port", "dst_port", "protocol", "label"]
        if header != expected:
            raise MalformedRule(f"label spec header must be {','.join(expected)}")
        rules = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 6:
                raise MalformedRule(f"line {lineno}: expected 6 fields, got {len(row)}")
            label = row[5].strip().lower()
            if label not in CLASSES:
                raise MalformedRule(f"line {lineno}: label must be benign or malicious")
            rules.append(LabelRule(_parse_ip(row[0], lineno), _parse_ip(row[1], lineno),
                                   _parse_port(row[2], lineno), _parse_port(row[3], lineno),
                                   _parse_protocol(row[4], lineno), label))
        return cls(rules)

    @classmethod
    def load(cls, path) -> "LabelSpec":
        with open(path, newline="") as fh:
            return cls.parse(fh.read())

    def classify(self, rec: RawFeatureRecord) -> str:
        src, dst = _norm_ip(rec.src_ip), _norm_ip(rec.dst_ip)
        forward = (src, dst, rec.src_port, rec.dst_port, rec.protocol)
        reverse = (dst, src, rec.dst_port, rec.src_port, rec.protocol)
        for rule in self.rules:
            if rule.matches(*forward) or rule.matches(*reverse):
                return rule.label
        return self.default


def join_labels(records, spec: LabelSpec) -> List[RawFeatureRecord]:
    return [dataclasses.replace(rec, label=spec.classify(rec)) for rec in records]


def label_ids(records) -> np.ndarray:
    return np.array([CLASSES.index(r.label) for r in records], dtype=np.int64)


# -- sampling --------------------------------------------------------------

def split_folds(n_or_dataset, k: int = 3, seed=None) -> List[np.ndarray]:
    """Random partition of sample indices into ``k`` near-equal folds."""
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    if n < k:
        raise TooFewRecords(f"{n} records cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]


def fold_splits(folds):
    """Yield ``(train_idx, test_idx)``: each fold is the test set once."""
    for i, test in enumerate(folds):
        train = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        yield train, test


def downsample_size(n: int, rate: float) -> int:
    if not 0 < rate <= 1:
        raise ValueError("downsample rate must be in (0, 1]")
    # guard against rate*n landing a hair above an integer
    return min(n, math.ceil(round(rate * n, 9)))


def downsample(n_or_dataset, rate: float, seed=None) -> np.ndarray:
    """Sorted indices of a uniform sample without replacement of ceil(rate*n) items."""
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    size = downsample_size(n, rate)
    if size == n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))
