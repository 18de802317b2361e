import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from flowctx.errors import EmptyTrainingSet, MalformedRule, TooFewRecords
from flowctx.flows import CONTINUOUS_FEATURES
from flowctx.pcap import Protocol
from flowctx.preprocess import (FlowVectorizer, LabelSpec, downsample, fit_scaler, fold_splits, join_labels,
                                label_ids, split_folds, vectorize)

from conftest import make_record

HEADER = "src_ip,dst_ip,src_port,dst_port,protocol,label\n"


def test_fit_min_max():
    recs = [make_record(flow_dur=v) for v in (2.0, 4.0, 10.0)]
    sc = fit_scaler(recs)
    assert sc.data_min_[0] == 2.0 and sc.data_max_[0] == 10.0


def test_constant_feature_maps_to_zero():
    recs = [make_record(num_d_ip=5) for _ in range(3)]
    sc = fit_scaler(recs)
    k = CONTINUOUS_FEATURES.index("num_d_ip")
    assert sc.data_min_[k] == sc.data_max_[k] == 5
    assert np.all(sc.transform(recs)[:, 3 + k] == 0.0)
    assert vectorize(make_record(num_d_ip=9), sc)[3 + k] == 0.0


def test_refit_on_permutation_is_identical():
    rng = np.random.default_rng(0)
    recs = [make_record(flow_dur=float(v), pkt_num=int(v * 10) + 1) for v in rng.random(20)]
    a, b = fit_scaler(recs), fit_scaler(recs[::-1])
    assert np.array_equal(a.data_min_, b.data_min_) and np.array_equal(a.data_max_, b.data_max_)


def test_one_hot_and_scaling_examples():
    recs = [make_record(Protocol.TCP, flow_dur=1.0), make_record(Protocol.UDP, flow_dur=5.0),
            make_record(Protocol.OTHER, flow_dur=3.0)]
    sc = fit_scaler(recs)
    X = sc.transform(recs)
    assert X.shape == (3, 15) and X.dtype == np.float32
    assert X[0, :3].tolist() == [1, 0, 0]
    assert X[1, :3].tolist() == [0, 1, 0]
    assert X[2, :3].tolist() == [0, 0, 1]
    assert X[0, 3] == 0.0 and X[1, 3] == 1.0
    quarter = make_record(flow_dur=1.0 + 0.25 * 4.0)
    assert vectorize(quarter, sc)[3] == 0.25


def test_out_of_range_is_clamped():
    sc = fit_scaler([make_record(flow_dur=1.0), make_record(flow_dur=2.0)])
    assert vectorize(make_record(flow_dur=50.0), sc)[3] == 1.0
    assert vectorize(make_record(flow_dur=-3.0), sc)[3] == 0.0
    raw = FlowVectorizer(clamp=False).fit([make_record(flow_dur=1.0), make_record(flow_dur=2.0)])
    assert raw.transform([make_record(flow_dur=3.0)])[0, 3] == 2.0


def test_empty_training_set():
    with pytest.raises(EmptyTrainingSet):
        FlowVectorizer().fit([])


def test_estimator_api():
    sc = FlowVectorizer()
    assert sc.get_params() == {"clamp": True}
    assert clone(sc).get_params() == sc.get_params()
    recs = [make_record(flow_dur=1.0), make_record(flow_dur=2.0)]
    assert np.array_equal(sc.fit_transform(recs), FlowVectorizer().fit(recs).transform(recs))


_feature = st.floats(0, 1e6, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(list(Protocol)), *[_feature] * 12), min_size=1, max_size=40))
def test_training_vectors_in_box_and_one_hot(rows):
    recs = [make_record(p, **dict(zip(CONTINUOUS_FEATURES, vals))) for p, *vals in rows]
    sc = FlowVectorizer(clamp=False).fit(recs)
    X = sc.transform(recs)
    assert np.all(X[:, :3].sum(axis=1) == 1) and set(np.unique(X[:, :3])) <= {0.0, 1.0}
    assert np.all((X[:, 3:] >= 0) & (X[:, 3:] <= 1))
    for rec, row in zip(recs, X):
        assert np.array_equal(sc.transform_record(rec), row)


def test_label_rules():
    spec = LabelSpec.parse(HEADER + "10.0.0.5,*,*,*,*,malicious\n")
    recs = [make_record(src_ip="10.0.0.5"), make_record(src_ip="10.0.0.6"),
            make_record(src_ip="10.0.0.7", dst_ip="10.0.0.5")]
    assert [r.label for r in join_labels(recs, spec)] == ["malicious", "benign", "malicious"]
    assert recs[0].label is None  # pure: inputs untouched


def test_earlier_rule_wins():
    spec = LabelSpec.parse(HEADER + "*,*,*,443,TCP,benign\n10.0.0.5,*,*,*,*,malicious\n")
    assert spec.classify(make_record(src_ip="10.0.0.5", dst_port=443)) == "benign"
    assert spec.classify(make_record(src_ip="10.0.0.5", dst_port=80)) == "malicious"


def test_rule_ip_normalisation_and_protocol_numbers():
    spec = LabelSpec.parse(HEADER + "2001:DB8:0::1,*,*,53,17,malicious\n")
    rec = make_record(Protocol.UDP, src_ip="2001:db8::1", dst_port=53)
    assert spec.classify(rec) == "malicious"
    assert spec.classify(make_record(Protocol.TCP, src_ip="2001:db8::1", dst_port=53)) == "benign"


@pytest.mark.parametrize("row", ["10.0.0.999,*,*,*,*,malicious", "*,*,http,*,*,malicious",
                                 "*,*,*,70000,*,benign", "*,*,*,*,SCTP,benign", "*,*,*,*,*,evil",
                                 "*,*,*,*,malicious"])
def test_malformed_rules(row):
    with pytest.raises(MalformedRule):
        LabelSpec.parse(HEADER + row + "\n")


def test_label_ids():
    recs = [make_record(label="benign"), make_record(label="malicious")]
    assert label_ids(recs).tolist() == [0, 1]


@pytest.mark.parametrize("n, sizes", [(9, [3, 3, 3]), (10, [4, 3, 3])])
def test_fold_sizes(n, sizes):
    folds = split_folds(n, 3, seed=1)
    assert [len(f) for f in folds] == sizes
    assert sorted(np.concatenate(folds).tolist()) == list(range(n))


def test_folds_are_seeded():
    assert all(np.array_equal(a, b) for a, b in zip(split_folds(50, 3, 4), split_folds(50, 3, 4)))
    assert not all(np.array_equal(a, b) for a, b in zip(split_folds(50, 3, 4), split_folds(50, 3, 5)))


def test_fold_splits_two_to_one():
    folds = split_folds(30, 3, 0)
    for train, test in fold_splits(folds):
        assert len(train) == 20 and len(test) == 10
        assert not set(train) & set(test)


def test_too_few_records():
    with pytest.raises(TooFewRecords):
        split_folds(2, 3, 0)


def test_downsample():
    idx = downsample(1000, 0.02, seed=3)
    assert len(idx) == 20 and len(set(idx.tolist())) == 20
    rest = set(range(1000)) - set(idx.tolist())
    assert len(rest) == 980 and not rest & set(idx.tolist())
    assert np.array_equal(downsample(1000, 0.02, seed=3), idx)
    assert np.array_equal(downsample(17, 1.0, seed=3), np.arange(17))
    assert len(downsample(101, 0.02, seed=0)) == 3


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5000), st.floats(1e-4, 1.0))
def test_downsample_size_is_ceiling(n, rate):
    from fractions import Fraction
    import math
    idx = downsample(n, rate, seed=0)
    exact = math.ceil(Fraction(rate) * n)
    # the float product may sit a hair above an integer; the rational ceiling is the reference
    assert len(idx) in (exact, exact - 1) and len(idx) >= 1
    assert len(idx) >= rate * n - 1e-6
