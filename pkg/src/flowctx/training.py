"""Two-phase training: contrastive embedding on a clustered downsample, then a
classifier on top of the frozen embedding.

The estimators compose with scikit-learn, e.g.::

    make_pipeline(FlowVectorizer(), ContextFlowDetector(random_state=0))

fits directly on a list of :class:`~flowctx.flows.RawFeatureRecord`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary_labels, check_vectors
from .cluster import NOISE, dbscan
from .errors import InsufficientClusters, SingleClassDataset
from .nn import (ClassifierHead, EmbeddingNet, EncoderNet, contrastive_loss, cross_entropy_loss,
                 make_optimizer, softmax)
from .preprocess import downsample


@dataclass
class EmbedTrainConfig:
    epochs: int = 150
    batch_size: int = 256
    learning_rate: float = 1e-3
    margin: float = 1.0
    seed: int = 0
    downsample_rate: float = 0.02
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not 0 < self.downsample_rate <= 1:
            raise ValueError("downsample_rate must be in (0, 1]")


@dataclass
class DetectorTrainConfig:
    epochs: int = 30
    batch_size: int = 512
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class _PairSampler:
    """Anchor-based sampling: one same-cluster and one other-cluster partner per anchor."""

    def __init__(self, labels):
        labels = np.asarray(labels)
        keep = np.flatnonzero(labels != NOISE)
        # members grouped by cluster, stable within a cluster
        order = keep[np.argsort(labels[keep], kind="stable")]
        ids, starts, sizes = np.unique(labels[order], return_index=True, return_counts=True)
        if len(ids) < 2:
            raise InsufficientClusters(f"need at least 2 non-noise clusters, found {len(ids)}")
        self.labels = labels
        self.order = order
        self.total = len(order)
        slot = {int(c): k for k, c in enumerate(ids)}
        self.start = np.zeros(len(labels), dtype=np.int64)
        self.size = np.zeros(len(labels), dtype=np.int64)
        self.pos_in_cluster = np.zeros(len(labels), dtype=np.int64)
        for k, c in enumerate(ids):
            members = order[starts[k]:starts[k] + sizes[k]]
            self.start[members] = starts[k]
            self.size[members] = sizes[k]
            self.pos_in_cluster[members] = np.arange(sizes[k])
        self.anchors = order[self.size[order] > 1]
        self.n_clusters = len(slot)

    def sample(self, anchors, rng):
        start, size = self.start[anchors], self.size[anchors]
        # positive: uniform over the other members of the anchor's cluster
        r = rng.integers(0, size - 1)
        r = r + (r >= self.pos_in_cluster[anchors])
        positives = self.order[start + r]
        # negative: uniform over all members of every other cluster
        r = rng.integers(0, self.total - size)
        r = r + np.where(r >= start, size, 0)
        negatives = self.order[r]
        return positives, negatives


def train_embedding(X, pseudo_labels, cfg: EmbedTrainConfig = None, dtype=np.float32, callback=None):
    """Train the embedding network on pseudo-labelled vectors.

    Returns ``(net, epoch_losses)``; the network is left with its final
    running statistics and is meant to be used in eval mode.
    """
    cfg = cfg or EmbedTrainConfig()
    X = np.asarray(X, dtype=dtype)
    sampler = _PairSampler(pseudo_labels)
    if len(sampler.anchors) == 0:
        raise InsufficientClusters("every cluster is a singleton")
    rng = np.random.default_rng(cfg.seed)
    net = EmbeddingNet(n_in=X.shape[1], rng=rng, dtype=dtype)
    opt = make_optimizer(cfg.optimizer, net.parameters(), cfg.learning_rate)
    losses = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(sampler.anchors)
        total, seen = 0.0, 0
        for lo in range(0, len(perm), cfg.batch_size):
            anchors = perm[lo:lo + cfg.batch_size]
            positives, negatives = sampler.sample(anchors, rng)
            b = len(anchors)
            batch = np.concatenate([X[anchors], X[positives], X[negatives]])
            k = np.arange(b)
            pairs = np.concatenate([
                np.stack([k, b + k, np.zeros(b, dtype=np.int64)], axis=1),
                np.stack([k, 2 * b + k, np.ones(b, dtype=np.int64)], axis=1),
            ])
            net.zero_grad()
            out = net.forward(batch, train=True)
            loss, d_out = contrastive_loss(out, pairs, cfg.margin)
            net.backward(d_out)
            opt.step(net.gradients())
            total += loss * b
            seen += b
        losses.append(total / seen)
        if callback is not None:
            callback(epoch, net, losses[-1])
    return net, np.array(losses)


def train_detector(X, y, emb: EmbeddingNet, cfg: DetectorTrainConfig = None, dtype=np.float32):
    """Train encoder and classifier on ``concat(x, embedding(x))``.

    The embedding is evaluated once in eval mode and never updated. Returns
    ``(encoder, head, epoch_losses)``.
    """
    cfg = cfg or DetectorTrainConfig()
    X = np.asarray(X, dtype=dtype)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise SingleClassDataset("detector training needs both benign and malicious samples")
    concat = np.concatenate([X, emb.forward(X, train=False).astype(dtype)], axis=1)
    rng = np.random.default_rng(cfg.seed)
    enc = EncoderNet(n_in=concat.shape[1], rng=rng, dtype=dtype)
    head = ClassifierHead(n_in=enc.widths[-1], rng=rng, dtype=dtype)
    opt = make_optimizer(cfg.optimizer, enc.parameters() + head.parameters(), cfg.learning_rate)
    losses = []
    n = len(concat)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            enc.zero_grad()
            head.zero_grad()
            logits = head.forward(enc.forward(concat[idx], train=True), train=True)
            loss, d_logits = cross_entropy_loss(logits, y[idx])
            enc.backward(head.backward(d_logits))
            opt.step(enc.gradients() + head.gradients())
            total += loss * len(idx)
        losses.append(total / n)
    return enc, head, np.array(losses)


def predict_from_logits(logits):
    """Class ids with exact ties resolved to benign (0), plus probabilities."""
    logits = np.atleast_2d(logits)
    return (logits[:, 1] > logits[:, 0]).astype(np.int64), softmax(logits.astype(np.float64))


# -- estimators ------------------------------------------------------------

class ContrastiveEmbedder(TransformerMixin, BaseEstimator):
    """Learn a 16-d embedding from cluster ids (``y``; -1 marks noise)."""

    def __init__(self, epochs=150, batch_size=256, learning_rate=1e-3, margin=1.0,
                 optimizer="adam", random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.margin = margin
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X, y):
        X = check_vectors(X, n_features=None)
        cfg = EmbedTrainConfig(self.epochs, self.batch_size, self.learning_rate, self.margin,
                               self.random_state, optimizer=self.optimizer)
        self.net_, self.loss_curve_ = train_embedding(X, np.asarray(y), cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = check_vectors(X, n_features=self.n_features_in_)
        return self.net_.forward(X, train=False)


class FrozenEmbeddingClassifier(ClassifierMixin, BaseEstimator):
    """Benign/malicious classifier over ``concat(x, embedding(x))`` with the embedding frozen."""

    def __init__(self, embedder=None, epochs=30, batch_size=512, learning_rate=1e-3,
                 optimizer="adam", random_state=0):
        self.embedder = embedder
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.random_state = random_state

    def _embedding_net(self):
        if isinstance(self.embedder, EmbeddingNet):
            return self.embedder
        check_is_fitted(self.embedder, "net_")
        return self.embedder.net_

    def fit(self, X, y):
        X = check_vectors(X)
        y = check_binary_labels(y, len(X))
        cfg = DetectorTrainConfig(self.epochs, self.batch_size, self.learning_rate,
                                  self.random_state, self.optimizer)
        self.encoder_, self.head_, self.loss_curve_ = train_detector(X, y, self._embedding_net(), cfg)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_logits(self, X):
        check_is_fitted(self, "encoder_")
        X = check_vectors(X)
        emb = self._embedding_net()
        concat = np.concatenate([X, emb.forward(X, train=False)], axis=1)
        return self.head_.forward(self.encoder_.forward(concat))

    def predict_proba(self, X):
        return predict_from_logits(self.decision_logits(X))[1]

    def predict(self, X):
        return predict_from_logits(self.decision_logits(X))[0]


def derive_seeds(seed, n=3):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


class ContextFlowDetector(ClassifierMixin, BaseEstimator):
    """End-to-end detector on 15-d flow vectors.

    ``fit`` downsamples the training vectors, clusters the sample with
    DBSCAN, trains the embedding on the resulting pseudo-labels, then trains
    the classifier on the full training set with the embedding frozen.
    """

    def __init__(self, eps=0.3, min_pts=10, downsample_rate=0.02, margin=1.0, embed_epochs=150,
                 embed_batch_size=256, embed_lr=1e-3, detector_epochs=30, detector_batch_size=512,
                 detector_lr=1e-3, optimizer="adam", random_state=0):
        self.eps = eps
        self.min_pts = min_pts
        self.downsample_rate = downsample_rate
        self.margin = margin
        self.embed_epochs = embed_epochs
        self.embed_batch_size = embed_batch_size
        self.embed_lr = embed_lr
        self.detector_epochs = detector_epochs
        self.detector_batch_size = detector_batch_size
        self.detector_lr = detector_lr
        self.optimizer = optimizer
        self.random_state = random_state

    def fit_embedding(self, X):
        X = check_vectors(X)
        s_down, s_embed, s_det = derive_seeds(self.random_state)
        self.seeds_ = {"downsample": s_down, "embedding": s_embed, "detector": s_det}
        self.sample_indices_ = downsample(len(X), self.downsample_rate, s_down)
        self.pseudo_labels_, _ = dbscan(X[self.sample_indices_], self.eps, self.min_pts)
        self.embedder_ = ContrastiveEmbedder(self.embed_epochs, self.embed_batch_size, self.embed_lr,
                                             self.margin, self.optimizer, s_embed)
        self.embedder_.fit(X[self.sample_indices_], self.pseudo_labels_)
        return self

    def fit_detector(self, X, y):
        check_is_fitted(self, "embedder_")
        self.classifier_ = FrozenEmbeddingClassifier(
            self.embedder_, self.detector_epochs, self.detector_batch_size, self.detector_lr,
            self.optimizer, self.seeds_["detector"])
        self.classifier_.fit(X, y)
        self.classes_ = self.classifier_.classes_
        self.n_features_in_ = self.classifier_.n_features_in_
        return self

    def fit(self, X, y):
        X = check_vectors(X)
        y = check_binary_labels(y, len(X))
        if len(np.unique(y)) < 2:
            raise SingleClassDataset("detector training needs both benign and malicious samples")
        return self.fit_embedding(X).fit_detector(X, y)

    def predict_proba(self, X):
        return self.classifier_.predict_proba(X)

    def predict(self, X):
        return self.classifier_.predict(X)

    def transform(self, X):
        """Embedding of each vector (the 16-d frozen representation)."""
        return self.embedder_.transform(X)

    def embed_config(self):
        return asdict(EmbedTrainConfig(self.embed_epochs, self.embed_batch_size, self.embed_lr,
                                       self.margin, self.seeds_["embedding"], self.downsample_rate,
                                       self.optimizer))

    def detector_config(self):
        return asdict(DetectorTrainConfig(self.detector_epochs, self.detector_batch_size,
                                          self.detector_lr, self.seeds_["detector"], self.optimizer))
