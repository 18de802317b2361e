"""Glue between flow records, the estimators and model bundles."""
from __future__ import annotations

import numpy as np

from .bundle import ModelBundle, dataset_hash
from .cluster import dbscan
from .config import RunConfig
from .errors import SingleClassDataset
from .evaluate import score
from .nn import ClassifierHead, EncoderNet
from .preprocess import FlowVectorizer, downsample, fold_splits, label_ids, split_folds
from .training import ContextFlowDetector, FrozenEmbeddingClassifier, derive_seeds


def make_detector(cfg: RunConfig, seed=None) -> ContextFlowDetector:
    return ContextFlowDetector(
        eps=cfg.eps, min_pts=cfg.min_pts, downsample_rate=cfg.downsample_rate, margin=cfg.margin,
        embed_epochs=cfg.embed_epochs, embed_batch_size=cfg.embed_batch_size, embed_lr=cfg.embed_lr,
        detector_epochs=cfg.detector_epochs, detector_batch_size=cfg.detector_batch_size,
        detector_lr=cfg.detector_lr, optimizer=cfg.optimizer,
        random_state=cfg.seed if seed is None else seed,
    )


def _manifest(records, cfg: RunConfig, det: ContextFlowDetector, stage: str) -> dict:
    first = min((r.first_ts_ns for r in records), default=0)
    last = max((r.first_ts_ns for r in records), default=0)
    labels = det.pseudo_labels_
    return {
        "stage": stage,
        "seed": cfg.seed,
        "seeds": det.seeds_,
        "dataset_sha256": dataset_hash(records),
        "n_records": len(records),
        "data_first_ts": first / 1e9,
        "data_last_flow_start_ts": last / 1e9,
        "downsample": {"rate": cfg.downsample_rate, "size": int(len(det.sample_indices_)),
                       "clusters": int(labels.max() + 1) if len(labels) else 0,
                       "noise": int((labels < 0).sum())},
        "embedding_training": det.embed_config(),
        "embedding_final_loss": float(det.embedder_.loss_curve_[-1]),
        # batch size, learning rate, optimizer and margin are local choices
        "unreported_hyperparameters": ["embed_batch_size", "embed_lr", "optimizer", "margin"],
    }


def train_embedding_bundle(records, cfg: RunConfig):
    """Scaler + downsample + DBSCAN + embedding. The detector part stays untrained."""
    scaler = FlowVectorizer().fit(records)
    X = scaler.transform(records)
    det = make_detector(cfg).fit_embedding(X)
    rng = np.random.default_rng(det.seeds_["detector"])
    enc, head = EncoderNet(rng=rng), ClassifierHead(rng=rng)
    bundle = ModelBundle(scaler, det.embedder_.net_, enc, head, margin=cfg.margin,
                         dbscan={"eps": cfg.eps, "min_pts": cfg.min_pts},
                         manifest=_manifest(records, cfg, det, "embedding"), detector_trained=False)
    return bundle, det


def train_bundle(records, cfg: RunConfig, embed_bundle: ModelBundle = None) -> ModelBundle:
    """Train the detector on labelled records; reuse ``embed_bundle``'s scaler and embedding if given."""
    y = label_ids(records)
    if len(np.unique(y)) < 2:
        raise SingleClassDataset("training data holds a single class")
    if embed_bundle is None:
        bundle, det = train_embedding_bundle(records, cfg)
        X = bundle.scaler.transform(records)
        det.fit_detector(X, y)
        bundle.encoder, bundle.head = det.classifier_.encoder_, det.classifier_.head_
        bundle.manifest["detector_training"] = det.detector_config()
        bundle.manifest["detector_final_loss"] = float(det.classifier_.loss_curve_[-1])
    else:
        bundle = embed_bundle
        X = bundle.scaler.transform(records)
        seed = derive_seeds(cfg.seed)[2]
        clf = FrozenEmbeddingClassifier(bundle.embedding, cfg.detector_epochs, cfg.detector_batch_size,
                                        cfg.detector_lr, cfg.optimizer, seed).fit(X, y)
        bundle.encoder, bundle.head = clf.encoder_, clf.head_
        bundle.manifest = dict(bundle.manifest)
        bundle.manifest["detector_training"] = {
            "epochs": cfg.detector_epochs, "batch_size": cfg.detector_batch_size,
            "learning_rate": cfg.detector_lr, "seed": seed, "optimizer": cfg.optimizer}
        bundle.manifest["detector_dataset_sha256"] = dataset_hash(records)
        bundle.manifest["detector_final_loss"] = float(clf.loss_curve_[-1])
    bundle.manifest["stage"] = "detector"
    bundle.detector_trained = True
    bundle.refresh()
    return bundle


def evaluate_bundle(bundle: ModelBundle, records):
    y = label_ids(records)
    pred, _ = bundle.predict_vectors(bundle.scaler.transform(records))
    return score(pred, y)


def cross_test(records, cfg: RunConfig, k=None):
    """k-fold cross-test: train on k-1 folds (scaler included), test on the rest."""
    k = k or cfg.folds
    folds = split_folds(len(records), k, cfg.seed)
    reports = []
    for i, (train_idx, test_idx) in enumerate(fold_splits(folds)):
        train = [records[j] for j in train_idx]
        test = [records[j] for j in test_idx]
        fold_cfg = RunConfig(**{**cfg.to_dict(), "seed": derive_seeds(cfg.seed, k)[i]})
        bundle = train_bundle(train, fold_cfg)
        reports.append(evaluate_bundle(bundle, test))
    return reports


def cluster_sample(records, cfg: RunConfig):
    """Downsample + DBSCAN as in embedding training; returns ``(indices, labels, vectors)``."""
    scaler = FlowVectorizer().fit(records)
    X = scaler.transform(records)
    s_down = derive_seeds(cfg.seed)[0]
    idx = downsample(len(X), cfg.downsample_rate, s_down)
    labels, _ = dbscan(X[idx], cfg.eps, cfg.min_pts)
    return idx, labels, X[idx]
