"""Input validation shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array

N_FEATURES = 15
EMBED_DIM = 16


def check_vectors(X, n_features=N_FEATURES, dtype=np.float32, min_samples=1):
    X = check_array(X, dtype=dtype, ensure_min_samples=min_samples)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def check_binary_labels(y, n):
    y = np.asarray(y).astype(np.int64, copy=False).ravel()
    if y.shape[0] != n:
        raise ValueError(f"{n} samples but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() > 1):
        raise ValueError("labels must be 0 (benign) or 1 (malicious)")
    return y

