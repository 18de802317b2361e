"""Small dense network stack in numpy with hand-written backpropagation.

Only what the detector needs: fully connected layers, 1-d batch
normalisation, LeakyReLU, the embedding / encoder / classifier blocks, a
pairwise margin loss, softmax cross-entropy, and Adam / plain SGD.

Arrays are float32 by default; every layer also runs in float64 so the
finite-difference checks are meaningful.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from .errors import BatchTooSmallForTrainMode, ShapeMismatch

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def glorot_uniform(rng, n_out, n_in, dtype):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)


class Layer:
    trainable: Tuple[str, ...] = ()

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.trainable}

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, "d_" + name) for name in self.trainable}

    def zero_grad(self):
        for name in self.trainable:
            getattr(self, "d_" + name)[...] = 0


class Dense(Layer):
    """y = x W^T + b with W stored out x in."""

    trainable = ("weight", "bias")

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        self.weight = glorot_uniform(rng, n_out, n_in, dtype)
        self.bias = np.zeros(n_out, dtype=dtype)
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        self._x = None

    @property
    def shape(self):
        return self.weight.shape

    def forward(self, x, train=False):
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dout):
        self.d_weight += dout.T @ self._x
        self.d_bias += dout.sum(axis=0)
        return dout @ self.weight


class BatchNorm(Layer):
    trainable = ("gamma", "beta")

    def __init__(self, n, momentum=BN_MOMENTUM, eps=BN_EPS, dtype=np.float32):
        self.gamma = np.ones(n, dtype=dtype)
        self.beta = np.zeros(n, dtype=dtype)
        self.running_mean = np.zeros(n, dtype=dtype)
        self.running_var = np.ones(n, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.d_gamma = np.zeros_like(self.gamma)
        self.d_beta = np.zeros_like(self.beta)
        self._cache = None

    def forward(self, x, train=False):
        if not train:
            self._cache = None
            return (x - self.running_mean) / np.sqrt(self.running_var + self.eps) * self.gamma + self.beta
        n = x.shape[0]
        if n < 2:
            raise BatchTooSmallForTrainMode("train-mode batch normalisation needs at least 2 samples")
        mean = x.mean(axis=0)
        centered = x - mean
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv_std
        m = self.momentum
        self.running_mean[...] = (1 - m) * self.running_mean + m * mean
        # running variance tracks the unbiased estimate
        self.running_var[...] = (1 - m) * self.running_var + m * var * (n / (n - 1))
        self._cache = (xhat, inv_std)
        return xhat * self.gamma + self.beta

    def backward(self, dout):
        xhat, inv_std = self._cache
        n = dout.shape[0]
        self.d_gamma += (dout * xhat).sum(axis=0)
        self.d_beta += dout.sum(axis=0)
        dxhat = dout * self.gamma
        return inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class LeakyReLU(Layer):
    def __init__(self, slope=LEAKY_SLOPE):
        self.slope = slope
        self._mask = None

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, dout):
        return np.where(self._mask, dout, self.slope * dout)


class Sequential:
    """Ordered layers with named parameters ``<layer>.<param>``."""

    def __init__(self, layers: List[Tuple[str, Layer]]):
        self.layers = layers

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    __call__ = forward

    def backward(self, dout):
        for _, layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def zero_grad(self):
        for _, layer in self.layers:
            layer.zero_grad()

    def named_parameters(self):
        for lname, layer in self.layers:
            for pname, arr in layer.params().items():
                yield f"{lname}.{pname}", arr

    def named_grads(self):
        for lname, layer in self.layers:
            for pname, arr in layer.grads().items():
                yield f"{lname}.{pname}", arr

    def parameters(self) -> List[np.ndarray]:
        return [p for _, p in self.named_parameters()]

    def gradients(self) -> List[np.ndarray]:
        return [g for _, g in self.named_grads()]

    def buffers(self):
        """Non-trainable state (batch-norm running statistics)."""
        for lname, layer in self.layers:
            if isinstance(layer, BatchNorm):
                yield f"{lname}.running_mean", layer.running_mean
                yield f"{lname}.running_var", layer.running_var

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float64)

    def layer(self, name):
        return dict(self.layers)[name]


class EmbeddingNet(Sequential):
    """15 -> 128 -> batch norm -> LeakyReLU -> 16."""

    def __init__(self, n_in=15, hidden=128, n_out=16, rng=None, dtype=np.float32, slope=LEAKY_SLOPE):
        rng = np.random.default_rng(rng)
        super().__init__([
            ("fc1", Dense(n_in, hidden, rng, dtype)),
            ("bn1", BatchNorm(hidden, dtype=dtype)),
            ("act1", LeakyReLU(slope)),
            ("fc2", Dense(hidden, n_out, rng, dtype)),
        ])
        self.n_in, self.hidden, self.n_out = n_in, hidden, n_out


class EncoderNet(Sequential):
    """(15 + 16) -> 512 -> 256 -> 128 with LeakyReLU between."""

    def __init__(self, n_in=31, widths=(512, 256, 128), rng=None, dtype=np.float32, slope=LEAKY_SLOPE):
        rng = np.random.default_rng(rng)
        layers, prev = [], n_in
        for i, width in enumerate(widths, start=1):
            if i > 1:
                layers.append((f"act{i - 1}", LeakyReLU(slope)))
            layers.append((f"fc{i}", Dense(prev, width, rng, dtype)))
            prev = width
        super().__init__(layers)
        self.n_in, self.widths = n_in, tuple(widths)


class ClassifierHead(Sequential):
    def __init__(self, n_in=128, n_classes=2, rng=None, dtype=np.float32):
        super().__init__([("fc", Dense(n_in, n_classes, np.random.default_rng(rng), dtype))])
        self.n_in, self.n_classes = n_in, n_classes


def embedding_forward(x, net: EmbeddingNet, mode="eval"):
    x = np.asarray(x, dtype=net.dtype)
    single = x.ndim == 1
    out = net.forward(x[None, :] if single else x, train=(mode == "train"))
    return out[0] if single else out


def detector_forward(x, emb: EmbeddingNet, enc: EncoderNet, head: ClassifierHead):
    """Logits for ``x``: the embedding (eval mode) is concatenated after ``x``."""
    x = np.asarray(x, dtype=enc.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    concat = np.concatenate([x, emb.forward(x, train=False)], axis=1)
    logits = head.forward(enc.forward(concat, train=False))
    return logits[0] if single else logits


def param_count(*models) -> int:
    return sum(m.n_params() for m in models)


# -- losses ----------------------------------------------------------------

def contrastive_loss(embeddings, pairs, margin=1.0):
    """Margin loss over index pairs; returns ``(loss, d_embeddings)``.

    ``pairs`` is an (P, 3) integer array of ``(i, j, B)``. Same-cluster pairs
    (B = 0) pay ``max(0, d - m)``, cross-cluster pairs (B = 1) pay
    ``max(0, 2m - d)``; each term is averaged over its own pairs and a term
    with no pairs contributes 0. The gradient is 0 exactly on a kink and
    where the two embeddings coincide.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    emb = np.asarray(embeddings)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    i, j, b = pairs[:, 0], pairs[:, 1], pairs[:, 2]
    diff = emb[i] - emb[j]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    pos, neg = b == 0, b == 1
    n_pos, n_neg = int(pos.sum()), int(neg.sum())

    loss = 0.0
    d_dist = np.zeros_like(dist)
    if n_pos:
        hinge = dist[pos] - margin
        loss += float(np.maximum(hinge, 0).sum()) / n_pos
        d_dist[pos] = (hinge > 0) / n_pos
    if n_neg:
        hinge = 2 * margin - dist[neg]
        loss += float(np.maximum(hinge, 0).sum()) / n_neg
        d_dist[neg] = -(hinge > 0).astype(dist.dtype) / n_neg

    safe = np.where(dist > 0, dist, 1.0)
    coef = np.where(dist > 0, d_dist / safe, 0.0).astype(emb.dtype)
    d_pair = diff * coef[:, None]
    grad = np.zeros_like(emb)
    np.add.at(grad, i, d_pair)
    np.add.at(grad, j, -d_pair)
    return loss, grad


def margin_hinge(e_pos, e_neg, margin=1.0):
    """Per-pair loss surface H(E_pos, E_neg) for one positive and one negative distance."""
    return np.maximum(0.0, e_pos - margin) + np.maximum(0.0, 2 * margin - e_neg)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits, y):
    """Mean softmax cross-entropy; returns ``(loss, d_logits)``."""
    logits = np.asarray(logits)
    y = np.asarray(y, dtype=np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p = z[np.arange(n), y] - log_norm
    loss = float(-log_p.mean())
    grad = np.exp(z - log_norm[:, None])
    grad[np.arange(n), y] -= 1
    return loss, (grad / n).astype(logits.dtype)


# -- optimisers ------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params) or any(g.shape != p.shape for g, p in zip(grads, self.params)):
            raise ShapeMismatch("gradient shapes do not match parameter shapes")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    """Plain gradient descent, w <- w - lr * grad."""

    def __init__(self, params, lr=1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params) or any(g.shape != p.shape for g, p in zip(grads, self.params)):
            raise ShapeMismatch("gradient shapes do not match parameter shapes")
        for p, g in zip(self.params, grads):
            p -= (self.lr * g).astype(p.dtype)


def make_optimizer(name, params, lr):
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def adam_step(params, grads, state: Adam):
    state.step(grads)
    return params, state


# -- gradient checking -----------------------------------------------------

def finite_diff_check(net: Sequential, loss: Callable, batch, h=1e-5, train=True, floor=1e-7):
    """Largest relative error between analytic and central-difference gradients.

    ``loss`` maps the network output to ``(value, d_output)``. The relative
    error of each parameter entry is ``|a - n| / max(|a|, |n|, floor)``.
    Run it on float64 networks.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    x = np.asarray(batch, dtype=net.dtype)
    net.zero_grad()
    _, dout = loss(net.forward(x, train))
    net.backward(dout)
    worst = 0.0
    for p, g in zip(net.parameters(), net.gradients()):
        analytic = g.copy()
        flat, gflat = p.reshape(-1), analytic.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = loss(net.forward(x, train))[0]
            flat[k] = orig - h
            f_minus = loss(net.forward(x, train))[0]
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = gflat[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def input_grad_check(net: Sequential, loss: Callable, batch, h=1e-5, train=True, floor=1e-7):
    """Same as :func:`finite_diff_check` but for the gradient with respect to the input."""
    x = np.array(batch, dtype=net.dtype)
    net.zero_grad()
    _, dout = loss(net.forward(x, train))
    dx = net.backward(dout)
    worst = 0.0
    flat, gflat = x.reshape(-1), dx.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        f_plus = loss(net.forward(x, train))[0]
        flat[k] = orig - h
        f_minus = loss(net.forward(x, train))[0]
        flat[k] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        worst = max(worst, abs(gflat[k] - numeric) / max(abs(gflat[k]), abs(numeric), floor))
    return worst


# -- fused inference -------------------------------------------------------

class FusedDetector:
    """Eval-mode detector with batch norm folded into the first layer.

    Weights are pre-transposed and contiguous; ``logits_one`` is the
    single-sample path timed by the benchmark.
    """

    def __init__(self, emb: EmbeddingNet, enc: EncoderNet, head: ClassifierHead):
        fc1, bn, act, fc2 = (layer for _, layer in emb.layers)
        scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
        dtype = fc1.weight.dtype
        self.slope = act.slope
        self.emb_w1 = np.ascontiguousarray((fc1.weight * scale[:, None]).T, dtype=dtype)
        self.emb_b1 = ((fc1.bias - bn.running_mean) * scale + bn.beta).astype(dtype)
        self.emb_w2 = np.ascontiguousarray(fc2.weight.T)
        self.emb_b2 = fc2.bias.copy()
        dense = [layer for _, layer in enc.layers if isinstance(layer, Dense)]
        self.enc = [(np.ascontiguousarray(d.weight.T), d.bias.copy()) for d in dense]
        hd = head.layer("fc")
        self.head_w = np.ascontiguousarray(hd.weight.T)
        self.head_b = hd.bias.copy()
        self.n_in = emb.n_in
        self._concat = np.empty(emb.n_in + emb.n_out, dtype=dtype)

    def embed(self, x):
        h = x @ self.emb_w1
        h += self.emb_b1
        h = np.maximum(h, self.slope * h)
        e = h @ self.emb_w2
        e += self.emb_b2
        return e

    def encode_head(self, concat):
        h = concat
        last = len(self.enc) - 1
        for k, (w, b) in enumerate(self.enc):
            h = h @ w
            h += b
            if k < last:
                h = np.maximum(h, self.slope * h)
        out = h @ self.head_w
        out += self.head_b
        return out

    def logits_one(self, x):
        buf = self._concat
        buf[:self.n_in] = x
        buf[self.n_in:] = self.embed(x)
        return self.encode_head(buf)

    def logits(self, X):
        X = np.asarray(X, dtype=self.emb_w1.dtype)
        concat = np.concatenate([X, self.embed(X)], axis=-1)
        return self.encode_head(concat)
