"""A small numpy convolutional network with hand-written backpropagation.

It hosts the desk-scale forgery detector and the face embedder. Tensors are
channel-last: a batch is ``(N, H, W, C)``. Layers are numbered from 1 so that
``feature_at(net, x, l)`` returns the output of the l-th layer.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

NN_MAGIC = b"FDANN01"
NN_VERSION = 1

DETECTOR_LAYERS = (
    ("conv", {"k": 3, "stride": 1, "out_channels": 8}),
    ("relu", {}),
    ("avgpool", {"k": 2}),
    ("conv", {"k": 3, "stride": 1, "out_channels": 16}),
    ("relu", {}),
    ("avgpool", {"k": 2}),
    ("flatten", {}),
    ("dense", {"out_dim": 2}),
)

EMBEDDER_LAYERS = (
    ("conv", {"k": 3, "stride": 1, "out_channels": 8}),
    ("relu", {}),
    ("avgpool", {"k": 2}),
    ("conv", {"k": 3, "stride": 1, "out_channels": 16}),
    ("relu", {}),
    ("avgpool", {"k": 2}),
    ("conv", {"k": 3, "stride": 1, "out_channels": 32}),
    ("relu", {}),
    ("flatten", {}),
    ("dense", {"out_dim": 64}),
)
# end of the second (middle) conv block
EMBEDDER_TAP = 6
DETECTOR_TAP = 6


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int = 0
    stride: int = 1
    out_channels: int = 0
    out_dim: int = 0

    @classmethod
    def from_tuple(cls, item):
        kind, kw = item
        return cls(kind=kind, **kw)

    def as_dict(self):
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(k=self.k, stride=self.stride, out_channels=self.out_channels)
        elif self.kind == "avgpool":
            d.update(k=self.k)
        elif self.kind == "dense":
            d.update(out_dim=self.out_dim)
        return d


def infer_shapes(specs, input_shape):
    """Per-layer output shapes; raises ValueError if consecutive layers do not compose."""
    shape = tuple(input_shape)
    shapes = []
    for i, s in enumerate(specs, start=1):
        if s.kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv expects (H, W, C) input, got {shape}")
            h, w, _ = shape
            pad = (s.k - 1) // 2
            ho = (h + 2 * pad - s.k) // s.stride + 1
            wo = (w + 2 * pad - s.k) // s.stride + 1
            shape = (ho, wo, s.out_channels)
        elif s.kind == "relu":
            pass
        elif s.kind == "avgpool":
            if len(shape) != 3 or shape[0] % s.k or shape[1] % s.k:
                raise ValueError(f"layer {i}: avgpool({s.k}) cannot tile input {shape}")
            shape = (shape[0] // s.k, shape[1] // s.k, shape[2])
        elif s.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif s.kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"layer {i}: dense expects a flat input, got {shape}")
            shape = (s.out_dim,)
        else:
            raise ValueError(f"layer {i}: unknown layer kind {s.kind!r}")
        shapes.append(shape)
    return shapes


@dataclass
class NetworkParams:
    """Layer specs, weights and the designated feature tap.

    ``weights[i]`` is ``(W, b)`` for conv/dense layers and ``None`` otherwise.
    Conv kernels are ``(k, k, C_in, C_out)``, dense matrices ``(D_in, D_out)``.
    """

    specs: tuple
    input_shape: tuple
    weights: list
    tap: int
    shapes: list = field(default=None, repr=False)

    def __post_init__(self):
        self.specs = tuple(s if isinstance(s, LayerSpec) else LayerSpec.from_tuple(s) for s in self.specs)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.shapes = infer_shapes(self.specs, self.input_shape)
        if not 1 <= self.tap <= len(self.specs):
            raise ValueError(f"tap must be in 1..{len(self.specs)}")

    @property
    def num_layers(self):
        return len(self.specs)

    def copy(self):
        w = [None if p is None else (p[0].copy(), p[1].copy()) for p in self.weights]
        return NetworkParams(self.specs, self.input_shape, w, self.tap)


def init_network(layers, input_shape, tap, rng, scale=None, highpass_gain=None):
    """He-initialised parameters for ``layers``; ``scale=0`` gives an all-zero net.

    ``highpass_gain`` makes the first conv kernels zero-mean (blind to flat
    regions) and multiplies them by the gain. Artifact detectors barely train
    from a plain He start because smooth image content swamps the signal.
    """
    specs = tuple(s if isinstance(s, LayerSpec) else LayerSpec.from_tuple(s) for s in layers)
    shapes = infer_shapes(specs, input_shape)
    weights = []
    prev = tuple(input_shape)
    for s, shp in zip(specs, shapes):
        if s.kind == "conv":
            fan_in = s.k * s.k * prev[2]
            std = np.sqrt(2.0 / fan_in) if scale is None else scale
            W = rng.normal(0.0, 1.0, (s.k, s.k, prev[2], s.out_channels)) * std
            if highpass_gain is not None and not weights:
                W = (W - W.mean(axis=(0, 1), keepdims=True)) * highpass_gain
            weights.append((W, np.zeros(s.out_channels)))
        elif s.kind == "dense":
            std = np.sqrt(2.0 / prev[0]) if scale is None else scale
            W = rng.normal(0.0, 1.0, (prev[0], s.out_dim)) * std
            weights.append((W, np.zeros(s.out_dim)))
        else:
            weights.append(None)
        prev = shp
    return NetworkParams(specs, input_shape, weights, tap)


# -- layer kernels ---------------------------------------------------------


def _conv_windows(x, k, stride):
    pad = (k - 1) // 2
    if pad:
        n, h, w, c = x.shape
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
        xp[:, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    if stride > 1:
        win = win[:, ::stride, ::stride]
    return xp.shape, win  # win: (N, Ho, Wo, C, k, k)


def _conv_forward(x, W, b, spec):
    xp_shape, win = _conv_windows(x, spec.k, spec.stride)
    n, ho, wo, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, spec.k * spec.k * c)
    out = cols @ W.reshape(-1, W.shape[3])
    out += b
    return out.reshape(n, ho, wo, W.shape[3]), (cols, xp_shape)


def _conv_backward(dout, x_shape, W, spec, cache):
    cols, xp_shape = cache
    n, ho, wo, cout = dout.shape
    k, s = spec.k, spec.stride
    d2 = dout.reshape(-1, cout)
    dW = (cols.T @ d2).reshape(W.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.reshape(-1, cout).T).reshape(n, ho, wo, k, k, W.shape[2])
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
    pad = (k - 1) // 2
    h, w = x_shape[1], x_shape[2]
    return dxp[:, pad : pad + h, pad : pad + w, :], dW, db


def _pool_forward(x, k):
    # summing k*k strided views is much faster than reshape().mean() here
    out = x[:, 0::k, 0::k].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                out += x[:, i::k, j::k]
    out *= 1.0 / (k * k)
    return out


def _pool_backward(dout, k):
    return np.repeat(np.repeat(dout, k, axis=1), k, axis=2) / (k * k)


def _forward(net, x, upto=None, keep_cache=True):
    """Run layers 1..upto on batch ``x``. Returns (output, caches)."""
    upto = net.num_layers if upto is None else upto
    caches = []
    a = x
    for spec, p in zip(net.specs[:upto], net.weights[:upto]):
        inp = a
        c = None
        if spec.kind == "conv":
            a, c = _conv_forward(a, p[0], p[1], spec)
        elif spec.kind == "relu":
            a = np.maximum(a, 0.0)
        elif spec.kind == "avgpool":
            a = _pool_forward(a, spec.k)
        elif spec.kind == "flatten":
            a = a.reshape(a.shape[0], -1)
        elif spec.kind == "dense":
            a = a @ p[0] + p[1]
        if keep_cache:
            caches.append((inp, c))
    return a, caches


def _backward(net, dout, caches, want_params=True):
    """Backpropagate ``dout`` through the cached layers.

    Returns (d_input, grads) where grads mirrors ``net.weights`` for the
    traversed layers.
    """
    grads = [None] * len(caches)
    d = dout
    for i in range(len(caches) - 1, -1, -1):
        spec, p = net.specs[i], net.weights[i]
        inp, c = caches[i]
        if spec.kind == "conv":
            d, dW, db = _conv_backward(d, inp.shape, p[0], spec, c)
            grads[i] = (dW, db)
        elif spec.kind == "relu":
            d = d * (inp > 0.0)
        elif spec.kind == "avgpool":
            d = _pool_backward(d, spec.k)
        elif spec.kind == "flatten":
            d = d.reshape(inp.shape)
        elif spec.kind == "dense":
            if want_params:
                grads[i] = (inp.T @ d, d.sum(axis=0))
            d = d @ p[0].T
    return d, grads


def _as_batch(net, img):
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    return x


# -- public operations ------------------------------------------------------


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(net, img):
    """Logits for a single image plus the per-layer activation cache."""
    out, caches = _forward(net, _as_batch(net, img))
    return out[0], caches


def predict_logits(net, images):
    out, _ = _forward(net, _as_batch(net, images), keep_cache=False)
    return out


def embed(net, img):
    """Final-layer output for one image, as a flat vector."""
    return predict_logits(net, img)[0]


def feature_at(net, img, l):
    """Flattened output of layer ``l`` (1-based) for one image."""
    if not 1 <= l <= net.num_layers:
        raise ValueError(f"layer index {l} outside 1..{net.num_layers}")
    out, _ = _forward(net, _as_batch(net, img), upto=l, keep_cache=False)
    return out[0].ravel()


def features_at(net, images, l):
    if not 1 <= l <= net.num_layers:
        raise ValueError(f"layer index {l} outside 1..{net.num_layers}")
    out, _ = _forward(net, _as_batch(net, images), upto=l, keep_cache=False)
    return out.reshape(out.shape[0], -1)


def cosine_similarity(a, b, return_degenerate=False):
    """Cosine of the angle between two vectors.

    If either vector is all zeros the similarity is defined as 0 and the
    degenerate flag is set.
    """
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("vectors must have equal length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return (0.0, True) if return_degenerate else 0.0
    c = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return (c, False) if return_degenerate else c


def grad_input_cosine(net, l, x_var, x_ref=None, ref_feature=None):
    """Gradient of ``J = -cos(Z_l(x_ref), Z_l(x_var))`` with respect to ``x_var``.

    ``ref_feature`` may be given instead of ``x_ref`` to reuse a precomputed
    reference feature. Returns ``(grad, degenerate)``; a zero feature on
    either side yields a zero gradient with ``degenerate=True``.
    """
    if ref_feature is None:
        ref_feature = feature_at(net, x_ref, l)
    r = np.ravel(ref_feature)
    xb = _as_batch(net, x_var)
    f, caches = _forward(net, xb, upto=l)
    fv = f.ravel()
    nr, nf = np.linalg.norm(r), np.linalg.norm(fv)
    if nr == 0.0 or nf == 0.0:
        return np.zeros(net.input_shape), True
    cos = (r @ fv) / (nr * nf)
    dJ_df = -(r / (nr * nf) - cos * fv / (nf * nf))
    dx, _ = _backward(net, dJ_df.reshape(f.shape), caches, want_params=False)
    return dx[0], False


def adaptive_avg_pool1d(v, n):
    """Average-pool (or repeat, when shorter) a vector to exactly ``n`` bins."""
    v = np.ravel(v)
    L = v.size
    csum = np.concatenate([[0.0], np.cumsum(v)])
    i = np.arange(n)
    start = (i * L) // n
    end = -((-(i + 1) * L) // n)
    return (csum[end] - csum[start]) / (end - start)


def layerwise_cosine(net_a, net_b, images, common_dim=256):
    """Mean cosine between every layer of ``net_a`` and every layer of ``net_b``.

    Each flattened feature is adaptively average-pooled to ``common_dim``
    before the per-image cosine is taken.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if len(images) == 0:
        raise ValueError("need at least one image")
    out_a, ca = _forward(net_a, _as_batch(net_a, images))
    out_b, cb = _forward(net_b, _as_batch(net_b, images))
    # cache[i][0] is the input of layer i+1, so layer outputs are shifted by one
    acts_a = [c[0] for c in ca[1:]] + [out_a]
    acts_b = [c[0] for c in cb[1:]] + [out_b]

    def pooled(acts):
        return [
            np.stack([adaptive_avg_pool1d(a[k], common_dim) for k in range(len(images))]) for a in acts
        ]

    pa, pb = pooled(acts_a), pooled(acts_b)
    m = np.zeros((len(pa), len(pb)))
    for i, fa in enumerate(pa):
        for j, fb in enumerate(pb):
            m[i, j] = np.mean([cosine_similarity(fa[k], fb[k]) for k in range(len(images))])
    return m


# -- training -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0 or self.seed < 0:
            raise ValueError("TrainConfig fields must be positive")


def cross_entropy(logits, y):
    p = softmax(logits)
    n = len(y)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-12))
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    return loss, d / n


def train_network(net, X, y, cfg):
    """Minimise softmax cross-entropy with plain minibatch SGD.

    Mutates and returns ``net``; also returns the per-epoch mean loss.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits, caches = _forward(net, X[idx])
            loss, d = cross_entropy(logits, y[idx])
            _, grads = _backward(net, d, caches)
            for i, g in enumerate(grads):
                if g is not None:
                    W, b = net.weights[i]
                    net.weights[i] = (W - cfg.learning_rate * g[0], b - cfg.learning_rate * g[1])
            losses.append(loss * len(idx))
        history.append(float(np.sum(losses) / len(X)))
    return net, history


def train_detector(images, labels, cfg=TrainConfig(), layers=DETECTOR_LAYERS, tap=DETECTOR_TAP, highpass_gain=10.0):
    """Train the binary REAL(0)/FAKE(1) detector. Returns (params, loss history)."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if set(np.unique(labels)) != {0, 1}:
        raise ValueError("dataset must contain both REAL and FAKE samples")
    net = init_network(layers, images.shape[1:], tap, np.random.default_rng(cfg.seed), highpass_gain=highpass_gain)
    return train_network(net, images, labels, cfg)


def train_embedder(images, identities, cfg=TrainConfig(), layers=EMBEDDER_LAYERS, tap=EMBEDDER_TAP, highpass_gain=None):
    """Train the face embedder as an identity classifier over its final dense layer.

    ``highpass_gain`` starts the first conv from the same zero-mean prior as
    the detector, so shallow features of both nets respond to fine texture.
    """
    images = np.asarray(images, dtype=np.float64)
    identities = np.asarray(identities, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty dataset")
    out_dim = LayerSpec.from_tuple(layers[-1]).out_dim
    if identities.max() >= out_dim:
        raise ValueError(f"embedder has {out_dim} outputs but saw identity {identities.max()}")
    net = init_network(layers, images.shape[1:], tap, np.random.default_rng(cfg.seed), highpass_gain=highpass_gain)
    return train_network(net, images, identities, cfg)


# -- serialization --------------------------------------------------------


def save_network(net, path):
    header = {
        "version": NN_VERSION,
        "input_shape": list(net.input_shape),
        "tap": net.tap,
        "layers": [s.as_dict() for s in net.specs],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    chunks = [NN_MAGIC, struct.pack("<BI", NN_VERSION, len(hbytes)), hbytes]
    for p in net.weights:
        if p is not None:
            chunks.append(p[0].astype("<f4").tobytes())
            chunks.append(p[1].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_network(path):
    data = Path(path).read_bytes()
    if data[:7] != NN_MAGIC:
        raise ValueError(f"{path}: not a network file")
    version, hlen = struct.unpack("<BI", data[7:12])
    if version != NN_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    header = json.loads(data[12 : 12 + hlen])
    specs = [LayerSpec(**d) for d in header["layers"]]
    offset = 12 + hlen
    net = init_network(specs, header["input_shape"], header["tap"], np.random.default_rng(0), scale=0.0)
    weights = []
    for p in net.weights:
        if p is None:
            weights.append(None)
            continue
        arrs = []
        for a in p:
            nbytes = 4 * a.size
            arrs.append(np.frombuffer(data[offset : offset + nbytes], dtype="<f4").reshape(a.shape).astype(np.float64))
            offset += nbytes
        weights.append(tuple(arrs))
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing weight bytes")
    net.weights = weights
    return net


# -- estimator wrappers ---------------------------------------------------


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Binary REAL/FAKE convolutional detector with a scikit-learn interface.

    :param learning_rate: SGD step size.
    :param epochs: Passes over the training data.
    :param batch_size: Minibatch size.
    :param random_state: Seed for initialisation and shuffling.
    """

    def __init__(self, learning_rate=0.02, epochs=10, batch_size=8, random_state=0):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        cfg = TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.random_state)
        self.net_, self.loss_history_ = train_detector(X, y, cfg)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return softmax(predict_logits(self.net_, X))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


class FaceEmbedder(TransformerMixin, BaseEstimator):
    """Identity embedder; ``transform`` returns final-layer embeddings."""

    def __init__(self, learning_rate=0.02, epochs=10, batch_size=8, random_state=0):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        cfg = TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.random_state)
        self.net_, self.loss_history_ = train_embedder(X, y, cfg)
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        return predict_logits(self.net_, X)
