"""Minimal dense-network machinery with hand-derived gradients.

A progress model is a shared encoder MLP applied independently to both
frames of a pair, plus a single affine head mapping the concatenated
embeddings to K logits (or one scalar for the direct-regression
ablation). Gradients are exact analytic backpropagation for this fixed
architecture; the optimizer is adaptive moment estimation with bias
correction. All math is float64.

Checkpoints use the shared container envelope with magic "TRWD": after
the version come K, E, the encoder and head layer dimensions, then every
parameter as little-endian float64 in declaration order (encoder layers
first, then head), and the 64-bit checksum trailer.
"""

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import persist
from .errors import CorruptArtifactError
from .seeding import rng_for


def _affine_init(n_in, n_out, rng):
    # uniform fan-in scaling, zero bias
    bound = 1.0 / np.sqrt(n_in)
    weight = rng.uniform(-bound, bound, size=(n_in, n_out))
    return weight, np.zeros(n_out)


class MLP:
    """Affine stack with tanh hidden layers and a linear output layer."""

    def __init__(self, sizes, rng=None):
        if len(sizes) < 2:
            raise ValueError("sizes needs at least input and output widths")
        self.sizes = tuple(int(s) for s in sizes)
        if rng is None:
            rng = np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            w, b = _affine_init(n_in, n_out, rng)
            self.weights.append(w)
            self.biases.append(b)

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x):
        """Return (output, activation cache) for a 2-D float64 batch."""
        x = _as_batch(x, self.sizes[0])
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, grad_out):
        """Gradients for every parameter plus the gradient w.r.t. the input.

        acts is the cache from forward(); grad_out is dLoss/dOutput for the
        same batch.
        """
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            gz = g if i == last else g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ gz
            grads[2 * i + 1] = gz.sum(axis=0)
            g = gz @ self.weights[i].T
        return grads, g


def _as_batch(x, width):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    elif x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[1] != width:
        raise ValueError(f"expected input width {width}, got {x.shape[1]}")
    return x


@lru_cache(maxsize=None)
def gaussian_blur_matrix(height, width, sigma):
    """Row-normalized Gaussian mixing over grid cells.

    Applied as a fixed linear front-end it gives one-hot grid observations
    the neighborhood structure that pretrained visual features would
    otherwise supply: nearby cells produce overlapping inputs, so the
    encoder can interpolate to position combinations absent from the
    demonstrations.
    """
    rows, cols = np.meshgrid(np.arange(height), np.arange(width),
                             indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(float)
    sq_dist = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=-1)
    mix = np.exp(-sq_dist / (2.0 * float(sigma) ** 2))
    mix /= mix.sum(axis=1, keepdims=True)
    mix.flags.writeable = False
    return mix


@dataclass(frozen=True)
class FrameSmoothing:
    """Fixed per-channel Gaussian smoothing of flattened grid frames."""

    channels: int
    height: int
    width: int
    sigma: float

    def apply(self, x):
        cells = self.height * self.width
        mix = gaussian_blur_matrix(self.height, self.width, self.sigma)
        out = x.reshape(x.shape[0], self.channels, cells) @ mix.T
        return out.reshape(x.shape[0], -1)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits, target):
    """Mean of -sum(target * log softmax(logits)), max-subtraction stabilized.

    target rows must be non-negative and sum to 1.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(target))):
        raise ValueError("non-finite inputs to cross entropy")
    if np.any(target < 0) or not np.allclose(target.sum(axis=-1), 1.0):
        raise ValueError("target rows must be probability weights")
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(np.mean(-(target * (z - log_norm)).sum(axis=-1)))


class ProgressModel:
    """Shared frame encoder plus pair head producing K logits.

    The encoder is applied with identical parameters to both frames; the
    head consumes concat(embed(a), embed(b)), so its output is order
    sensitive. head_width is the number of two-hot bins, or 1 for the
    direct-regression ablation. smoothing, when set, is a fixed
    parameter-free Gaussian front-end applied to every frame before the
    encoder.
    """

    def __init__(self, frame_dim, embed_dim=64, hidden=(128, 128),
                 head_width=20, smoothing=None, seed=0):
        rng = rng_for(seed, "progress-model-init")
        self.frame_dim = int(frame_dim)
        self.embed_dim = int(embed_dim)
        self.head_width = int(head_width)
        self.smoothing = smoothing
        if smoothing is not None:
            expected = smoothing.channels * smoothing.height * smoothing.width
            if expected != self.frame_dim:
                raise ValueError(
                    f"smoothing grid implies width {expected}, "
                    f"model expects {frame_dim}")
        self.encoder = MLP((frame_dim, *hidden, embed_dim), rng)
        self.head = MLP((2 * embed_dim, head_width), rng)

    @property
    def params(self):
        return self.encoder.params + self.head.params

    def _preprocess(self, frames):
        x = _as_batch(frames, self.frame_dim)
        return x if self.smoothing is None else self.smoothing.apply(x)

    def encode(self, frames):
        """Embed one frame (1-D) or a batch; deterministic."""
        single = np.asarray(frames).ndim == 1
        out = self.encoder(self._preprocess(frames))
        return out[0] if single else out

    def pair_logits(self, frames_a, frames_b):
        """Head output for (first, second) frame batches, in that order."""
        return self.pair_forward(frames_a, frames_b)[0]

    def pair_forward(self, frames_a, frames_b):
        a = self._preprocess(frames_a)
        b = self._preprocess(frames_b)
        if a.shape[0] != b.shape[0]:
            raise ValueError("frame batches differ in length")
        za, cache_a = self.encoder.forward(a)
        zb, cache_b = self.encoder.forward(b)
        logits, cache_h = self.head.forward(np.concatenate([za, zb], axis=1))
        return logits, (cache_a, cache_b, cache_h)

    def pair_backward(self, caches, grad_logits):
        """Parameter gradients (encoder then head order) for pair_forward."""
        cache_a, cache_b, cache_h = caches
        head_grads, g_concat = self.head.backward(cache_h, grad_logits)
        g_a, g_b = np.split(g_concat, 2, axis=1)
        enc_grads_a, _ = self.encoder.backward(cache_a, g_a)
        enc_grads_b, _ = self.encoder.backward(cache_b, g_b)
        enc_grads = [ga + gb for ga, gb in zip(enc_grads_a, enc_grads_b)]
        return enc_grads + head_grads


def pair_loss_and_grads(model, frames_a, frames_b, targets):
    """Mean cross-entropy over the batch and exact parameter gradients.

    The logit gradient is softmax(logits) - target, scaled by 1/batch.
    """
    logits, caches = model.pair_forward(frames_a, frames_b)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    loss = cross_entropy_loss(logits, targets)
    grad_logits = (softmax(logits) - targets) / logits.shape[0]
    return loss, model.pair_backward(caches, grad_logits)


def pair_squared_loss_and_grads(model, frames_a, frames_b, targets):
    """Mean squared error of a scalar head against raw distance targets."""
    preds, caches = model.pair_forward(frames_a, frames_b)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    err = preds - targets
    loss = float(np.mean(err ** 2))
    grad = 2.0 * err / err.shape[0]
    return loss, model.pair_backward(caches, grad)


class Adam:
    """Adaptive moment estimation with bias correction; updates in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValueError("parameter/gradient count mismatch")
        self.step_count += 1
        t = self.step_count
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != self.m[i].shape or g.shape != p.shape:
                raise ValueError("parameter/gradient shape mismatch")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** t)
            v_hat = self.v[i] / (1 - self.beta2 ** t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def save_progress_model(path, model):
    payload = struct.pack("<II", model.head_width, model.embed_dim)
    payload += _pack_dims(model.encoder.sizes)
    payload += _pack_dims(model.head.sizes)
    smoothing = model.smoothing
    if smoothing is None:
        payload += struct.pack("<IIIId", 0, 0, 0, 0, 0.0)
    else:
        payload += struct.pack("<IIIId", 1, smoothing.channels,
                               smoothing.height, smoothing.width,
                               smoothing.sigma)
    payload += _pack_params(model.params)
    persist.write_container(path, persist.MAGIC_MODEL, payload)


def load_progress_model(path):
    reader = persist.PayloadReader(
        persist.read_container(path, persist.MAGIC_MODEL))
    head_width = reader.u32()
    embed_dim = reader.u32()
    enc_sizes = _unpack_dims(reader)
    head_sizes = _unpack_dims(reader)
    if enc_sizes[-1] != embed_dim or head_sizes != (2 * embed_dim, head_width):
        raise CorruptArtifactError(f"{path}: inconsistent layer dimensions")
    flag, channels, height, width = (reader.u32(), reader.u32(),
                                     reader.u32(), reader.u32())
    (sigma,) = struct.unpack("<d", reader.take(8))
    smoothing = (FrameSmoothing(channels, height, width, sigma)
                 if flag else None)
    model = ProgressModel(enc_sizes[0], embed_dim=embed_dim,
                          hidden=enc_sizes[1:-1], head_width=head_width,
                          smoothing=smoothing)
    _unpack_params(reader, model.params, path)
    reader.done()
    return model


def save_policy_net(path, net):
    """Persist a single MLP (online action-value net) under magic TRQN."""
    payload = struct.pack("<II", net.sizes[-1], 0)
    payload += _pack_dims(net.sizes)
    payload += _pack_dims(())
    payload += _pack_params(net.params)
    persist.write_container(path, persist.MAGIC_POLICY, payload)


def load_policy_net(path):
    reader = persist.PayloadReader(
        persist.read_container(path, persist.MAGIC_POLICY))
    out_width = reader.u32()
    reader.u32()  # unused for policies
    sizes = _unpack_dims(reader)
    if _unpack_dims(reader) != () or sizes[-1] != out_width:
        raise CorruptArtifactError(f"{path}: inconsistent layer dimensions")
    net = MLP(sizes)
    _unpack_params(reader, net.params, path)
    reader.done()
    return net


def _pack_dims(sizes):
    return struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)


def _unpack_dims(reader):
    n = reader.u32()
    return tuple(reader.u32() for _ in range(n))


def _pack_params(params):
    total = sum(p.size for p in params)
    chunks = [struct.pack("<Q", total)]
    for p in params:
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(chunks)


def _unpack_params(reader, params, path):
    total = reader.u64()
    if total != sum(p.size for p in params):
        raise CorruptArtifactError(f"{path}: parameter count mismatch")
    for p in params:
        flat = np.frombuffer(reader.take(8 * p.size), dtype="<f8")
        p[...] = flat.reshape(p.shape)
        if not np.all(np.isfinite(p)):
            raise CorruptArtifactError(f"{path}: non-finite parameters")
