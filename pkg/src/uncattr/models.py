"""Dropout MLP classifier and dense variational autoencoder, with training.

Architectures are dense throughout: the classifier is input -> hidden
(relu, inverted dropout) -> softmax; the VAE encoder shares one relu hidden
layer feeding separate mean / log-std heads, and the decoder mirrors it with
a sigmoid output so reconstructions live in (0, 1)^n.  Training is plain
mini-batch Adam with a per-epoch shuffle drawn from the run seed, so a seed
pins every weight bit-exactly.

Checkpoint wire format (little-endian throughout):

    magic "UATW" | u8 version=1 | u8 kind (1=classifier, 2=vae)
    | u32 tensor count | count x (u32 rows, u32 cols)
    | payload: all tensors as f64, row-major, in declared order
    | u32 CRC32 of the payload bytes

Biases are serialized as (1, n) tensors.  The dropout rate is a runtime
parameter, not part of the weight file; runners echo it in their manifest.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


class CheckpointError(Exception):
    """Malformed, truncated, or version-mismatched weight file."""


class TrainingError(Exception):
    """Training aborted (empty data or non-finite loss)."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


@dataclass
class Dataset:
    """Images in [0,1] with integer class labels and a split tag."""

    images: np.ndarray  # (count, height, width), float64 in [0, 1]
    labels: np.ndarray  # (count,) int64
    split: str = "train"
    num_classes: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError(f"images must be (count, h, w), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("images/labels count mismatch")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.num_classes == 0:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Classifier:
    """Dense softmax classifier with inverted dropout after each hidden layer."""

    def __init__(self, layer_sizes, dropout_rate=0.5, seed=0, weights=None, biases=None):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.dropout_rate = float(dropout_rate)
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = [
                _glorot(rng, a, b)
                for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
            ]
            biases = [np.zeros(b) for b in self.layer_sizes[1:]]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def sample_mask(self, rng) -> list:
        """One Bernoulli keep-mask per hidden layer (1 = unit survives)."""
        keep = 1.0 - self.dropout_rate
        return [
            (rng.random(size) < keep).astype(np.float64)
            for size in self.layer_sizes[1:-1]
        ]

    def forward_tensor(self, x: dc.Tensor, masks=None) -> dc.Tensor:
        """Tape forward pass; ``x`` is (n,) or a (B, n) batch of rows.

        Masks, when given, are one array per hidden layer, broadcastable
        against that layer's activations; surviving units are rescaled by
        1/(1 - rate) so the expected masked forward matches the plain one.
        """
        if masks is not None and len(masks) != self.num_hidden:
            raise ValueError("one dropout mask per hidden layer required")
        scale = 1.0 / (1.0 - self.dropout_rate) if self.dropout_rate > 0 else 1.0
        h = x
        for i in range(self.num_hidden):
            h = dc.relu(dc.add(dc.matmul(h, self.weights[i]), self.biases[i]))
            if masks is not None:
                h = dc.multiply(h, np.asarray(masks[i], dtype=np.float64) * scale)
        logits = dc.add(dc.matmul(h, self.weights[-1]), self.biases[-1])
        return dc.softmax(logits, axis=-1)


def classifier_forward(c: Classifier, x, dropout_mask=None) -> np.ndarray:
    """Class-membership probabilities for one image or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != c.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} != classifier dim {c.input_dim}")
    return c.forward_tensor(dc.Tensor(x), dropout_mask).data


class VaeModel:
    """Dense VAE: shared relu hidden layer, mean/log-std heads, sigmoid decoder."""

    PARAM_NAMES = (
        "enc_w", "enc_b", "mu_w", "mu_b", "sig_w", "sig_b",
        "dec_w1", "dec_b1", "dec_w2", "dec_b2",
    )

    def __init__(self, input_dim, latent_dim, hidden=256, seed=0, params=None):
        if latent_dim < 2:
            raise ValueError("latent dimension must be >= 2")
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = int(hidden)
        if params is None:
            rng = np.random.default_rng(seed)
            params = [
                _glorot(rng, input_dim, hidden), np.zeros(hidden),
                _glorot(rng, hidden, latent_dim), np.zeros(latent_dim),
                _glorot(rng, hidden, latent_dim), np.zeros(latent_dim),
                _glorot(rng, latent_dim, hidden), np.zeros(hidden),
                _glorot(rng, hidden, input_dim), np.zeros(input_dim),
            ]
        for name, value in zip(self.PARAM_NAMES, params):
            setattr(self, name, np.asarray(value, dtype=np.float64))

    def params(self):
        return [getattr(self, name) for name in self.PARAM_NAMES]

    def encode_tensor(self, x: dc.Tensor):
        h = dc.relu(dc.add(dc.matmul(x, self.enc_w), self.enc_b))
        mu = dc.add(dc.matmul(h, self.mu_w), self.mu_b)
        log_sigma = dc.add(dc.matmul(h, self.sig_w), self.sig_b)
        return mu, log_sigma

    def decode_tensor(self, z: dc.Tensor) -> dc.Tensor:
        h = dc.relu(dc.add(dc.matmul(z, self.dec_w1), self.dec_b1))
        return dc.sigmoid(dc.add(dc.matmul(h, self.dec_w2), self.dec_b2))

    def encode_mean(self, x) -> np.ndarray:
        return self.encode_tensor(dc.Tensor(np.asarray(x, dtype=np.float64)))[0].data

    def encode_log_sigma(self, x) -> np.ndarray:
        return self.encode_tensor(dc.Tensor(np.asarray(x, dtype=np.float64)))[1].data

    def decode(self, z) -> np.ndarray:
        return self.decode_tensor(dc.Tensor(np.asarray(z, dtype=np.float64))).data


# --- Adam -------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates plus step counter, one slot per param."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            t=0,
        )


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place; returns (params, state)."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    state.t += 1
    t = state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / (1.0 - beta1 ** t)
        v_hat = state.v[i] / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# --- Training ----------------------------------------------------------

def _batches(count, batch_size, rng):
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def _check_finite_loss(value, context):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss during {context}: {value}")


def train_classifier(data: Dataset, config: TrainConfig,
                     hidden=(128,), dropout_rate=0.5) -> Classifier:
    """Fit a dropout classifier by mini-batch Adam on mean cross-entropy.

    Per-epoch mean losses are kept on ``model.history``.
    """
    if len(data) == 0:
        raise TrainingError("empty training set")
    n = data.flat.shape[1]
    model = Classifier(
        [n, *hidden, data.num_classes], dropout_rate=dropout_rate, seed=config.seed
    )
    model.history = []
    rng = np.random.default_rng(config.seed)
    params = model.params()
    state = AdamState.for_params(params)
    x_all = data.flat
    onehot = np.eye(data.num_classes)[data.labels]
    for _ in range(config.epochs):
        epoch_loss = 0.0
        batches = 0
        for idx in _batches(len(data), config.batch_size, rng):
            xb = dc.Tensor(x_all[idx])
            masks = None
            if model.dropout_rate > 0:
                masks = [
                    (rng.random((len(idx), size)) < 1.0 - model.dropout_rate)
                    .astype(np.float64)
                    for size in model.layer_sizes[1:-1]
                ]
            probs = model.forward_tensor(xb, masks)
            ce = dc.multiply(
                dc.sum(dc.multiply(onehot[idx], dc.log(probs))), -1.0 / len(idx)
            )
            _check_finite_loss(ce.item(), "classifier training")
            dc.backward(ce)
            grads = [p.grad for p in _param_tensors(model, probs)]
            adam_step(params, grads, state, config.lr)
            epoch_loss += ce.item()
            batches += 1
        model.history.append(epoch_loss / batches)
    return model


def _param_tensors(model, output):
    """Recover grad-carrying tape nodes for the model's parameter arrays.

    Parameters enter the tape as auto-lifted leaves; match them back to the
    model's arrays by identity of the underlying buffers.
    """
    wanted = {id(p): i for i, p in enumerate(model.params())}
    found = [None] * len(wanted)
    for node in dc.topo_order(output):
        if node.op == "leaf" and id(node.data) in wanted:
            found[wanted[id(node.data)]] = node
    missing = [i for i, node in enumerate(found) if node is None]
    if missing:
        raise TrainingError(f"parameters {missing} not reached by the tape")
    for node in found:
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
    return found


def _vae_loss_terms(v: VaeModel, x: dc.Tensor, noise: np.ndarray):
    """(reconstruction, kl) tape scalars, each summed over features.

    Batched inputs give the batch totals; callers divide by the row count.
    """
    mu, log_sigma = v.encode_tensor(x)
    z = dc.add(mu, dc.multiply(dc.exp(log_sigma), noise))
    decoded = v.decode_tensor(z)
    one = 1.0
    recon = dc.multiply(
        dc.add(
            dc.sum(dc.multiply(x, dc.log(decoded))),
            dc.sum(dc.multiply(dc.subtract(one, x), dc.log(dc.subtract(one, decoded)))),
        ),
        -1.0,
    )
    kl = dc.multiply(
        dc.subtract(
            dc.add(dc.sum(dc.multiply(mu, mu)), dc.sum(dc.exp(dc.multiply(log_sigma, 2.0)))),
            dc.add(float(np.prod(mu.shape)), dc.sum(dc.multiply(log_sigma, 2.0))),
        ),
        0.5,
    )
    return recon, kl


def vae_losses(v: VaeModel, x, noise):
    """(reconstruction BCE summed over pixels, KL to the unit Gaussian)."""
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    recon, kl = _vae_loss_terms(v, dc.Tensor(x), noise)
    return recon.item(), kl.item()


def train_vae(data: Dataset, latent_dim, config: TrainConfig, hidden=256) -> VaeModel:
    """Fit the VAE by Adam on mean (BCE + KL); history on ``model.history``."""
    if len(data) == 0:
        raise TrainingError("empty training set")
    n = data.flat.shape[1]
    model = VaeModel(n, latent_dim, hidden=hidden, seed=config.seed)
    model.history = []
    rng = np.random.default_rng(config.seed)
    params = model.params()
    state = AdamState.for_params(params)
    x_all = data.flat
    for _ in range(config.epochs):
        epoch_loss = 0.0
        batches = 0
        for idx in _batches(len(data), config.batch_size, rng):
            noise = rng.standard_normal((len(idx), model.latent_dim))
            xb = dc.Tensor(x_all[idx])
            recon, kl = _vae_loss_terms(model, xb, noise)
            loss = dc.multiply(dc.add(recon, kl), 1.0 / len(idx))
            _check_finite_loss(loss.item(), "vae training")
            dc.backward(loss)
            grads = [p.grad for p in _param_tensors(model, loss)]
            adam_step(params, grads, state, config.lr)
            epoch_loss += loss.item()
            batches += 1
        model.history.append(epoch_loss / batches)
    return model


# --- Checkpoints --------------------------------------------------------

_MAGIC = b"UATW"
_VERSION = 1
_KIND_CLASSIFIER = 1
_KIND_VAE = 2


def _as_2d(arr):
    return arr if arr.ndim == 2 else arr.reshape(1, -1)


def save_checkpoint(model, path):
    """Serialize a Classifier or VaeModel; see the module docstring format."""
    if isinstance(model, Classifier):
        kind = _KIND_CLASSIFIER
    elif isinstance(model, VaeModel):
        kind = _KIND_VAE
    else:
        raise CheckpointError(f"unsupported model type {type(model).__name__}")
    tensors = [_as_2d(p) for p in model.params()]
    header = _MAGIC + struct.pack("<BBI", _VERSION, kind, len(tensors))
    for t in tensors:
        header += struct.pack("<II", t.shape[0], t.shape[1])
    payload = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in tensors)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(header + payload + struct.pack("<I", crc))


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path, dropout_rate=0.5):
    """Rebuild the model saved at ``path``; round-trips weights bit-exactly.

    The dropout rate is not stored in the file and must be supplied for
    classifiers that will be sampled.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _MAGIC:
            raise CheckpointError("version-mismatch: bad magic bytes")
        version, kind, count = struct.unpack("<BBI", _read_exact(fh, 6, "header"))
        if version != _VERSION:
            raise CheckpointError(f"version-mismatch: format version {version}")
        shapes = [
            struct.unpack("<II", _read_exact(fh, 8, "shape table"))
            for _ in range(count)
        ]
        tensors = []
        for rows, cols in shapes:
            if rows == 0 or cols == 0 or rows * cols > 10**9:
                raise CheckpointError(f"shape-payload disagreement: bad shape {(rows, cols)}")
            raw = _read_exact(fh, rows * cols * 8, "payload")
            tensors.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols))
        payload = b"".join(
            np.ascontiguousarray(t, dtype="<f8").tobytes() for t in tensors
        )
        (crc,) = struct.unpack("<I", _read_exact(fh, 4, "checksum"))
        if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
            raise CheckpointError("payload checksum mismatch")
        if fh.read(1):
            raise CheckpointError("trailing bytes after checksum")
    if kind == _KIND_CLASSIFIER:
        return _classifier_from_tensors(tensors, dropout_rate)
    if kind == _KIND_VAE:
        return _vae_from_tensors(tensors)
    raise CheckpointError(f"unknown model kind {kind}")


def _classifier_from_tensors(tensors, dropout_rate):
    if len(tensors) < 4 or len(tensors) % 2:
        raise CheckpointError("classifier checkpoint needs weight/bias pairs")
    weights = tensors[0::2]
    biases = [b.reshape(-1) for b in tensors[1::2]]
    sizes = [weights[0].shape[0]] + [w.shape[1] for w in weights]
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
            raise CheckpointError("shape-payload disagreement in classifier layers")
    return Classifier(sizes, dropout_rate=dropout_rate, weights=weights, biases=biases)


def _vae_from_tensors(tensors):
    if len(tensors) != len(VaeModel.PARAM_NAMES):
        raise CheckpointError("vae checkpoint needs exactly 10 tensors")
    enc_w, _, mu_w, _, sig_w, _, dec_w1, _, dec_w2, _ = tensors
    n, hidden = enc_w.shape
    m = mu_w.shape[1]
    if (mu_w.shape != (hidden, m) or sig_w.shape != (hidden, m)
            or dec_w1.shape != (m, hidden) or dec_w2.shape != (hidden, n)):
        raise CheckpointError("shape-payload disagreement in vae layers")
    params = [t.reshape(-1) if t.shape[0] == 1 and i % 2 else t
              for i, t in enumerate(tensors)]
    return VaeModel(n, m, hidden=hidden, params=params)
