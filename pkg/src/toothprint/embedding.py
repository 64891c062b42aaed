"""Embedding network and the composite training loss.

The loss combines three terms over a batch of images ``x`` with embeddings
``l`` and class labels ``y``:

* an angular-margin softmax on scaled cosine logits (scale ``s``, additive
  margin ``m`` on the target angle),
* a closed-form KL divergence between the batch's fitted diagonal Gaussian
  and the standard-normal prior over embedding space,
* a Jensen-Shannon mutual-information lower bound between images and their
  embeddings, estimated by a small discriminator against in-batch shuffled
  (deranged) pairs.

Total: ``gamma * margin_softmax + kl_prior - alpha * js_mi``. Every gradient
is computed analytically and is checked against central finite differences in
the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import (
    BatchTooSmall,
    EmptyBatch,
    NonFiniteGradient,
    ShapeMismatch,
    ZeroNormEmbedding,
)
from .imaging import resize_bicubic, to_grayscale
from .raster import RasterImage

EMBED_NORM_FLOOR = 1e-12
STD_FLOOR = 1e-8
VAR_FLOOR = 1e-8


@dataclass
class LossParams:
    """Composite-loss hyperparameters."""

    s: float = 30.0       # cosine logit scale
    m: float = 0.35       # additive angular margin (radians)
    alpha: float = 1.0    # mutual-information weight
    gamma: float = 2.0    # classification weight

    def __post_init__(self) -> None:
        if self.s <= 0:
            raise ValueError("s must be positive")
        if not 0.0 <= self.m < math.pi / 2:
            raise ValueError("m must lie in [0, pi/2)")
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be >= 0")


@dataclass
class BackboneSpec:
    """Shape of the small convolutional embedding network.

    Three conv(3x3)/ReLU/maxpool(2x2) blocks followed by a full connection to
    the embedding. Input is a square grayscale image in [0, 1], standardized
    per image to zero mean and unit variance before the first convolution.
    """

    input_size: int = 75
    channels: tuple[int, int, int] = (16, 32, 64)
    embed_dim: int = 256

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ValueError("channels must be three positive widths")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.feature_side() < 1:
            raise ValueError(f"input_size {self.input_size} collapses to nothing after pooling")

    def feature_side(self) -> int:
        side = self.input_size
        for _ in range(3):
            side //= 2
        return side


@dataclass
class MiSpec:
    """Shape of the mutual-information discriminator.

    Image branch: two conv/ReLU/pool blocks, flattened. The embedding is
    concatenated to the flattened image features and scored by two fully
    connected layers (ReLU hidden) down to a scalar.
    """

    channels: tuple[int, int] = (8, 16)
    hidden: int = 128

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ValueError("channels must be two positive widths")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")


def standardize(images: np.ndarray) -> np.ndarray:
    """Per-image zero-mean/unit-variance normalization (std floored at 1e-8)."""
    images = np.asarray(images, dtype=np.float64)
    axes = tuple(range(images.ndim - 2, images.ndim))
    mean = images.mean(axis=axes, keepdims=True)
    std = images.std(axis=axes, keepdims=True)
    return (images - mean) / np.maximum(std, STD_FLOOR)


def prepare_input(image: RasterImage, input_size: int) -> np.ndarray:
    """Turn a raster image into the standardized float grid the network eats."""
    gray = to_grayscale(image)
    if gray.width != input_size or gray.height != input_size:
        gray = resize_bicubic(gray, input_size, input_size)
    return standardize(gray.data.astype(np.float64) / 255.0)


class Backbone:
    """conv16-conv32-conv64 (or per-spec widths) embedding network."""

    def __init__(self, spec: BackboneSpec, seed=0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        c1, c2, c3 = spec.channels
        self.conv1 = nn.Conv3x3(1, c1, rng)
        self.conv2 = nn.Conv3x3(c1, c2, rng)
        self.conv3 = nn.Conv3x3(c2, c3, rng)
        side = spec.feature_side()
        self.fc = nn.Dense(side * side * c3, spec.embed_dim, rng)
        self._relu = nn.Relu()
        self._pool = nn.MaxPool2x2()

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in (("conv1", self.conv1), ("conv2", self.conv2),
                            ("conv3", self.conv3), ("fc", self.fc)):
            for key, value in layer.params().items():
                out[f"{name}.{key}"] = value
        return out

    def forward(self, images: np.ndarray):
        """Embed a standardized batch ``(n, size, size)``; returns (emb, cache)."""
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 2
        if single:
            images = images[None]
        size = self.spec.input_size
        if images.ndim != 3 or images.shape[1] != size or images.shape[2] != size:
            raise ShapeMismatch(f"expected (n, {size}, {size}) input, got {images.shape}")
        x = images[..., None]
        caches = []
        for conv in (self.conv1, self.conv2, self.conv3):
            x, c_conv = conv.forward(x)
            x, c_relu = self._relu.forward(x)
            x, c_pool = self._pool.forward(x)
            caches.append((c_conv, c_relu, c_pool))
        shape = x.shape
        flat = x.reshape(shape[0], -1)
        emb, c_fc = self.fc.forward(flat)
        cache = (caches, shape, c_fc, single)
        return (emb[0] if single else emb), cache

    def backward(self, d_emb: np.ndarray, cache) -> dict[str, np.ndarray]:
        """Parameter gradients for a previous forward pass."""
        caches, shape, c_fc, single = cache
        if single:
            d_emb = d_emb[None]
        grads: dict[str, np.ndarray] = {}
        dx, g = self.fc.backward(d_emb, c_fc)
        grads.update({f"fc.{k}": v for k, v in g.items()})
        dx = dx.reshape(shape)
        for name, conv, (c_conv, c_relu, c_pool) in zip(
            ("conv3", "conv2", "conv1"),
            (self.conv3, self.conv2, self.conv1),
            reversed(caches),
        ):
            dx, _ = self._pool.backward(dx, c_pool)
            dx, _ = self._relu.backward(dx, c_relu)
            dx, g = conv.backward(dx, c_conv)
            grads.update({f"{name}.{k}": v for k, v in g.items()})
        return grads


class MiDiscriminator:
    """Scores (image, embedding) pairs; higher means "genuinely paired"."""

    def __init__(self, spec: MiSpec, input_size: int, embed_dim: int, seed=0):
        self.spec = spec
        self.input_size = input_size
        self.embed_dim = embed_dim
        rng = np.random.default_rng(seed)
        c1, c2 = spec.channels
        self.conv1 = nn.Conv3x3(1, c1, rng)
        self.conv2 = nn.Conv3x3(c1, c2, rng)
        side = input_size // 2 // 2
        if side < 1:
            raise ValueError(f"input_size {input_size} collapses in the image branch")
        self.flat_dim = side * side * c2
        self.fc1 = nn.Dense(self.flat_dim + embed_dim, spec.hidden, rng)
        self.fc2 = nn.Dense(spec.hidden, 1, rng)
        self._relu = nn.Relu()
        self._pool = nn.MaxPool2x2()

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in (("conv1", self.conv1), ("conv2", self.conv2),
                            ("fc1", self.fc1), ("fc2", self.fc2)):
            for key, value in layer.params().items():
                out[f"{name}.{key}"] = value
        return out

    def forward(self, images: np.ndarray, embeddings: np.ndarray):
        """Score each pair; returns (scores (n,), cache)."""
        x = np.asarray(images, dtype=np.float64)[..., None]
        caches = []
        for conv in (self.conv1, self.conv2):
            x, c_conv = conv.forward(x)
            x, c_relu = self._relu.forward(x)
            x, c_pool = self._pool.forward(x)
            caches.append((c_conv, c_relu, c_pool))
        shape = x.shape
        joint = np.concatenate([x.reshape(shape[0], -1), embeddings], axis=1)
        h, c_fc1 = self.fc1.forward(joint)
        h, c_relu1 = self._relu.forward(h)
        score, c_fc2 = self.fc2.forward(h)
        return score[:, 0], (caches, shape, c_fc1, c_relu1, c_fc2)

    def backward(self, d_score: np.ndarray, cache):
        """Returns (param grads, gradient w.r.t. the embeddings)."""
        caches, shape, c_fc1, c_relu1, c_fc2 = cache
        grads: dict[str, np.ndarray] = {}
        dh, g = self.fc2.backward(d_score[:, None], c_fc2)
        grads.update({f"fc2.{k}": v for k, v in g.items()})
        dh, _ = self._relu.backward(dh, c_relu1)
        djoint, g = self.fc1.backward(dh, c_fc1)
        grads.update({f"fc1.{k}": v for k, v in g.items()})
        d_emb = djoint[:, self.flat_dim :]
        dx = djoint[:, : self.flat_dim].reshape(shape)
        for name, conv, (c_conv, c_relu, c_pool) in zip(
            ("conv2", "conv1"), (self.conv2, self.conv1), reversed(caches)
        ):
            dx, _ = self._pool.backward(dx, c_pool)
            dx, _ = self._relu.backward(dx, c_relu)
            dx, g = conv.backward(dx, c_conv)
            grads.update({f"{name}.{k}": v for k, v in g.items()})
        return grads, d_emb


def init_classifier_weights(embed_dim: int, n_classes: int, seed=0) -> np.ndarray:
    """Random unit-norm class weight columns, shape (embed_dim, n_classes)."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((embed_dim, n_classes))
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def renormalize_columns(w: np.ndarray) -> None:
    """Project classifier columns back onto the unit sphere, in place."""
    w /= np.linalg.norm(w, axis=0, keepdims=True)


def softmax_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class (log-sum-exp safe)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise EmptyBatch("softmax_loss needs at least one sample")
    log_p = nn.log_softmax(logits)
    return float(-log_p[np.arange(len(labels)), labels].mean())


def _margin_logits_grads(embeddings, labels, weights, params):
    """Shared forward + backward for the margin softmax.

    Returns (loss, d_embeddings, d_weights).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise EmptyBatch("margin_softmax_loss needs at least one sample")
    n = emb.shape[0]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if norms.min() < EMBED_NORM_FLOOR:
        raise ZeroNormEmbedding("embedding norm below 1e-12")
    unit = emb / norms
    cos = unit @ weights
    rows = np.arange(n)
    ct = np.clip(cos[rows, labels], -1.0, 1.0)
    st = np.sqrt(np.clip(1.0 - ct * ct, 0.0, None))
    cos_m, sin_m = math.cos(params.m), math.sin(params.m)
    # Past theta + m = pi the cosine would fold back; fall back to the
    # monotone linear penalty cos(theta) - m*sin(m).
    easy = ct > math.cos(math.pi - params.m)
    phi = np.where(easy, ct * cos_m - st * sin_m, ct - params.m * sin_m)
    logits = params.s * cos
    logits[rows, labels] = params.s * phi
    log_p = nn.log_softmax(logits)
    loss = float(-log_p[rows, labels].mean())

    dz = np.exp(log_p)
    dz[rows, labels] -= 1.0
    dz /= n
    dcos = params.s * dz
    dphi_dct = np.where(easy, cos_m + sin_m * ct / np.maximum(st, 1e-12), 1.0)
    dcos[rows, labels] *= dphi_dct
    d_unit = dcos @ weights.T
    d_weights = unit.T @ dcos
    d_emb = (d_unit - unit * (d_unit * unit).sum(axis=1, keepdims=True)) / norms
    return loss, d_emb, d_weights


def margin_softmax_loss(embeddings, labels, weights, params: LossParams) -> float:
    """Angular-margin softmax on scaled cosine logits.

    ``cos(theta_j)`` is the dot product of the L2-normalized embedding with
    class column ``W_j`` (assumed unit norm); the target logit uses
    ``s*cos(theta_y + m)``, all others ``s*cos(theta_j)``.
    """
    loss, _, _ = _margin_logits_grads(embeddings, labels, weights, params)
    return loss


def _kl_prior_grads(embeddings):
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise BatchTooSmall("kl_prior_loss needs a batch of at least 2")
    n = emb.shape[0]
    mu = emb.mean(axis=0)
    centered = emb - mu
    var = np.maximum((centered * centered).mean(axis=0), VAR_FLOOR)
    loss = float(0.5 * np.sum(mu * mu + var - np.log(var) - 1.0))
    d_emb = mu / n + (1.0 - 1.0 / var) * centered / n
    return loss, d_emb


def kl_prior_loss(embeddings) -> float:
    """KL(batch Gaussian fit || standard normal), closed form.

    Fits a diagonal Gaussian by per-dimension mean and population variance
    (floored at 1e-8) and returns
    ``0.5 * sum(mu^2 + var - log(var) - 1)``; zero exactly at mu=0, var=1.
    """
    loss, _ = _kl_prior_grads(embeddings)
    return loss


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed point (n >= 2)."""
    if n < 2:
        raise BatchTooSmall("derangement needs n >= 2")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _check_shuffle(shuffle, n: int) -> np.ndarray:
    if shuffle is None:
        return np.roll(np.arange(n), 1)  # rotation: the default derangement
    shuffle = np.asarray(shuffle, dtype=np.int64)
    if shuffle.shape != (n,) or np.any(np.sort(shuffle) != np.arange(n)):
        raise ValueError("shuffle must be a permutation of the batch")
    if np.any(shuffle == np.arange(n)):
        raise ValueError("shuffle must be a derangement (no fixed points)")
    return shuffle


def _js_mi_grads(images, embeddings, disc, shuffle):
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise BatchTooSmall("js_mi_loss needs a batch of at least 2")
    n = emb.shape[0]
    shuffle = _check_shuffle(shuffle, n)
    t_pair, cache_pair = disc.forward(images, emb)
    t_shuf, cache_shuf = disc.forward(images, emb[shuffle])
    estimate = float(-nn.softplus(-t_pair).mean() - nn.softplus(t_shuf).mean())
    # d(estimate)/dT for each pass.
    d_pair = nn.sigmoid(-t_pair) / n
    d_shuf = -nn.sigmoid(t_shuf) / n
    grads_pair, demb_pair = disc.backward(d_pair, cache_pair)
    grads_shuf, demb_shuf = disc.backward(d_shuf, cache_shuf)
    disc_grads = {k: grads_pair[k] + grads_shuf[k] for k in grads_pair}
    d_emb = demb_pair
    d_emb[shuffle] += demb_shuf
    return estimate, d_emb, disc_grads


def js_mi_loss(images, embeddings, disc: MiDiscriminator, shuffle=None) -> float:
    """Jensen-Shannon mutual-information lower bound.

    ``E_paired[-softplus(-T)] - E_shuffled[softplus(T)]`` where the shuffled
    pairs recombine the batch's embeddings through a derangement (rotation by
    default; pass an explicit seeded derangement during training). The
    training objective subtracts ``alpha`` times this estimate, so maximizing
    mutual information lowers the loss.
    """
    estimate, _, _ = _js_mi_grads(images, embeddings, disc, shuffle)
    return estimate


@dataclass
class LossTerms:
    """Composite loss value plus its three raw addends."""

    total: float
    margin: float
    kl: float
    mi: float


def total_loss(images, embeddings, labels, weights, disc, params: LossParams,
               shuffle=None) -> LossTerms:
    """gamma * margin_softmax + kl_prior - alpha * js_mi, with the breakdown."""
    margin = margin_softmax_loss(embeddings, labels, weights, params)
    kl = kl_prior_loss(embeddings)
    mi = js_mi_loss(images, embeddings, disc, shuffle)
    return LossTerms(params.gamma * margin + kl - params.alpha * mi, margin, kl, mi)


@dataclass
class LossGradients:
    """Gradients of the total loss for every trainable tensor."""

    backbone: dict[str, np.ndarray]
    disc: dict[str, np.ndarray]
    classifier: np.ndarray
    terms: LossTerms = field(repr=False, default=None)


def loss_gradients(backbone: Backbone, disc: MiDiscriminator, weights, images,
                   labels, params: LossParams, shuffle=None) -> LossGradients:
    """Analytic gradients of the composite loss.

    Runs the backbone forward pass internally so gradients reach its weights.
    Raises NonFiniteGradient if any entry is NaN or Inf.
    """
    emb, cache = backbone.forward(images)
    margin, d_emb_margin, d_w = _margin_logits_grads(emb, labels, weights, params)
    kl, d_emb_kl = _kl_prior_grads(emb)
    mi, d_emb_mi, disc_grads = _js_mi_grads(images, emb, disc, shuffle)
    terms = LossTerms(params.gamma * margin + kl - params.alpha * mi, margin, kl, mi)
    d_emb = params.gamma * d_emb_margin + d_emb_kl - params.alpha * d_emb_mi
    grads = LossGradients(
        backbone=backbone.backward(d_emb, cache),
        disc={k: -params.alpha * v for k, v in disc_grads.items()},
        classifier=params.gamma * d_w,
        terms=terms,
    )
    for group in (grads.backbone, grads.disc, {"classifier": grads.classifier}):
        for name, g in group.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
    if not math.isfinite(terms.total):
        raise NonFiniteGradient("non-finite loss value")
    return grads
