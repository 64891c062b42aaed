"""Training loop: seeded batching, Adam with L2 regularization, checkpoints.

The learning rate follows a step schedule (x0.1 every 20 epochs by default)
and the weight decay is added to the raw gradients before the Adam moments,
i.e. classic L2 regularization. Classifier columns are re-projected to unit
norm after every step. Epoch shuffling depends only on ``(seed, epoch)``, so
a run replays exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_model
from .dataset import DatasetManifest, Sample
from .embedding import (
    Backbone,
    BackboneSpec,
    LossParams,
    MiDiscriminator,
    MiSpec,
    init_classifier_weights,
    loss_gradients,
    prepare_input,
    random_derangement,
    renormalize_columns,
)
from .errors import EmptyDataset, NonFiniteGradient
from .raster import read_image
from .storage import atomic_write_bytes


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 100
    learning_rate: float = 1e-3
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.1
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def learning_rate_at(self, epoch: int) -> float:
        """Step schedule: lr * factor^(epoch // every), epoch counted from 0."""
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


class Adam:
    """Adam over a named parameter dict; weight decay joins the gradient."""

    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig):
        self.params = params
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        cfg = self.config
        self.t += 1
        correction1 = 1.0 - cfg.beta1**self.t
        correction2 = 1.0 - cfg.beta2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = grads[name] + cfg.weight_decay * p
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


@dataclass
class EpochStats:
    epoch: int
    total: float
    margin: float
    kl: float
    mi: float
    lr: float


@dataclass
class TrainResult:
    backbone: Backbone
    disc: MiDiscriminator
    classifier: np.ndarray
    classes: list[str]
    history: list[EpochStats]
    best_epoch: int


def load_sample_batch(samples: list[Sample], input_size: int) -> np.ndarray:
    """Decode and standardize samples into a float batch ``(n, size, size)``."""
    return np.stack([prepare_input(read_image(s.path), input_size) for s in samples])


def history_csv(history: list[EpochStats]) -> str:
    lines = ["epoch,total,margin,kl,mi,lr"]
    for h in history:
        lines.append(f"{h.epoch},{h.total:.10g},{h.margin:.10g},{h.kl:.10g},{h.mi:.10g},{h.lr:.10g}")
    return "\n".join(lines) + "\n"


def train(
    manifest: DatasetManifest,
    spec: BackboneSpec,
    config: TrainConfig,
    loss_params: LossParams,
    mi_spec: MiSpec | None = None,
    out_model: str | Path | None = None,
    best_model: str | Path | None = None,
    log_path: str | Path | None = None,
    progress=None,
) -> TrainResult:
    """Train on the manifest's train split; writes final/best checkpoints.

    ``progress``, when given, is called with each EpochStats as it completes.
    """
    samples = manifest.train_samples()
    if not samples:
        raise EmptyDataset("manifest has no training samples")
    classes = sorted({s.subject_id for s in samples})
    class_index = {c: i for i, c in enumerate(classes)}
    labels_all = np.array([class_index[s.subject_id] for s in samples], dtype=np.int64)
    images_all = load_sample_batch(samples, spec.input_size)

    mi_spec = mi_spec or MiSpec()
    backbone = Backbone(spec, seed=[config.seed, 0])
    disc = MiDiscriminator(mi_spec, spec.input_size, spec.embed_dim, seed=[config.seed, 1])
    classifier = init_classifier_weights(spec.embed_dim, len(classes), seed=[config.seed, 2])

    params: dict[str, np.ndarray] = {"classifier": classifier}
    params.update({f"backbone.{k}": v for k, v in backbone.params().items()})
    params.update({f"disc.{k}": v for k, v in disc.params().items()})
    adam = Adam(params, config)

    history: list[EpochStats] = []
    best_epoch = -1
    best_total = np.inf
    best_params: dict[str, np.ndarray] = {}
    n = len(samples)
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        lr = config.learning_rate_at(epoch)
        sums = np.zeros(4)
        counted = 0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            if batch.size < 2:
                continue  # a stray single sample cannot feed the batch losses
            shuffle = random_derangement(batch.size, rng)
            try:
                grads = loss_gradients(
                    backbone, disc, classifier,
                    images_all[batch], labels_all[batch], loss_params, shuffle,
                )
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(
                    f"epoch {epoch}, batch {start // config.batch_size}: {exc}"
                ) from exc
            flat = {"classifier": grads.classifier}
            flat.update({f"backbone.{k}": v for k, v in grads.backbone.items()})
            flat.update({f"disc.{k}": v for k, v in grads.disc.items()})
            adam.step(flat, lr)
            renormalize_columns(classifier)
            t = grads.terms
            sums += batch.size * np.array([t.total, t.margin, t.kl, t.mi])
            counted += batch.size
        means = sums / max(counted, 1)
        stats = EpochStats(epoch, means[0], means[1], means[2], means[3], lr)
        history.append(stats)
        if progress is not None:
            progress(stats)
        if stats.total < best_total:
            best_total = stats.total
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}

    if out_model is not None:
        save_model(out_model, backbone, disc, classifier)
    if best_model is not None:
        snapshot = {k: v.copy() for k, v in params.items()}
        for k, v in params.items():
            v[...] = best_params[k]
        save_model(best_model, backbone, disc, classifier)
        for k, v in params.items():
            v[...] = snapshot[k]
    if log_path is not None:
        atomic_write_bytes(log_path, history_csv(history).encode())
    return TrainResult(backbone, disc, classifier, classes, history, best_epoch)
