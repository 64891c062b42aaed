"""Model checkpoint file (magic ``TPRT``).

Layout: magic bytes, format version (u32), embedding dimension (u32), class
count (u32), then tensor records (see :mod:`toothprint.storage`) until end of
file. Network shape is carried in small ``meta.*`` tensors so a checkpoint is
self-describing; parameters are stored as little-endian float32, making the
save -> load -> save cycle byte-stable.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .embedding import Backbone, BackboneSpec, MiDiscriminator, MiSpec
from .storage import atomic_write_bytes, pack_tensor, unpack_tensors

MAGIC = b"TPRT"
VERSION = 1


def save_model(path: str | Path, backbone: Backbone, disc: MiDiscriminator,
               classifier: np.ndarray) -> None:
    """Serialize backbone, discriminator and classifier columns atomically."""
    spec = backbone.spec
    n_classes = classifier.shape[1]
    parts = [MAGIC, struct.pack("<III", VERSION, spec.embed_dim, n_classes)]
    parts.append(pack_tensor("meta.input_size", np.array([spec.input_size])))
    parts.append(pack_tensor("meta.channels", np.array(spec.channels)))
    parts.append(pack_tensor("meta.disc_channels", np.array(disc.spec.channels)))
    parts.append(pack_tensor("meta.disc_hidden", np.array([disc.spec.hidden])))
    for name, value in sorted(backbone.params().items()):
        parts.append(pack_tensor(f"backbone.{name}", value))
    for name, value in sorted(disc.params().items()):
        parts.append(pack_tensor(f"disc.{name}", value))
    parts.append(pack_tensor("classifier.w", classifier))
    atomic_write_bytes(path, b"".join(parts))


def load_model(path: str | Path) -> tuple[Backbone, MiDiscriminator, np.ndarray]:
    """Rebuild the model from a ``TPRT`` file."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (magic {buf[:4]!r})")
    version, embed_dim, n_classes = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    tensors = unpack_tensors(buf, offset=16)
    spec = BackboneSpec(
        input_size=int(tensors["meta.input_size"][0]),
        channels=tuple(int(c) for c in tensors["meta.channels"]),
        embed_dim=embed_dim,
    )
    mi_spec = MiSpec(
        channels=tuple(int(c) for c in tensors["meta.disc_channels"]),
        hidden=int(tensors["meta.disc_hidden"][0]),
    )
    backbone = Backbone(spec, seed=0)
    disc = MiDiscriminator(mi_spec, spec.input_size, embed_dim, seed=0)
    for name, param in backbone.params().items():
        param[...] = tensors[f"backbone.{name}"].astype(np.float64)
    for name, param in disc.params().items():
        param[...] = tensors[f"disc.{name}"].astype(np.float64)
    classifier = tensors["classifier.w"].astype(np.float64)
    if classifier.shape != (embed_dim, n_classes):
        raise ValueError(f"{path}: classifier shape {classifier.shape} does not match header")
    return backbone, disc, classifier
