"""Enrollment, 1:1 verification and 1:N identification over embeddings.

Comparison is Euclidean distance between L2-normalized embeddings, so scores
live in [0, 2] and are invariant to embedding magnitude (the training loss is
purely angular, which makes raw norms uninformative). A subject's template is
the normalized mean of its enrolled embeddings. Decisions are inclusive at
the threshold: ``score <= threshold`` accepts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, UnknownSubject, ZeroNormEmbedding
from .storage import atomic_write_bytes

GALLERY_MAGIC = b"TPGL"
GALLERY_VERSION = 1
NORM_FLOOR = 1e-12


def _unit(vector: np.ndarray) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm < NORM_FLOOR:
        raise ZeroNormEmbedding("cannot normalize a (near-)zero embedding")
    return vector / norm


def distance(a: np.ndarray, b: np.ndarray, normalize: bool = True) -> float:
    """Euclidean dissimilarity between two embeddings.

    Both vectors are L2-normalized first (range [0, 2]); pass
    ``normalize=False`` to compare raw embeddings.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"cannot compare shapes {a.shape} and {b.shape}")
    if normalize:
        a, b = _unit(a), _unit(b)
    return float(np.linalg.norm(a - b))


@dataclass
class MatchDecision:
    score: float
    threshold: float
    accepted: bool

    def __post_init__(self) -> None:
        assert self.accepted == (self.score <= self.threshold)


@dataclass
class SubjectGallery:
    """Per-subject unit-norm templates."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def subject_ids(self) -> list[str]:
        return sorted(self.entries)

    def template(self, subject_id: str) -> np.ndarray:
        if subject_id not in self.entries:
            raise UnknownSubject(f"subject {subject_id!r} is not enrolled")
        return self.entries[subject_id]


def enroll(gallery: SubjectGallery, subject_id: str, embeddings) -> SubjectGallery:
    """Store mean-then-normalized template; re-enrollment replaces."""
    matrix = np.asarray(embeddings, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ValueError("enroll needs at least one embedding vector")
    gallery.entries[subject_id] = _unit(matrix.mean(axis=0))
    return gallery


def verify(gallery: SubjectGallery, claimed_id: str, probe: np.ndarray,
           threshold: float) -> MatchDecision:
    """1:1 decision against the claimed subject's template (ties accept)."""
    score = distance(probe, gallery.template(claimed_id))
    return MatchDecision(score, threshold, score <= threshold)


def identify(gallery: SubjectGallery, probe: np.ndarray) -> list[tuple[str, float]]:
    """All subjects ranked by ascending distance, ids breaking ties."""
    if not gallery.entries:
        raise UnknownSubject("gallery is empty")
    scored = [(sid, distance(probe, tpl)) for sid, tpl in gallery.entries.items()]
    return sorted(scored, key=lambda item: (item[1], item[0]))


def save_gallery(path: str | Path, gallery: SubjectGallery) -> None:
    """Write the gallery file (magic ``TPGL``, version, tensor-per-subject)."""
    parts = [GALLERY_MAGIC, struct.pack("<I", GALLERY_VERSION)]
    for sid in gallery.subject_ids():
        parts.append(pack_tensor(sid, gallery.entries[sid]))
    atomic_write_bytes(path, b"".join(parts))


def load_gallery(path: str | Path) -> SubjectGallery:
    buf = Path(path).read_bytes()
    if buf[:4] != GALLERY_MAGIC:
        raise ValueError(f"{path}: not a gallery file (magic {buf[:4]!r})")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != GALLERY_VERSION:
        raise ValueError(f"{path}: unsupported gallery version {version}")
    tensors = unpack_tensors(buf, offset=8)
    gallery = SubjectGallery()
    for sid, values in tensors.items():
        gallery.entries[sid] = values.astype(np.float64)
    return gallery
