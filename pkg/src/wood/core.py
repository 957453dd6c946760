"""Vector and similarity primitives shared by the losses, model and scoring code.

Convention used throughout: rows of a similarity matrix are image embeddings,
columns are text embeddings, and entry (i, j) is the cosine similarity between
image i and text j. Entries are clamped to [-1, 1] to absorb floating-point
overshoot from the normalize-then-dot pipeline. All tensors are float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

__all__ = [
    "as_vector",
    "l2_normalize",
    "cosine_similarity",
    "SimilarityMatrix",
    "similarity_matrix",
]


def as_vector(values, name: str = "vector") -> torch.Tensor:
    """Coerce ``values`` to a 1-D float64 tensor.

    Accepts lists, numpy arrays and torch tensors. Gradient history of tensor
    inputs is preserved.

    Raises:
        ValueError: if the result is not 1-D, is empty, or contains NaN/Inf.
    """
    v = torch.as_tensor(values, dtype=torch.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {tuple(v.shape)}")
    if v.numel() == 0:
        raise ValueError(f"{name} is empty")
    if not bool(torch.isfinite(v).all()):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def l2_normalize(v) -> torch.Tensor:
    """Scale a vector to unit Euclidean norm.

    Raises:
        ValueError: on a zero vector ("degenerate embedding"), since its
            direction is undefined.
    """
    v = as_vector(v)
    norm = torch.linalg.vector_norm(v)
    if float(norm) == 0.0:
        raise ValueError("degenerate embedding: zero vector has no direction")
    return v / norm


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Raises:
        ValueError: on dimension mismatch or a zero-norm input.
    """
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape[0] != v.shape[0]:
        raise ValueError(
            f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}"
        )
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if float(nu) == 0.0 or float(nv) == 0.0:
        raise ValueError("degenerate embedding: zero vector has no direction")
    s = torch.dot(u, v) / (nu * nv)
    return float(torch.clamp(s, -1.0, 1.0))


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Square cross-modal similarity matrix with the batch's ID/OOD partition.

    ``id_indices`` and ``ood_indices`` together must cover every row index
    exactly once; they record which diagonal pairs were labeled in-distribution
    when the batch was assembled.
    """

    entries: torch.Tensor
    id_indices: tuple[int, ...]
    ood_indices: tuple[int, ...]

    def __post_init__(self):
        e = self.entries
        if not torch.is_tensor(e):
            e = torch.as_tensor(e, dtype=torch.float64)
            object.__setattr__(self, "entries", e)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError(f"entries must be square, got shape {tuple(e.shape)}")
        n = e.shape[0]
        if n == 0:
            raise ValueError("empty similarity matrix")
        ids = tuple(int(i) for i in self.id_indices)
        oods = tuple(int(i) for i in self.ood_indices)
        object.__setattr__(self, "id_indices", ids)
        object.__setattr__(self, "ood_indices", oods)
        if sorted(ids + oods) != list(range(n)):
            raise ValueError("id_indices and ood_indices must partition 0..N-1")
        with torch.no_grad():
            if not bool(torch.isfinite(e).all()):
                raise ValueError("similarity entries must be finite")
            if float(e.abs().max()) > 1.0 + 1e-12:
                raise ValueError("similarity entries must lie in [-1, 1]")

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def num_ood(self) -> int:
        return len(self.ood_indices)

    def diagonal(self) -> torch.Tensor:
        return self.entries.diagonal()


def _as_embedding_matrix(embs, name: str) -> torch.Tensor:
    if torch.is_tensor(embs):
        m = torch.as_tensor(embs, dtype=torch.float64)
    else:
        try:
            m = torch.as_tensor(embs, dtype=torch.float64)
        except (TypeError, ValueError):
            m = torch.stack([as_vector(v, name) for v in embs])
    if m.ndim == 1:
        m = m.unsqueeze(0)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a batch of vectors, got shape {tuple(m.shape)}")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    if not bool(torch.isfinite(m).all()):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def similarity_matrix(
    image_embs,
    text_embs,
    id_indices: Sequence[int],
    ood_indices: Sequence[int],
) -> SimilarityMatrix:
    """Pairwise cosine similarities between a batch of images and texts.

    Both inputs are normalized row-wise before the matrix product, so the
    result is exactly the cosine grid. Differentiable with respect to tensor
    inputs.

    Args:
        image_embs: (N, d) embeddings, or a sequence of N vectors.
        text_embs: (N, d) embeddings, aligned with ``image_embs`` by position.
        id_indices: positions whose diagonal pair is labeled in-distribution.
        ood_indices: positions labeled out-of-distribution.

    Raises:
        ValueError: on count/dimension mismatch, or if any row has zero norm.
    """
    imgs = _as_embedding_matrix(image_embs, "image_embs")
    txts = _as_embedding_matrix(text_embs, "text_embs")
    if imgs.shape[0] != txts.shape[0]:
        raise ValueError(
            f"batch size mismatch: {imgs.shape[0]} images vs {txts.shape[0]} texts"
        )
    if imgs.shape[1] != txts.shape[1]:
        raise ValueError(
            f"embedding dim mismatch: {imgs.shape[1]} vs {txts.shape[1]}"
        )

    def _normalize_rows(m: torch.Tensor, name: str) -> torch.Tensor:
        norms = torch.linalg.vector_norm(m, dim=1, keepdim=True)
        with torch.no_grad():
            zero = (norms.squeeze(1) == 0).nonzero()
        if zero.numel() > 0:
            raise ValueError(
                f"degenerate embedding: {name} row {int(zero[0])} has zero norm"
            )
        return m / norms

    entries = _normalize_rows(imgs, "image") @ _normalize_rows(txts, "text").T
    entries = torch.clamp(entries, -1.0, 1.0)
    return SimilarityMatrix(entries, tuple(id_indices), tuple(ood_indices))
