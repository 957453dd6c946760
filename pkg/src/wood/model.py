"""Encoder backends, sparsity gates, fusion and the detection model.

The model wires four pieces together: a backend embedding raw image/text
payloads into a shared dimension, one sigmoid gate per modality that rescales
embedding entries into (0, 1)-weighted copies, a concatenation fuse, and a
small MLP head that emits the probability of a pair being in-distribution.
A forward pass also produces the batch similarity matrix and the per-pair
alignment score (cos + 1) / 2, so one pass feeds both loss terms and both
detector scores.

Backends are pluggable through ``register_backend``; anything implementing
``EncoderBackend`` (a pretrained vision/language adapter, say) can slot in
without touching the rest of the package.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .core import SimilarityMatrix, cosine_similarity, similarity_matrix

__all__ = [
    "EncodeError",
    "EncoderBackend",
    "FrozenLinearBackend",
    "TrainableLinearBackend",
    "TrainableMlpBackend",
    "GateProjection",
    "ClassifierHead",
    "ForwardPass",
    "WoodModel",
    "fuse",
    "pair_score_cl",
    "register_backend",
    "build_backend",
    "backend_kinds",
    "scaled_uniform_init_",
]


class EncodeError(RuntimeError):
    """A backend failed on one sample; carries the batch index and modality."""

    def __init__(self, sample_index: int, modality: str, message: str):
        super().__init__(
            f"{modality} encoding failed for sample {sample_index}: {message}"
        )
        self.sample_index = sample_index
        self.modality = modality


def scaled_uniform_init_(linear: nn.Linear, generator: torch.Generator) -> None:
    """In-place U(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weight and bias."""
    bound = 1.0 / math.sqrt(linear.in_features)
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=generator)
        if linear.bias is not None:
            linear.bias.uniform_(-bound, bound, generator=generator)


class EncoderBackend(abc.ABC):
    """Adapter contract for mapping raw payloads to fixed-size embeddings.

    Implementations declare ``name``, ``dim`` and ``trainable`` and encode one
    payload at a time; the batched helpers stack single-sample calls and may
    be overridden with something faster.
    """

    name: str = "backend"
    dim: int = 0
    trainable: bool = False

    @abc.abstractmethod
    def encode_image(self, image) -> torch.Tensor:
        """Embed one raw image payload as a 1-D float64 tensor of size dim."""

    @abc.abstractmethod
    def encode_text(self, text) -> torch.Tensor:
        """Embed one raw text payload as a 1-D float64 tensor of size dim."""

    def encode_images(self, images: Sequence) -> torch.Tensor:
        return torch.stack([self.encode_image(x) for x in images])

    def encode_texts(self, texts: Sequence) -> torch.Tensor:
        return torch.stack([self.encode_text(t) for t in texts])


def _as_feature(payload, modality: str) -> torch.Tensor:
    if isinstance(payload, str):
        raise TypeError(
            f"toy backends embed feature vectors, got a string {modality} payload; "
            "use a pretrained adapter backend for raw media"
        )
    x = torch.as_tensor(np.asarray(payload, dtype=np.float64), dtype=torch.float64)
    if x.ndim != 1:
        raise ValueError(f"{modality} payload must be 1-D, got shape {tuple(x.shape)}")
    return x


def _as_feature_batch(payloads, modality: str) -> torch.Tensor:
    return torch.stack([_as_feature(p, modality) for p in payloads])


class FrozenLinearBackend(nn.Module, EncoderBackend):
    """Frozen random projections sharing one cross-modal alignment map.

    ``aligned`` builds both projection matrices as C A^T and C B^T from the
    corpus mixing maps A and B (orthonormal columns), so an aligned pair
    (A z, B z) lands on the same embedding C z in both modalities before any
    training happens.
    """

    trainable = False

    def __init__(self, image_weight, text_weight, name: str = "frozen_linear"):
        nn.Module.__init__(self)
        wi = torch.as_tensor(np.asarray(image_weight), dtype=torch.float64)
        wt = torch.as_tensor(np.asarray(text_weight), dtype=torch.float64)
        if wi.ndim != 2 or wt.ndim != 2 or wi.shape[0] != wt.shape[0]:
            raise ValueError("projection matrices must be 2-D with a shared output dim")
        self.register_buffer("image_weight", wi)
        self.register_buffer("text_weight", wt)
        self.name = name
        self.dim = int(wi.shape[0])

    @classmethod
    def aligned(
        cls,
        image_map,
        text_map,
        embedding_dim: int,
        seed: int,
    ) -> "FrozenLinearBackend":
        a = torch.as_tensor(np.asarray(image_map), dtype=torch.float64)
        b = torch.as_tensor(np.asarray(text_map), dtype=torch.float64)
        if a.shape[1] != b.shape[1]:
            raise ValueError("mixing maps must share the latent dimension")
        latent_dim = a.shape[1]
        gen = torch.Generator().manual_seed(int(seed))
        shared = torch.randn(
            (int(embedding_dim), latent_dim), generator=gen, dtype=torch.float64
        ) / math.sqrt(latent_dim)
        return cls(shared @ a.T, shared @ b.T)

    def encode_image(self, image) -> torch.Tensor:
        return self.image_weight @ _as_feature(image, "image")

    def encode_text(self, text) -> torch.Tensor:
        return self.text_weight @ _as_feature(text, "text")

    def encode_images(self, images) -> torch.Tensor:
        return _as_feature_batch(images, "image") @ self.image_weight.T

    def encode_texts(self, texts) -> torch.Tensor:
        return _as_feature_batch(texts, "text") @ self.text_weight.T


class TrainableLinearBackend(nn.Module, EncoderBackend):
    """Two stacked linear layers per modality, no activation in between.

    The bottleneck keeps capacity linear on purpose: the encoder can rotate
    and scale the feature space but cannot carve out isolated clusters, which
    mirrors how a frozen pretrained backbone behaves under light fine-tuning.
    """

    trainable = True

    def __init__(
        self,
        image_dim: int,
        text_dim: int,
        embedding_dim: int,
        hidden_dim: int,
        seed: int = 0,
        name: str = "trainable_linear",
    ):
        nn.Module.__init__(self)
        self.image_in = nn.Linear(image_dim, hidden_dim, dtype=torch.float64)
        self.image_out = nn.Linear(hidden_dim, embedding_dim, dtype=torch.float64)
        self.text_in = nn.Linear(text_dim, hidden_dim, dtype=torch.float64)
        self.text_out = nn.Linear(hidden_dim, embedding_dim, dtype=torch.float64)
        gen = torch.Generator().manual_seed(int(seed))
        for layer in (self.image_in, self.image_out, self.text_in, self.text_out):
            scaled_uniform_init_(layer, gen)
        self.name = name
        self.dim = int(embedding_dim)

    def encode_image(self, image) -> torch.Tensor:
        return self.image_out(self.image_in(_as_feature(image, "image")))

    def encode_text(self, text) -> torch.Tensor:
        return self.text_out(self.text_in(_as_feature(text, "text")))

    def encode_images(self, images) -> torch.Tensor:
        return self.image_out(self.image_in(_as_feature_batch(images, "image")))

    def encode_texts(self, texts) -> torch.Tensor:
        return self.text_out(self.text_in(_as_feature_batch(texts, "text")))


class TrainableMlpBackend(TrainableLinearBackend):
    """Variant with a tanh between the two layers, for capacity experiments."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("name", "trainable_mlp")
        super().__init__(*args, **kwargs)

    def encode_image(self, image) -> torch.Tensor:
        return self.image_out(torch.tanh(self.image_in(_as_feature(image, "image"))))

    def encode_text(self, text) -> torch.Tensor:
        return self.text_out(torch.tanh(self.text_in(_as_feature(text, "text"))))

    def encode_images(self, images) -> torch.Tensor:
        return self.image_out(torch.tanh(self.image_in(_as_feature_batch(images, "image"))))

    def encode_texts(self, texts) -> torch.Tensor:
        return self.text_out(torch.tanh(self.text_in(_as_feature_batch(texts, "text"))))


class GateProjection(nn.Module):
    """Per-entry sigmoid gate over an embedding.

    A linear map of the embedding drives a sigmoid, and the embedding is
    multiplied elementwise by those (0, 1) activations. The activations are
    returned alongside the gated embedding so the L1 sparsity penalty can see
    them.
    """

    def __init__(self, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.proj = nn.Linear(dim, dim, dtype=torch.float64)
        if generator is not None:
            scaled_uniform_init_(self.proj, generator)
        self.dim = int(dim)

    def forward(self, emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        emb = torch.as_tensor(emb, dtype=torch.float64)
        if emb.shape[-1] != self.dim:
            raise ValueError(
                f"gate expects dim {self.dim}, got {emb.shape[-1]}"
            )
        activation = torch.sigmoid(self.proj(emb))
        return emb * activation, activation


class ClassifierHead(nn.Module):
    """MLP over the fused embedding ending in a sigmoid ID-probability."""

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int] = (1024, 512, 256),
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if len(hidden) == 0:
            raise ValueError("classifier needs at least one hidden layer")
        dims = [int(input_dim), *[int(h) for h in hidden]]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=torch.float64)
            for i in range(len(dims) - 1)
        )
        self.out = nn.Linear(dims[-1], 1, dtype=torch.float64)
        if generator is not None:
            for layer in self.layers:
                scaled_uniform_init_(layer, generator)
            scaled_uniform_init_(self.out, generator)
        self.input_dim = int(input_dim)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(fused, dtype=torch.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(
                f"classifier expects dim {self.input_dim}, got {x.shape[-1]}"
            )
        for layer in self.layers:
            x = torch.relu(layer(x))
        return torch.sigmoid(self.out(x)).squeeze(-1)


def fuse(gated_img: torch.Tensor, gated_txt: torch.Tensor) -> torch.Tensor:
    """Concatenate gated modality embeddings along the last axis."""
    gi = torch.as_tensor(gated_img, dtype=torch.float64)
    gt = torch.as_tensor(gated_txt, dtype=torch.float64)
    if gi.shape[-1] != gt.shape[-1]:
        raise ValueError(
            f"modality dims differ: {gi.shape[-1]} vs {gt.shape[-1]}"
        )
    if gi.shape[:-1] != gt.shape[:-1]:
        raise ValueError("batch shapes differ between modalities")
    return torch.cat([gi, gt], dim=-1)


def pair_score_cl(img_emb, txt_emb) -> float:
    """Alignment score of one pair, (cosine + 1) / 2, in [0, 1]."""
    return (cosine_similarity(img_emb, txt_emb) + 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class ForwardPass:
    """Everything one batch pass produces: similarities, scores, activations."""

    similarity: SimilarityMatrix
    p_bc: torch.Tensor
    p_cl: torch.Tensor
    gate_img: torch.Tensor
    gate_txt: torch.Tensor
    image_emb: torch.Tensor
    text_emb: torch.Tensor


class WoodModel(nn.Module):
    """Joint detector: alignment-scored encoders plus a gated fused classifier.

    One forward pass embeds both modalities, builds the batch similarity
    matrix (feeding the contrastive loss and the alignment score
    p_cl = (S_nn + 1) / 2), gates each embedding, fuses them and runs the
    classifier head for p_bc.
    """

    def __init__(
        self,
        backend: EncoderBackend,
        margin: float = 0.2,
        lam: float = 0.8,
        classifier_hidden: Sequence[int] = (1024, 512, 256),
        gate_l1_weight: float = 1.0,
        seed: int = 0,
    ):
        super().__init__()
        if not (0.0 <= float(margin) <= 2.0):
            raise ValueError(f"margin must lie in [0, 2], got {margin}")
        if float(lam) < 0.0:
            raise ValueError(f"lam must be non-negative, got {lam}")
        self.backend = backend
        gen = torch.Generator().manual_seed(int(seed))
        self.gate_img = GateProjection(backend.dim, gen)
        self.gate_txt = GateProjection(backend.dim, gen)
        self.head = ClassifierHead(2 * backend.dim, classifier_hidden, gen)
        self.margin = float(margin)
        self.lam = float(lam)
        self.gate_l1_weight = float(gate_l1_weight)

    def _encode(self, payloads, modality: str) -> torch.Tensor:
        encode_batch = (
            self.backend.encode_images if modality == "image" else self.backend.encode_texts
        )
        encode_one = (
            self.backend.encode_image if modality == "image" else self.backend.encode_text
        )
        try:
            return encode_batch(payloads)
        except Exception as exc:
            for i, payload in enumerate(payloads):
                try:
                    encode_one(payload)
                except Exception as inner:
                    raise EncodeError(i, modality, str(inner)) from inner
            raise

    def forward(
        self,
        images: Sequence,
        texts: Sequence,
        id_indices: Sequence[int],
        ood_indices: Sequence[int],
    ) -> ForwardPass:
        if len(images) != len(texts):
            raise ValueError(
                f"batch size mismatch: {len(images)} images vs {len(texts)} texts"
            )
        img_emb = self._encode(images, "image")
        txt_emb = self._encode(texts, "text")
        sim = similarity_matrix(img_emb, txt_emb, id_indices, ood_indices)
        p_cl = (sim.diagonal() + 1.0) / 2.0
        gated_img, act_img = self.gate_img(img_emb)
        gated_txt, act_txt = self.gate_txt(txt_emb)
        p_bc = self.head(fuse(gated_img, gated_txt))
        return ForwardPass(
            similarity=sim,
            p_bc=p_bc,
            p_cl=p_cl,
            gate_img=act_img,
            gate_txt=act_txt,
            image_emb=img_emb,
            text_emb=txt_emb,
        )


_BACKEND_BUILDERS: dict[str, Callable] = {}


def register_backend(kind: str, builder: Callable) -> None:
    """Register a backend factory under ``kind`` for config-driven builds.

    The builder is called as ``builder(options, image_dim=..., text_dim=...,
    embedding_dim=..., seed=..., alignment_maps=...)`` and must return an
    ``EncoderBackend``.
    """
    _BACKEND_BUILDERS[str(kind)] = builder


def backend_kinds() -> tuple[str, ...]:
    return tuple(sorted(_BACKEND_BUILDERS))


def build_backend(
    spec: dict,
    *,
    image_dim: int,
    text_dim: int,
    embedding_dim: int,
    seed: int,
    alignment_maps: tuple | None = None,
) -> EncoderBackend:
    """Build a backend from a config mapping like {"kind": ..., options...}.

    ``alignment_maps`` carries the corpus mixing maps (A, B) that the frozen
    backend aligns against; when absent the frozen backend falls back to
    zero projections, which is only useful as a shell for loading checkpoint
    weights into.
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValueError("backend spec must be a mapping with a 'kind' key")
    kind = spec["kind"]
    if kind not in _BACKEND_BUILDERS:
        raise ValueError(
            f"unknown backend kind {kind!r}; registered kinds: {', '.join(backend_kinds())}"
        )
    options = {k: v for k, v in spec.items() if k != "kind"}
    backend = _BACKEND_BUILDERS[kind](
        options,
        image_dim=int(image_dim),
        text_dim=int(text_dim),
        embedding_dim=int(embedding_dim),
        seed=int(seed),
        alignment_maps=alignment_maps,
    )
    if options.get("trainable") is False and isinstance(backend, nn.Module):
        for p in backend.parameters():
            p.requires_grad_(False)
        backend.trainable = False
    return backend


def _build_frozen_linear(options, *, image_dim, text_dim, embedding_dim, seed, alignment_maps):
    if alignment_maps is None:
        zeros_i = np.zeros((embedding_dim, image_dim))
        zeros_t = np.zeros((embedding_dim, text_dim))
        return FrozenLinearBackend(zeros_i, zeros_t)
    image_map, text_map = alignment_maps
    return FrozenLinearBackend.aligned(image_map, text_map, embedding_dim, seed)


def _build_trainable_linear(options, *, image_dim, text_dim, embedding_dim, seed, alignment_maps):
    hidden = int(options.get("hidden_dim", max(8, embedding_dim // 2)))
    return TrainableLinearBackend(image_dim, text_dim, embedding_dim, hidden, seed=seed)


def _build_trainable_mlp(options, *, image_dim, text_dim, embedding_dim, seed, alignment_maps):
    hidden = int(options.get("hidden_dim", max(8, embedding_dim // 2)))
    return TrainableMlpBackend(image_dim, text_dim, embedding_dim, hidden, seed=seed)


register_backend("frozen_linear", _build_frozen_linear)
register_backend("trainable_linear", _build_trainable_linear)
register_backend("trainable_mlp", _build_trainable_mlp)
