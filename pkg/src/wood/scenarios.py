"""Synthetic paired corpora and the three out-of-distribution constructions.

Scenario 1 re-pairs in-distribution images with captions drawn from a
different category, so each output pair is misaligned but both halves come
from the in-distribution pool. Scenario 2 takes aligned pairs wholesale from
an external corpus whose category means live in a shifted region of latent
space; image and text still agree with each other. Scenario 3 perturbs the
image with additive Gaussian noise and keeps the caption byte-identical.

The synthetic corpus draws class-conditional Gaussian latents and pushes them
through per-modality mixing maps with orthonormal columns, so distances in
latent space survive into feature space: the external domain's mean
displacement equals the configured shift, and external pairs stay exactly as
aligned as in-distribution ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "PairedSample",
    "PairedDataset",
    "TrainingBatch",
    "SyntheticCorpusSpec",
    "SyntheticCorpus",
    "make_scenario1",
    "make_scenario2",
    "make_scenario3",
    "assemble_training_batches",
    "make_test_split",
    "generate_synthetic_corpus",
    "save_dataset",
    "load_manifest",
    "round_half_up",
]

SCENARIO_NAMES = ("id", "s1", "s2", "s3")


def round_half_up(x: float) -> int:
    """Round to the nearest integer with ties going up (3.5 -> 4)."""
    return int(math.floor(float(x) + 0.5))


@dataclass(frozen=True)
class PairedSample:
    """One image-text pair with its provenance.

    ``image`` and ``text`` are either feature vectors (synthetic corpora) or
    path/caption strings (external corpora routed through adapter backends).
    ``origin_id`` is unique within a dataset; the ``*_origin`` fields trace
    which source samples a derived OOD pair was built from.
    """

    image: object
    text: object
    category: str
    ood_flag: bool
    scenario: str
    origin_id: str
    image_origin: str | None = None
    text_origin: str | None = None
    text_category: str | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIO_NAMES:
            raise ValueError(
                f"scenario must be one of {SCENARIO_NAMES}, got {self.scenario!r}"
            )
        if (self.scenario == "id") == bool(self.ood_flag):
            raise ValueError(
                f"ood_flag={self.ood_flag} contradicts scenario={self.scenario!r}"
            )


@dataclass
class PairedDataset:
    """An ordered collection of paired samples with unique origin ids."""

    samples: list[PairedSample]
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = list(self.samples)
        seen = set()
        for s in self.samples:
            if s.origin_id in seen:
                raise ValueError(f"duplicate origin_id {s.origin_id!r}")
            seen.add(s.origin_id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i) -> PairedSample:
        return self.samples[i]

    def categories(self) -> list[str]:
        return sorted({s.category for s in self.samples})


def make_scenario1(
    dataset: PairedDataset,
    count: int,
    rng: np.random.Generator,
) -> list[PairedSample]:
    """Cross-category caption swaps over an in-distribution pool.

    Selects ``count`` source pairs without replacement, then permutes their
    captions so that every image receives a caption whose source sample sits
    in a different category. The permutation is built by grouping the
    selection by category and rotating by the largest group's size, which is
    feasible exactly when no category holds more than half the selection.

    Raises:
        ValueError: fewer than two categories, count out of range, or a
            category majority that makes a full cross-category pairing
            impossible.
    """
    if len(dataset.categories()) < 2:
        raise ValueError("scenario 1 needs a pool with at least two categories")
    if count < 1:
        raise ValueError("count must be positive")
    if count > len(dataset):
        raise ValueError(
            f"count {count} exceeds pool size {len(dataset)}"
        )
    picks = rng.choice(len(dataset), size=count, replace=False)
    chosen = [dataset[int(i)] for i in picks]

    groups: dict[str, list[PairedSample]] = {}
    for s in chosen:
        groups.setdefault(s.category, []).append(s)
    for members in groups.values():
        rng.shuffle(members)
    ordered_groups = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    largest = len(ordered_groups[0][1])
    if 2 * largest > count:
        raise ValueError(
            f"no cross-category pairing exists: category {ordered_groups[0][0]!r} "
            f"holds {largest} of {count} selected samples"
        )
    flat = [s for _, members in ordered_groups for s in members]

    out = []
    for i, img_src in enumerate(flat):
        txt_src = flat[(i + largest) % count]
        out.append(
            PairedSample(
                image=img_src.image,
                text=txt_src.text,
                category=img_src.category,
                ood_flag=True,
                scenario="s1",
                origin_id=f"s1:{i:06d}",
                image_origin=img_src.origin_id,
                text_origin=txt_src.origin_id,
                text_category=txt_src.category,
            )
        )
    order = rng.permutation(len(out))
    return [out[int(i)] for i in order]


def make_scenario2(
    external: PairedDataset,
    count: int,
    rng: np.random.Generator,
) -> list[PairedSample]:
    """Aligned pairs lifted from an external corpus and relabeled OOD.

    The pairs keep their internal image-text agreement; only the domain is
    foreign. The external pool must be disjoint in origin from the
    in-distribution corpus (the synthetic generator guarantees this).
    """
    if count < 1:
        raise ValueError("count must be positive")
    if count > len(external):
        raise ValueError(
            f"count {count} exceeds external pool size {len(external)}"
        )
    picks = rng.choice(len(external), size=count, replace=False)
    out = []
    for k, i in enumerate(picks):
        src = external[int(i)]
        out.append(
            PairedSample(
                image=src.image,
                text=src.text,
                category=src.category,
                ood_flag=True,
                scenario="s2",
                origin_id=f"s2:{k:06d}",
                image_origin=src.origin_id,
                text_origin=src.origin_id,
                text_category=src.category,
            )
        )
    return out


def make_scenario3(
    dataset: PairedDataset,
    count: int,
    noise_std: float,
    rng: np.random.Generator,
) -> list[PairedSample]:
    """Gaussian-perturbed images with untouched captions.

    Adds i.i.d. N(0, noise_std^2) noise to every image entry; the caption
    object is reused as-is, so it stays byte-identical to the source.

    Raises:
        ValueError: non-positive noise_std or count out of range.
        TypeError: image payloads that are not numeric arrays.
    """
    if noise_std <= 0.0:
        raise ValueError(f"noise_std must be positive, got {noise_std}")
    if count < 1:
        raise ValueError("count must be positive")
    if count > len(dataset):
        raise ValueError(f"count {count} exceeds pool size {len(dataset)}")
    picks = rng.choice(len(dataset), size=count, replace=False)
    out = []
    for k, i in enumerate(picks):
        src = dataset[int(i)]
        if isinstance(src.image, str):
            raise TypeError(
                "scenario 3 needs numeric image payloads; decode paths first"
            )
        image = np.asarray(src.image, dtype=np.float64)
        noisy = image + rng.normal(0.0, noise_std, size=image.shape)
        out.append(
            PairedSample(
                image=noisy,
                text=src.text,
                category=src.category,
                ood_flag=True,
                scenario="s3",
                origin_id=f"s3:{k:06d}",
                image_origin=src.origin_id,
                text_origin=src.origin_id,
                text_category=src.category,
            )
        )
    return out


@dataclass(frozen=True)
class TrainingBatch:
    """One mixed batch with its ID/OOD index partition."""

    samples: tuple[PairedSample, ...]
    id_indices: tuple[int, ...]
    ood_indices: tuple[int, ...]

    def __post_init__(self):
        n = len(self.samples)
        if sorted(self.id_indices + self.ood_indices) != list(range(n)):
            raise ValueError("id_indices and ood_indices must partition the batch")
        for i in self.id_indices:
            if self.samples[i].ood_flag:
                raise ValueError(f"sample {i} is flagged OOD but indexed as ID")
        for i in self.ood_indices:
            if not self.samples[i].ood_flag:
                raise ValueError(f"sample {i} is flagged ID but indexed as OOD")

    @property
    def n(self) -> int:
        return len(self.samples)

    def images(self) -> list:
        return [s.image for s in self.samples]

    def texts(self) -> list:
        return [s.text for s in self.samples]

    def labels(self) -> np.ndarray:
        return np.array(
            [0.0 if s.ood_flag else 1.0 for s in self.samples], dtype=np.float64
        )

    def scenario_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for i in self.ood_indices:
            name = self.samples[i].scenario
            counts[name] = counts.get(name, 0) + 1
        return counts


class _PoolCycler:
    """Draws from a pool in shuffled order, reshuffling on exhaustion."""

    def __init__(self, pool: Sequence[PairedSample], rng: np.random.Generator):
        self.pool = list(pool)
        self.rng = rng
        self.order = rng.permutation(len(self.pool))
        self.pos = 0

    def draw(self) -> PairedSample:
        if self.pos >= len(self.pool):
            self.order = self.rng.permutation(len(self.pool))
            self.pos = 0
        sample = self.pool[int(self.order[self.pos])]
        self.pos += 1
        return sample


def ood_batch_quota(
    batch_size: int,
    ood_fraction: float,
    n_scenarios: int,
    per_scenario: bool = True,
) -> int:
    """Labeled-OOD slots per batch.

    With the per-scenario budget (the default), each scenario is entitled to
    ``ood_fraction`` of the batch, so the total is round-half-up of
    batch_size * ood_fraction * n_scenarios; the total budget mode applies
    the fraction once. Either way every scenario gets at least one slot
    whenever the fraction is positive.
    """
    if not (0.0 <= ood_fraction < 0.5):
        raise ValueError(f"ood_fraction must lie in [0, 0.5), got {ood_fraction}")
    if ood_fraction == 0.0 or n_scenarios == 0:
        return 0
    per = batch_size * ood_fraction
    total = per * n_scenarios if per_scenario else per
    return max(n_scenarios, round_half_up(total))


def assemble_training_batches(
    id_pool: Sequence[PairedSample],
    ood_pools: Mapping[str, Sequence[PairedSample]],
    batch_size: int,
    ood_fraction: float,
    rng: np.random.Generator,
    per_scenario: bool = True,
) -> Iterator[TrainingBatch]:
    """Yield one epoch of mixed batches.

    ID samples are a shuffled pass over ``id_pool``, consumed in consecutive
    chunks; each batch tops up with the OOD quota split evenly across
    scenarios, the remainder rotating with the batch index so no scenario is
    systematically favored. OOD pools are sampled in shuffled cycles and may
    repeat across batches. Positions within a batch are shuffled.

    Raises:
        ValueError: fraction outside [0, 0.5), an empty scenario pool, or an
            ID pool too small for a single batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    scenario_names = sorted(ood_pools)
    quota = ood_batch_quota(
        batch_size, ood_fraction, len(scenario_names), per_scenario
    )
    n_id = batch_size - quota
    if n_id < 1:
        raise ValueError(
            f"OOD quota {quota} leaves no room for ID samples in batches of {batch_size}"
        )
    if quota > 0:
        for name in scenario_names:
            if len(ood_pools[name]) == 0:
                raise ValueError(f"scenario pool {name!r} is empty")
    if len(id_pool) < n_id:
        raise ValueError(
            f"ID pool of {len(id_pool)} cannot fill one batch ({n_id} ID slots)"
        )

    id_pool = list(id_pool)
    id_order = rng.permutation(len(id_pool))
    cyclers = {name: _PoolCycler(ood_pools[name], rng) for name in scenario_names}
    num_batches = len(id_pool) // n_id
    base, extra = (divmod(quota, len(scenario_names)) if quota else (0, 0))

    for b in range(num_batches):
        members = [id_pool[int(i)] for i in id_order[b * n_id : (b + 1) * n_id]]
        for j, name in enumerate(scenario_names):
            take = base + (1 if (j - b) % len(scenario_names) < extra else 0)
            for _ in range(take):
                members.append(cyclers[name].draw())
        order = rng.permutation(len(members))
        shuffled = tuple(members[int(i)] for i in order)
        id_idx = tuple(i for i, s in enumerate(shuffled) if not s.ood_flag)
        ood_idx = tuple(i for i, s in enumerate(shuffled) if s.ood_flag)
        yield TrainingBatch(shuffled, id_idx, ood_idx)


def make_test_split(
    id_test: Sequence[PairedSample],
    s1: Sequence[PairedSample],
    s2: Sequence[PairedSample],
    s3: Sequence[PairedSample],
) -> PairedDataset:
    """Balanced evaluation split: 25% each of ID, s1, s2 and s3.

    Every group is truncated to the size of the smallest, keeping each
    group's own order, so the same inputs always give the same split.
    """
    groups = {"id": list(id_test), "s1": list(s1), "s2": list(s2), "s3": list(s3)}
    n = min(len(g) for g in groups.values())
    if n == 0:
        empty = [k for k, g in groups.items() if not g]
        raise ValueError(f"every group needs at least one sample; empty: {empty}")
    samples = []
    for name in ("id", "s1", "s2", "s3"):
        samples.extend(groups[name][:n])
    return PairedDataset(
        samples,
        manifest={"composition": {name: n for name in ("id", "s1", "s2", "s3")}},
    )


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Geometry and size of the synthetic paired corpus.

    Mixing maps require ``image_dim >= latent_dim`` and
    ``text_dim >= latent_dim`` so their columns can be orthonormal;
    ``domain_shift`` displaces the external corpus's category means along a
    random latent direction by exactly that Euclidean distance.
    """

    n_categories: int = 6
    latent_dim: int = 16
    image_dim: int = 48
    text_dim: int = 40
    train_per_category: int = 240
    test_per_category: int = 40
    external_per_category: int = 60
    category_spread: float = 1.0
    latent_jitter: float = 0.35
    feature_noise: float = 0.15
    domain_shift: float = 3.0

    def __post_init__(self):
        if self.n_categories < 2:
            raise ValueError("need at least two categories")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if self.image_dim < self.latent_dim or self.text_dim < self.latent_dim:
            raise ValueError(
                "feature dims must be at least latent_dim for orthonormal mixing maps"
            )
        for name in ("train_per_category", "test_per_category", "external_per_category"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.category_spread <= 0 or self.latent_jitter <= 0:
            raise ValueError("category_spread and latent_jitter must be positive")
        if self.feature_noise < 0 or self.domain_shift < 0:
            raise ValueError("feature_noise and domain_shift must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_categories": self.n_categories,
            "latent_dim": self.latent_dim,
            "image_dim": self.image_dim,
            "text_dim": self.text_dim,
            "train_per_category": self.train_per_category,
            "test_per_category": self.test_per_category,
            "external_per_category": self.external_per_category,
            "category_spread": self.category_spread,
            "latent_jitter": self.latent_jitter,
            "feature_noise": self.feature_noise,
            "domain_shift": self.domain_shift,
        }


@dataclass
class SyntheticCorpus:
    """Generated splits plus the mixing maps that produced them."""

    id_train: PairedDataset
    id_test: PairedDataset
    external: PairedDataset
    image_map: np.ndarray
    text_map: np.ndarray
    spec: SyntheticCorpusSpec
    seed: int


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q


def generate_synthetic_corpus(
    spec: SyntheticCorpusSpec,
    seed: int,
) -> SyntheticCorpus:
    """Draw the class-conditional Gaussian corpus described by ``spec``.

    Every sample is a latent z = mean_c + jitter * N(0, I) pushed through the
    modality maps, plus isotropic feature noise. The external split reuses
    the same maps and per-category structure but shifts every category mean
    by a shared latent offset of length ``domain_shift``, so external pairs
    remain internally aligned while the population moves. Sub-streams are
    spawned per split, so any one split is reproducible from the seed alone.
    """
    ss = np.random.SeedSequence(int(seed))
    maps_rng, means_rng, train_rng, test_rng, ext_rng = (
        np.random.default_rng(child) for child in ss.spawn(5)
    )
    a = _orthonormal_columns(maps_rng, spec.image_dim, spec.latent_dim)
    b = _orthonormal_columns(maps_rng, spec.text_dim, spec.latent_dim)
    means = means_rng.normal(size=(spec.n_categories, spec.latent_dim)) * spec.category_spread
    direction = means_rng.normal(size=spec.latent_dim)
    direction /= np.linalg.norm(direction)
    offset = spec.domain_shift * direction

    def emit(rng, centered_means, per_category, prefix) -> PairedDataset:
        samples = []
        for c in range(spec.n_categories):
            category = f"cat{c:02d}"
            for i in range(per_category):
                z = centered_means[c] + spec.latent_jitter * rng.normal(size=spec.latent_dim)
                image = a @ z + spec.feature_noise * rng.normal(size=spec.image_dim)
                text = b @ z + spec.feature_noise * rng.normal(size=spec.text_dim)
                samples.append(
                    PairedSample(
                        image=image,
                        text=text,
                        category=category,
                        ood_flag=False,
                        scenario="id",
                        origin_id=f"{prefix}:{category}:{i:05d}",
                    )
                )
        return PairedDataset(samples, manifest={"split": prefix})

    id_train = emit(train_rng, means, spec.train_per_category, "train")
    id_test = emit(test_rng, means, spec.test_per_category, "test")
    external = emit(ext_rng, means + offset, spec.external_per_category, "ext")
    return SyntheticCorpus(
        id_train=id_train,
        id_test=id_test,
        external=external,
        image_map=a,
        text_map=b,
        spec=spec,
        seed=int(seed),
    )


def save_dataset(dataset: PairedDataset, out_dir, name: str) -> Path:
    """Write a dataset as ``<name>.tsv`` plus ``<name>.npz`` feature storage.

    Manifest rows are tab-separated ``image text category scenario origin_id``
    with no header. Array payloads are stored in the npz and referenced as
    ``<name>.npz#<key>``; string payloads pass through unchanged.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    arrays: dict[str, np.ndarray] = {}

    def ref_for(payload, key):
        if isinstance(payload, str):
            if "\t" in payload or "\n" in payload:
                raise ValueError("string payloads must not contain tabs or newlines")
            return payload
        arrays[key] = np.asarray(payload, dtype=np.float64)
        return f"{name}.npz#{key}"

    for i, s in enumerate(dataset):
        img_ref = ref_for(s.image, f"img_{i:06d}")
        txt_ref = ref_for(s.text, f"txt_{i:06d}")
        rows.append(
            "\t".join([img_ref, txt_ref, s.category, s.scenario, s.origin_id])
        )
    manifest_path = out_dir / f"{name}.tsv"
    manifest_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    if arrays:
        np.savez(out_dir / f"{name}.npz", **arrays)
    return manifest_path


def load_manifest(path) -> PairedDataset:
    """Read a dataset manifest written by ``save_dataset`` or by hand.

    Accepts the three-column form ``image text category`` (rows become ID
    samples with positional origin ids) and the five-column form that adds
    ``scenario`` and ``origin_id``. References like ``file.npz#key`` are
    resolved relative to the manifest's directory; anything else is kept as
    a string payload.
    """
    path = Path(path)
    base = path.parent
    npz_cache: dict[Path, np.lib.npyio.NpzFile] = {}

    def resolve(ref: str):
        if ".npz#" in ref:
            file_part, key = ref.split("#", 1)
            npz_path = base / file_part
            if npz_path not in npz_cache:
                npz_cache[npz_path] = np.load(npz_path)
            return npz_cache[npz_path][key]
        return ref

    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) == 3:
            img_ref, txt_ref, category = cols
            scenario, origin_id = "id", f"row:{lineno:06d}"
        elif len(cols) == 5:
            img_ref, txt_ref, category, scenario, origin_id = cols
        else:
            raise ValueError(
                f"{path}:{lineno + 1}: expected 3 or 5 tab-separated columns, got {len(cols)}"
            )
        samples.append(
            PairedSample(
                image=resolve(img_ref),
                text=resolve(txt_ref),
                category=category,
                ood_flag=scenario != "id",
                scenario=scenario,
                origin_id=origin_id,
            )
        )
    return PairedDataset(samples, manifest={"path": str(path)})
