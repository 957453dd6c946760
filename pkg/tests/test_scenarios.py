"""Scenario generators, batch assembly, the synthetic corpus and manifest IO."""

import numpy as np
import pytest

from conftest import micro_corpus_spec

from wood.scenarios import (
    PairedDataset,
    PairedSample,
    SyntheticCorpusSpec,
    assemble_training_batches,
    generate_synthetic_corpus,
    load_manifest,
    make_scenario1,
    make_scenario2,
    make_scenario3,
    make_test_split,
    ood_batch_quota,
    round_half_up,
    save_dataset,
)


def id_sample(i, category, dim=4, rng=None):
    img = rng.normal(size=dim) if rng is not None else np.full(dim, float(i))
    txt = rng.normal(size=dim - 1) if rng is not None else np.full(dim - 1, float(i))
    return PairedSample(
        image=img, text=txt, category=category,
        ood_flag=False, scenario="id", origin_id=f"src:{category}:{i:04d}",
    )


def toy_dataset(counts, rng=None):
    """counts: {category: n_samples}"""
    samples = []
    i = 0
    for cat, n in counts.items():
        for _ in range(n):
            samples.append(id_sample(i, cat, rng=rng))
            i += 1
    return PairedDataset(samples)


def test_round_half_up():
    assert round_half_up(0.4) == 0
    assert round_half_up(0.5) == 1
    assert round_half_up(1.5) == 2
    assert round_half_up(2.5) == 3
    assert round_half_up(3.84) == 4


class TestPairedSample:
    def test_flag_and_scenario_must_agree(self, rng):
        with pytest.raises(ValueError):
            PairedSample(
                image=rng.normal(size=3), text="t", category="c",
                ood_flag=True, scenario="id", origin_id="x",
            )
        with pytest.raises(ValueError):
            PairedSample(
                image=rng.normal(size=3), text="t", category="c",
                ood_flag=False, scenario="s1", origin_id="x",
            )

    def test_dataset_rejects_duplicate_origins(self, rng):
        s = id_sample(0, "a", rng=rng)
        with pytest.raises(ValueError, match="origin"):
            PairedDataset([s, s])


class TestScenario1:
    def test_two_samples_two_categories_forces_the_cross_swap(self, rng):
        data = toy_dataset({"a": 1, "b": 1}, rng=rng)
        out = make_scenario1(data, 2, rng)
        assert len(out) == 2
        for s in out:
            assert s.scenario == "s1"
            assert s.ood_flag is True
            assert s.image_origin != s.text_origin
            assert s.category != s.text_category

    def test_single_category_rejected(self, rng):
        data = toy_dataset({"only": 5}, rng=rng)
        with pytest.raises(ValueError, match="categor"):
            make_scenario1(data, 2, rng)

    def test_exhaustive_alignment_audit(self, rng):
        data = toy_dataset({c: 25 for c in "abcde"}, rng=rng)
        out = make_scenario1(data, 100, rng)
        assert len(out) == 100
        by_origin = {s.origin_id: s for s in data}
        for s in out:
            assert s.image_origin != s.text_origin
            src_img = by_origin[s.image_origin]
            src_txt = by_origin[s.text_origin]
            assert src_img.category != src_txt.category
            np.testing.assert_array_equal(np.asarray(s.image), np.asarray(src_img.image))
            np.testing.assert_array_equal(np.asarray(s.text), np.asarray(src_txt.text))

    def test_majority_category_can_make_pairing_infeasible(self, rng):
        data = toy_dataset({"big": 6, "small": 2}, rng=rng)
        with pytest.raises(ValueError, match="cross-category"):
            make_scenario1(data, 8, rng)

    def test_count_beyond_dataset(self, rng):
        data = toy_dataset({"a": 3, "b": 3}, rng=rng)
        with pytest.raises(ValueError):
            make_scenario1(data, 7, rng)

    def test_deterministic_given_seed(self, rng):
        data = toy_dataset({"a": 10, "b": 10, "c": 10}, rng=rng)
        out1 = make_scenario1(data, 12, np.random.default_rng(5))
        out2 = make_scenario1(data, 12, np.random.default_rng(5))
        assert [s.origin_id for s in out1] == [s.origin_id for s in out2]
        assert [s.text_origin for s in out1] == [s.text_origin for s in out2]


class TestScenario2:
    def test_exhaustive_draw_preserves_alignment(self, rng):
        ext = toy_dataset({"x": 5, "y": 5}, rng=rng)
        out = make_scenario2(ext, 10, rng)
        assert len(out) == 10
        by_origin = {s.origin_id: s for s in ext}
        for s in out:
            assert s.scenario == "s2"
            assert s.ood_flag is True
            src = by_origin[s.image_origin]
            assert s.image_origin == s.text_origin
            np.testing.assert_array_equal(np.asarray(s.image), np.asarray(src.image))
            np.testing.assert_array_equal(np.asarray(s.text), np.asarray(src.text))

    def test_count_exceeding_pool(self, rng):
        ext = toy_dataset({"x": 4}, rng=rng)
        with pytest.raises(ValueError):
            make_scenario2(ext, 5, rng)

    def test_empty_corpus(self, rng):
        with pytest.raises(ValueError):
            make_scenario2(PairedDataset([]), 1, rng)


class TestScenario3:
    def test_text_payload_is_byte_identical(self, rng):
        data = toy_dataset({"a": 6, "b": 6}, rng=rng)
        by_origin = {s.origin_id: s for s in data}
        out = make_scenario3(data, 8, 0.5, rng)
        for s in out:
            src = by_origin[s.image_origin]
            assert np.asarray(s.text).tobytes() == np.asarray(src.text).tobytes()
            assert s.scenario == "s3"
            # the image must actually be perturbed
            assert not np.array_equal(np.asarray(s.image), np.asarray(src.image))

    def test_noise_magnitude_matches_configuration(self, rng):
        dim = 64
        samples = [
            PairedSample(
                image=rng.normal(size=dim), text=f"t{i}", category="a",
                ood_flag=False, scenario="id", origin_id=f"o{i}",
            )
            for i in range(60)
        ]
        data = PairedDataset(samples)
        by_origin = {s.origin_id: s for s in data}
        out = make_scenario3(data, 60, 0.7, rng)
        deltas = np.concatenate([
            np.asarray(s.image) - np.asarray(by_origin[s.image_origin].image)
            for s in out
        ])
        assert deltas.size == 60 * dim
        assert abs(float(np.std(deltas)) - 0.7) / 0.7 < 0.05
        assert abs(float(np.mean(deltas))) < 0.05

    def test_nonpositive_noise_rejected(self, rng):
        data = toy_dataset({"a": 3}, rng=rng)
        with pytest.raises(ValueError, match="noise"):
            make_scenario3(data, 2, 0.0, rng)
        with pytest.raises(ValueError, match="noise"):
            make_scenario3(data, 2, -0.1, rng)


class TestBatchAssembly:
    def _pools(self, rng, n_id=200, n_ood=12):
        ids = [id_sample(i, "a" if i % 2 else "b", rng=rng) for i in range(n_id)]
        pools = {}
        for scen in ("s1", "s2", "s3"):
            pools[scen] = [
                PairedSample(
                    image=rng.normal(size=4), text=rng.normal(size=3), category="a",
                    ood_flag=True, scenario=scen, origin_id=f"{scen}:{j}",
                )
                for j in range(n_ood)
            ]
        return ids, pools

    def test_default_quota_at_full_batch_size(self):
        assert ood_batch_quota(128, 0.01, 3) == 4

    def test_zero_fraction_means_no_ood(self):
        assert ood_batch_quota(128, 0.0, 3) == 0

    def test_minimum_one_slot_per_scenario(self):
        assert ood_batch_quota(16, 0.001, 3) == 3

    def test_total_budget_mode_applies_fraction_once(self):
        assert ood_batch_quota(128, 0.01, 3, per_scenario=False) == 3
        assert ood_batch_quota(300, 0.01, 3, per_scenario=False) == 3
        assert ood_batch_quota(600, 0.01, 3, per_scenario=False) == 6

    def test_fraction_range(self):
        with pytest.raises(ValueError):
            ood_batch_quota(128, 0.5, 3)
        with pytest.raises(ValueError):
            ood_batch_quota(128, -0.01, 3)

    def test_batches_have_exact_size_and_partition(self, rng):
        ids, pools = self._pools(rng)
        batches = list(
            assemble_training_batches(ids, pools, 32, 0.01, np.random.default_rng(0))
        )
        assert batches
        for b in batches:
            assert b.n == 32
            assert len(b.id_indices) + len(b.ood_indices) == 32
            assert len(b.ood_indices) == 3  # max(3, round(32*0.01*3)) = 3
            for i in b.ood_indices:
                assert b.samples[i].scenario in ("s1", "s2", "s3")

    def test_extra_slots_rotate_across_scenarios(self, rng):
        # Quota 4 over 3 scenarios: one slot each plus one extra that must
        # not always land on the same scenario.
        ids, pools = self._pools(rng, n_id=1400)
        batches = list(
            assemble_training_batches(ids, pools, 128, 0.01, np.random.default_rng(1))
        )
        assert len(batches) >= 9
        extras = []
        for b in batches:
            counts = b.scenario_counts()
            assert sum(counts.values()) == 4
            assert set(counts) == {"s1", "s2", "s3"}
            assert min(counts.values()) == 1 and max(counts.values()) == 2
            extras.append(max(counts, key=counts.get))
        assert len(set(extras)) == 3

    def test_zero_fraction_batches_are_pure_id(self, rng):
        ids, pools = self._pools(rng)
        batches = list(
            assemble_training_batches(ids, pools, 16, 0.0, np.random.default_rng(2))
        )
        for b in batches:
            assert b.ood_indices == ()
            assert all(not s.ood_flag for s in b.samples)

    def test_replay_with_same_seed_is_identical(self, rng):
        ids, pools = self._pools(rng)

        def run(seed):
            return [
                [s.origin_id for s in b.samples]
                for b in assemble_training_batches(
                    ids, pools, 32, 0.01, np.random.default_rng(seed)
                )
            ]

        assert run(9) == run(9)
        assert run(9) != run(10)

    def test_each_id_sample_used_at_most_once_per_epoch(self, rng):
        ids, pools = self._pools(rng, n_id=100)
        batches = list(
            assemble_training_batches(ids, pools, 20, 0.01, np.random.default_rng(3))
        )
        seen = []
        for b in batches:
            seen.extend(b.samples[i].origin_id for i in b.id_indices)
        assert len(seen) == len(set(seen))

    def test_pool_too_small(self, rng):
        ids, pools = self._pools(rng, n_id=5)
        with pytest.raises(ValueError, match="pool"):
            list(assemble_training_batches(ids, pools, 32, 0.01, np.random.default_rng(0)))
        ids, pools = self._pools(rng)
        pools["s2"] = []
        with pytest.raises(ValueError, match="pool"):
            list(assemble_training_batches(ids, pools, 32, 0.01, np.random.default_rng(0)))


class TestTestSplit:
    def _group(self, rng, scen, n):
        flag = scen != "id"
        return [
            PairedSample(
                image=rng.normal(size=4), text=rng.normal(size=3), category="a",
                ood_flag=flag, scenario=scen, origin_id=f"{scen}:{j}",
            )
            for j in range(n)
        ]

    def test_equal_pools_concatenate(self, rng):
        split = make_test_split(
            self._group(rng, "id", 100), self._group(rng, "s1", 100),
            self._group(rng, "s2", 100), self._group(rng, "s3", 100),
        )
        assert len(split) == 400

    def test_truncates_to_smallest_pool(self, rng):
        split = make_test_split(
            self._group(rng, "id", 100), self._group(rng, "s1", 50),
            self._group(rng, "s2", 100), self._group(rng, "s3", 100),
        )
        assert len(split) == 200
        counts = {}
        for s in split:
            counts[s.scenario] = counts.get(s.scenario, 0) + 1
        assert counts == {"id": 50, "s1": 50, "s2": 50, "s3": 50}
        assert split.manifest["composition"] == counts

    def test_empty_pool_rejected(self, rng):
        with pytest.raises(ValueError):
            make_test_split(
                self._group(rng, "id", 10), [], self._group(rng, "s2", 10),
                self._group(rng, "s3", 10),
            )


class TestSyntheticCorpus:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticCorpusSpec(n_categories=1)
        with pytest.raises(ValueError):
            SyntheticCorpusSpec(latent_dim=10, image_dim=8)
        with pytest.raises(ValueError):
            SyntheticCorpusSpec(domain_shift=-1.0)

    def test_shapes_and_counts(self):
        spec = micro_corpus_spec()
        corpus = generate_synthetic_corpus(spec, seed=0)
        assert len(corpus.id_train) == 3 * 80
        assert len(corpus.id_test) == 3 * 10
        assert len(corpus.external) == 3 * 20
        sample = corpus.id_train[0]
        assert np.asarray(sample.image).shape == (10,)
        assert np.asarray(sample.text).shape == (8,)
        assert corpus.image_map.shape == (10, 4)
        assert corpus.text_map.shape == (8, 4)

    def test_mixing_maps_have_orthonormal_columns(self):
        corpus = generate_synthetic_corpus(micro_corpus_spec(), seed=1)
        for m in (corpus.image_map, corpus.text_map):
            gram = m.T @ m
            np.testing.assert_allclose(gram, np.eye(m.shape[1]), atol=1e-10)

    def test_same_seed_bit_identical(self):
        spec = micro_corpus_spec()
        c1 = generate_synthetic_corpus(spec, seed=7)
        c2 = generate_synthetic_corpus(spec, seed=7)
        for a, b in zip(c1.id_train, c2.id_train):
            assert np.asarray(a.image).tobytes() == np.asarray(b.image).tobytes()
            assert np.asarray(a.text).tobytes() == np.asarray(b.text).tobytes()
            assert a.origin_id == b.origin_id
        c3 = generate_synthetic_corpus(spec, seed=8)
        assert np.asarray(c1.id_train[0].image).tobytes() != np.asarray(
            c3.id_train[0].image
        ).tobytes()

    def test_aligned_pairs_beat_shuffled_pairs(self):
        from wood.model import FrozenLinearBackend
        from oracles import cosine_ref

        spec = micro_corpus_spec(train_per_category=170)
        corpus = generate_synthetic_corpus(spec, seed=2)
        backend = FrozenLinearBackend.aligned(
            corpus.image_map, corpus.text_map, embedding_dim=6, seed=0
        )
        samples = list(corpus.id_train)[:500]
        ie = backend.encode_images([s.image for s in samples]).numpy()
        te = backend.encode_texts([s.text for s in samples]).numpy()
        n = len(samples)
        aligned = np.mean([cosine_ref(ie[i], te[i]) for i in range(n)])
        shuffled = np.mean([cosine_ref(ie[i], te[(i + 11) % n]) for i in range(n)])
        assert aligned > shuffled + 0.1

    def test_external_mean_displacement_matches_shift(self):
        spec = micro_corpus_spec(
            train_per_category=300, external_per_category=300, domain_shift=3.0
        )
        corpus = generate_synthetic_corpus(spec, seed=3)
        id_imgs = np.stack([np.asarray(s.image) for s in corpus.id_train])
        ext_imgs = np.stack([np.asarray(s.image) for s in corpus.external])
        displacement = float(
            np.linalg.norm(ext_imgs.mean(axis=0) - id_imgs.mean(axis=0))
        )
        assert abs(displacement - 3.0) / 3.0 < 0.05

    def test_external_pairs_stay_aligned(self):
        # The domain shift moves both modalities jointly, so external pairs
        # keep the within-pair correlation of ID pairs.
        from wood.model import FrozenLinearBackend
        from oracles import cosine_ref

        corpus = generate_synthetic_corpus(micro_corpus_spec(), seed=4)
        backend = FrozenLinearBackend.aligned(
            corpus.image_map, corpus.text_map, embedding_dim=6, seed=0
        )
        id_samples = list(corpus.id_train)[:60]
        ext_samples = list(corpus.external)[:60]
        mean_cos_id = np.mean([
            cosine_ref(
                backend.encode_image(s.image).numpy(),
                backend.encode_text(s.text).numpy(),
            )
            for s in id_samples
        ])
        mean_cos_ext = np.mean([
            cosine_ref(
                backend.encode_image(s.image).numpy(),
                backend.encode_text(s.text).numpy(),
            )
            for s in ext_samples
        ])
        assert abs(mean_cos_id - mean_cos_ext) < 0.2


class TestManifestIO:
    def test_round_trip_with_array_payloads(self, rng, tmp_path):
        corpus = generate_synthetic_corpus(micro_corpus_spec(), seed=5)
        subset = PairedDataset(list(corpus.id_train)[:12])
        path = save_dataset(subset, tmp_path, "chunk")
        assert path.name == "chunk.tsv"
        assert (tmp_path / "chunk.npz").exists()
        loaded = load_manifest(path)
        assert len(loaded) == 12
        for a, b in zip(subset, loaded):
            np.testing.assert_array_equal(np.asarray(a.image), np.asarray(b.image))
            np.testing.assert_array_equal(np.asarray(a.text), np.asarray(b.text))
            assert a.category == b.category
            assert a.scenario == b.scenario
            assert a.origin_id == b.origin_id

    def test_three_column_manifest(self, tmp_path):
        path = tmp_path / "tiny.tsv"
        path.write_text(
            "img/cat1.png\ta photo of a cat\tcat\n"
            "img/dog1.png\ta photo of a dog\tdog\n",
            encoding="utf-8",
        )
        loaded = load_manifest(path)
        assert len(loaded) == 2
        assert loaded[0].image == "img/cat1.png"
        assert loaded[0].text == "a photo of a cat"
        assert loaded[0].category == "cat"
        assert loaded[0].scenario == "id"
        assert not loaded[0].ood_flag

    def test_wrong_column_count_reports_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a\tb\n", encoding="utf-8")
        with pytest.raises(ValueError, match="bad.tsv:1"):
            load_manifest(path)

    def test_string_payloads_with_tabs_rejected(self, tmp_path, rng):
        sample = PairedSample(
            image="img.png", text="has\ttab", category="c",
            ood_flag=False, scenario="id", origin_id="o",
        )
        with pytest.raises(ValueError, match="tab"):
            save_dataset(PairedDataset([sample]), tmp_path, "bad")
