"""Data preparation, the training loop, persistence, evaluation and sweeps."""

import json

import numpy as np
import pytest
import torch

from conftest import micro_config
from oracles import confusion_ref

from wood import harness
from wood.detect import ThresholdCalibration
from wood.harness import (
    CheckpointError,
    TrainingDiverged,
    ablation_sweep,
    calibrate_model,
    evaluate,
    export_evaluation,
    format_sweep_table,
    load_checkpoint,
    prepare_data,
    read_train_log,
    save_checkpoint,
    score_dataset,
    train,
    write_sweep,
    write_train_log,
)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One micro training run shared by the read-only tests below."""
    out = tmp_path_factory.mktemp("trained_run")
    cfg = micro_config(out)
    return cfg, train(cfg)


class TestPrepareData:
    def test_pool_sizes_and_dims(self, tmp_path):
        cfg = micro_config(tmp_path)
        bundle = prepare_data(cfg)
        n_train = 3 * 80
        n_calib = round(0.1 * n_train)
        assert len(bundle.calibration_pool) == n_calib
        assert len(bundle.id_train_pool) == n_train - n_calib
        assert set(bundle.ood_train_pools) == {"s1", "s2", "s3"}
        for pool in bundle.ood_train_pools.values():
            assert len(pool) == cfg.ood_train_pool_size
        assert bundle.image_dim == 10
        assert bundle.text_dim == 8

    def test_test_split_is_balanced(self, tmp_path):
        bundle = prepare_data(micro_config(tmp_path))
        counts = {}
        for s in bundle.test_split:
            counts[s.scenario] = counts.get(s.scenario, 0) + 1
        assert len(set(counts.values())) == 1
        assert set(counts) == {"id", "s1", "s2", "s3"}

    def test_calibration_pool_is_held_out_of_training(self, tmp_path):
        bundle = prepare_data(micro_config(tmp_path))
        train_ids = {s.origin_id for s in bundle.id_train_pool}
        calib_ids = {s.origin_id for s in bundle.calibration_pool}
        assert not (train_ids & calib_ids)
        assert all(not s.ood_flag for s in bundle.calibration_pool)

    def test_external_training_pool_disjoint_from_test(self, tmp_path):
        bundle = prepare_data(micro_config(tmp_path))
        pool_origins = {s.image_origin for s in bundle.ood_train_pools["s2"]}
        test_origins = {
            s.image_origin for s in bundle.test_split if s.scenario == "s2"
        }
        assert not (pool_origins & test_origins)

    def test_same_config_same_bundle(self, tmp_path):
        cfg = micro_config(tmp_path)
        b1 = prepare_data(cfg)
        b2 = prepare_data(cfg)
        assert [s.origin_id for s in b1.id_train_pool] == [
            s.origin_id for s in b2.id_train_pool
        ]
        assert [s.origin_id for s in b1.test_split] == [
            s.origin_id for s in b2.test_split
        ]


class TestTrain:
    def test_log_structure_and_accounting(self, trained):
        cfg, result = trained
        assert result.log, "training produced no steps"
        steps_per_epoch = len(result.log) // cfg.epochs
        assert len(result.log) == steps_per_epoch * cfg.epochs
        for rec in result.log:
            for key in ("epoch", "step", "lr", "k_ood", "l_id", "l_ood",
                        "l_cl", "l_bce", "l_gate_l1", "l_bc", "total",
                        "margin", "lam", "n"):
                assert key in rec
            assert rec["n"] == cfg.batch_size
            assert rec["k_ood"] == 3
            assert abs(rec["total"] - (rec["l_cl"] + cfg.lam * rec["l_bc"])) < 1e-9
            assert abs(rec["l_cl"] - (rec["l_id"] + rec["l_ood"]) / rec["n"]) < 1e-9

    def test_learning_rate_steps_down(self, trained):
        cfg, result = trained
        lrs = {rec["epoch"]: rec["lr"] for rec in result.log}
        assert lrs[0] == pytest.approx(cfg.learning_rate)
        assert lrs[1] == pytest.approx(cfg.learning_rate * cfg.lr_decay)
        all_lrs = [rec["lr"] for rec in result.log]
        assert all(a >= b for a, b in zip(all_lrs, all_lrs[1:]))

    def test_artifacts_written(self, trained):
        _, result = trained
        assert result.checkpoint_path.exists()
        assert result.log_path.exists()
        assert (result.out_dir / "config.json").exists()
        from_disk = read_train_log(result.log_path)
        assert from_disk == [json.loads(json.dumps(r)) for r in result.log]

    def test_parameters_finite_after_training(self, trained):
        _, result = trained
        for p in result.model.parameters():
            assert bool(torch.isfinite(p).all())

    def test_loss_decreases_on_the_micro_corpus(self, trained):
        cfg, result = trained
        first_epoch = [r["total"] for r in result.log if r["epoch"] == 0]
        last_epoch = [r["total"] for r in result.log if r["epoch"] == cfg.epochs - 1]
        assert np.mean(last_epoch) < np.mean(first_epoch)

    def test_replay_is_bit_identical(self, tmp_path):
        cfg1 = micro_config(tmp_path / "a", epochs=1)
        cfg2 = micro_config(tmp_path / "b", epochs=1)
        log1 = train(cfg1).log
        log2 = train(cfg2).log
        assert json.dumps(log1, sort_keys=True) == json.dumps(log2, sort_keys=True)

    def test_divergence_reports_the_offending_step(self, tmp_path, monkeypatch):
        cfg = micro_config(tmp_path, epochs=1)
        real = harness.batch_loss
        calls = {"n": 0}

        # LossBreakdown validates its own identities, so fake a non-finite
        # total with a stand-in object on the third batch.
        def stub(*args, **kwargs):
            calls["n"] += 1
            total, down = real(*args, **kwargs)
            if calls["n"] == 3:
                class Bad:
                    total = float("nan")

                    def as_dict(self_inner):
                        return {"total": float("nan")}

                return total, Bad()
            return total, down

        monkeypatch.setattr(harness, "batch_loss", stub)
        with pytest.raises(TrainingDiverged) as exc_info:
            train(cfg)
        assert exc_info.value.step == 2  # steps are counted from zero
        assert exc_info.value.epoch == 0

    def test_zero_lambda_still_logs_classifier_loss(self, tmp_path):
        cfg = micro_config(tmp_path, lam=0.0, epochs=1)
        result = train(cfg)
        rec = result.log[-1]
        assert rec["l_bc"] > 0.0
        assert rec["total"] == pytest.approx(rec["l_cl"], abs=1e-12)


class TestScoreAndEvaluate:
    def test_score_dataset_shapes_and_identity(self, trained):
        _, result = trained
        scores, origins = score_dataset(result.model, result.bundle.test_split)
        n = len(result.bundle.test_split)
        assert len(origins) == n
        assert scores.p_bc.shape == (n,)
        np.testing.assert_allclose(
            scores.p_ood, 1.0 - scores.p_bc * scores.p_cl, atol=1e-15
        )
        scores2, _ = score_dataset(result.model, result.bundle.test_split, chunk_size=7)
        np.testing.assert_array_equal(scores.p_bc, scores2.p_bc)

    def test_score_dataset_restores_training_mode(self, trained):
        _, result = trained
        result.model.train()
        score_dataset(result.model, result.bundle.test_split)
        assert result.model.training
        result.model.eval()

    def test_calibrate_model_rejects_ood_in_pool(self, trained):
        _, result = trained
        with pytest.raises(ValueError, match="ID"):
            calibrate_model(result.model, list(result.bundle.test_split)[:40])

    def test_calibrate_model_returns_valid_threshold(self, trained):
        _, result = trained
        calib = calibrate_model(result.model, result.bundle.calibration_pool)
        assert isinstance(calib, ThresholdCalibration)
        assert 0.0 < calib.delta < 1.0
        assert calib.calibration_size == len(result.bundle.calibration_pool)

    def test_evaluate_with_fixed_delta(self, trained):
        _, result = trained
        ev = evaluate(result.model, result.bundle.test_split, delta=0.5)
        assert ev.delta == 0.5
        assert ev.calibration is None
        assert set(ev.report.groups) == {
            "scenario1+id", "scenario2+id", "scenario3+id", "overall",
        }

    def test_evaluate_with_calibration_pool(self, trained):
        _, result = trained
        ev = evaluate(
            result.model, result.bundle.test_split,
            calibration_pool=result.bundle.calibration_pool,
        )
        assert ev.calibration is not None
        assert ev.delta == ev.calibration.delta

    def test_evaluate_needs_a_threshold_source(self, trained):
        _, result = trained
        with pytest.raises(ValueError):
            evaluate(result.model, result.bundle.test_split)

    def test_evaluate_does_not_mutate_the_model(self, trained):
        _, result = trained
        before = [p.detach().clone() for p in result.model.parameters()]
        evaluate(result.model, result.bundle.test_split, delta=0.5)
        for p, b in zip(result.model.parameters(), before):
            assert torch.equal(p, b)


class TestExport:
    def test_files_and_recount(self, trained, tmp_path):
        _, result = trained
        ev = evaluate(
            result.model, result.bundle.test_split,
            calibration_pool=result.bundle.calibration_pool,
        )
        paths = export_evaluation(ev, tmp_path / "eval")
        for key in ("report_json", "report_txt", "scores_tsv", "histograms_tsv",
                    "calibration_json"):
            assert key in paths and paths[key].exists()

        # Recount the overall confusion table from the raw per-sample rows.
        rows = paths["scores_tsv"].read_text().strip().split("\n")
        assert len(rows) == len(result.bundle.test_split)
        decisions, truths = [], []
        for row in rows:
            cols = row.split("\t")
            assert len(cols) == 7
            truths.append(cols[2] == "1")
            decisions.append(cols[6] == "1")
        want = confusion_ref(decisions, truths)
        got = json.loads(paths["report_json"].read_text())["groups"]["overall"]
        assert (got["tp"], got["fp"], got["tn"], got["fn"]) == (
            want["tp"], want["fp"], want["tn"], want["fn"],
        )

    def test_histogram_file_carries_threshold_marker(self, trained, tmp_path):
        _, result = trained
        ev = evaluate(result.model, result.bundle.test_split, delta=0.42)
        paths = export_evaluation(ev, tmp_path / "eval2")
        lines = paths["histograms_tsv"].read_text().strip().split("\n")
        markers = [l for l in lines if l.startswith("__threshold__")]
        assert len(markers) == 1
        cols = markers[0].split("\t")
        assert cols[1] == "combined"
        assert float(cols[2]) == pytest.approx(0.42)


class TestCheckpoints:
    def _probe(self, model, bundle):
        samples = list(bundle.test_split)[:8]
        with torch.no_grad():
            out = model(
                [s.image for s in samples], [s.text for s in samples],
                list(range(8)), [],
            )
        return out

    def test_round_trip_probe_outputs_bit_identical(self, trained, tmp_path):
        cfg, result = trained
        path = tmp_path / "model.npz"
        save_checkpoint(
            result.model, path, config=cfg, epoch=cfg.epochs,
            loss_history=[r["total"] for r in result.log],
            image_dim=result.bundle.image_dim, text_dim=result.bundle.text_dim,
        )
        ckpt = load_checkpoint(path)
        assert ckpt.epoch == cfg.epochs
        assert ckpt.config == cfg
        assert len(ckpt.loss_history) == len(result.log)
        a = self._probe(result.model, result.bundle)
        b = self._probe(ckpt.model, result.bundle)
        assert torch.equal(a.p_bc, b.p_bc)
        assert torch.equal(a.p_cl, b.p_cl)
        assert torch.equal(a.similarity.entries, b.similarity.entries)

    def test_saved_checkpoint_from_train_loads(self, trained):
        cfg, result = trained
        ckpt = load_checkpoint(result.checkpoint_path)
        a = self._probe(result.model, result.bundle)
        b = self._probe(ckpt.model, result.bundle)
        assert torch.equal(a.p_bc, b.p_bc)

    def test_version_tag_mismatch_rejected(self, trained, tmp_path):
        _, result = trained
        data = dict(np.load(result.checkpoint_path, allow_pickle=False))
        data["meta/format"] = np.array("wood-checkpoint-v999")
        bad = tmp_path / "bad_version.npz"
        np.savez(bad, **data)
        with pytest.raises(CheckpointError, match="format"):
            load_checkpoint(bad)

    def test_truncated_file_rejected(self, trained, tmp_path):
        _, result = trained
        raw = result.checkpoint_path.read_bytes()
        bad = tmp_path / "truncated.npz"
        bad.write_bytes(raw[: len(raw) // 3])
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.npz")

    def test_different_seeds_give_different_probe_outputs(self, tmp_path):
        r1 = train(micro_config(tmp_path / "s0", seed=0, epochs=1))
        r2 = train(micro_config(tmp_path / "s1", seed=1, epochs=1))
        a = self._probe(r1.model, r1.bundle)
        b = self._probe(r2.model, r1.bundle)
        assert not torch.equal(a.p_bc, b.p_bc)


class TestSweep:
    def test_lambda_sweep_points_and_files(self, tmp_path):
        cfg = micro_config(tmp_path, epochs=1)
        result = ablation_sweep(cfg, "lam", [0.0, 0.5])
        assert result.param == "lam"
        assert [p.value for p in result.points] == [0.0, 0.5]
        for p in result.points:
            assert "overall" in p.report.groups
        paths = write_sweep(result, tmp_path / "sweep_out")
        assert paths["tsv"].exists() and paths["txt"].exists()
        table = format_sweep_table(result)
        assert "0.5" in table

    def test_subdirectories_per_value(self, tmp_path):
        cfg = micro_config(tmp_path / "runs", epochs=1)
        ablation_sweep(cfg, "margin", [0.0, 0.2])
        assert (tmp_path / "runs" / "margin_0").exists()
        assert (tmp_path / "runs" / "margin_0.2").exists()

    def test_invalid_parameter_and_ranges(self, tmp_path):
        cfg = micro_config(tmp_path, epochs=1)
        with pytest.raises(ValueError):
            ablation_sweep(cfg, "temperature", [0.5])
        with pytest.raises(ValueError):
            ablation_sweep(cfg, "lam", [1.5])
        with pytest.raises(ValueError):
            ablation_sweep(cfg, "margin", [-0.1])
        with pytest.raises(ValueError):
            ablation_sweep(cfg, "lam", [])


def test_train_log_round_trip(tmp_path):
    records = [{"step": 0, "total": 1.5}, {"step": 1, "total": 0.7}]
    path = write_train_log(records, tmp_path / "log.jsonl")
    assert read_train_log(path) == records
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 2
    json.loads(lines[0])
