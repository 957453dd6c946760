"""End-to-end experiment harness: data prep, training, evaluation, sweeps.

A run is fully determined by its ``ExperimentConfig``: the corpus, the
scenario pools, batch order, parameter init and every artifact derive from
``config.seed`` through named sub-streams, so re-running a config reproduces
logs and reports bit for bit. Artifacts land in the config's output
directory (or ``$WOOD_OUTPUT_DIR`` when set): ``config.json``,
``train_log.jsonl``, ``checkpoint.npz``, and after evaluation
``report.json``, ``report.txt``, ``scores.tsv``, ``histograms.tsv`` and
``calibration.json``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .config import ExperimentConfig, resolve_output_dir
from .detect import (
    DetectionScores,
    MetricsReport,
    ThresholdCalibration,
    build_metrics_report,
    calibrate_threshold,
    decide,
    score_histograms,
    write_histograms,
)
from .losses import batch_loss
from .model import (
    FrozenLinearBackend,
    TrainableLinearBackend,
    WoodModel,
    build_backend,
)
from .scenarios import (
    PairedDataset,
    PairedSample,
    SyntheticCorpus,
    assemble_training_batches,
    generate_synthetic_corpus,
    load_manifest,
    make_scenario1,
    make_scenario2,
    make_scenario3,
    make_test_split,
)

__all__ = [
    "TrainingDiverged",
    "CheckpointError",
    "DataBundle",
    "TrainResult",
    "EvalResult",
    "SweepResult",
    "prepare_data",
    "build_model",
    "train",
    "score_dataset",
    "calibrate_model",
    "evaluate",
    "export_evaluation",
    "ablation_sweep",
    "format_sweep_table",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "write_train_log",
    "read_train_log",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "wood-checkpoint-v1"


class TrainingDiverged(RuntimeError):
    """A loss or parameter went non-finite during optimization."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step


class CheckpointError(RuntimeError):
    """Unreadable, corrupt or incompatible checkpoint file."""


def _seed_words(seed: int, count: int = 8) -> np.ndarray:
    return np.random.SeedSequence(int(seed)).generate_state(count)


@dataclass
class DataBundle:
    """Prepared pools for one run: training, calibration and test data."""

    corpus: SyntheticCorpus | None
    id_train_pool: list
    calibration_pool: list
    ood_train_pools: dict
    test_split: PairedDataset
    image_dim: int
    text_dim: int
    alignment_maps: tuple | None


def _payload_dim(payload) -> int:
    if isinstance(payload, str):
        return 0
    return int(np.asarray(payload).shape[-1])


def prepare_data(config: ExperimentConfig) -> DataBundle:
    """Materialize pools and the balanced test split for ``config``.

    Splits the ID training data into a training pool and a calibration
    holdout, builds one labeled pool per scenario from the training side,
    and assembles the test split from the ID test data plus freshly
    generated test-side scenarios. The external corpus is partitioned so
    its training and test contributions never share a sample.
    """
    words = _seed_words(config.seed)
    split_rng = np.random.default_rng(int(words[0]))
    scenario_train_rng = np.random.default_rng(int(words[1]))
    scenario_test_rng = np.random.default_rng(int(words[2]))

    if config.corpus is not None:
        corpus = generate_synthetic_corpus(config.corpus, config.seed)
        id_train, id_test, external = corpus.id_train, corpus.id_test, corpus.external
        maps = (corpus.image_map, corpus.text_map)
    else:
        base = Path(config.data_dir)
        corpus = None
        id_train = load_manifest(base / "id_train.tsv")
        id_test = load_manifest(base / "id_test.tsv")
        external = load_manifest(base / "external.tsv")
        maps = None

    n_train = len(id_train)
    n_calib = max(1, int(round(config.calibration_fraction * n_train)))
    calib_idx = set(
        int(i) for i in split_rng.choice(n_train, size=n_calib, replace=False)
    )
    calibration_pool = [id_train[i] for i in sorted(calib_idx)]
    train_pool = [id_train[i] for i in range(n_train) if i not in calib_idx]
    train_ds = PairedDataset(train_pool)

    pool_size = config.ood_train_pool_size
    if len(external) <= pool_size:
        raise ValueError(
            f"external corpus of {len(external)} cannot cover a training pool "
            f"of {pool_size} and still leave test samples"
        )
    ext_order = scenario_train_rng.permutation(len(external))
    ext_train = PairedDataset([external[int(i)] for i in ext_order[:pool_size]])
    ext_test = PairedDataset([external[int(i)] for i in ext_order[pool_size:]])

    ood_train_pools = {
        "s1": make_scenario1(train_ds, pool_size, scenario_train_rng),
        "s2": make_scenario2(ext_train, pool_size, scenario_train_rng),
        "s3": make_scenario3(train_ds, pool_size, config.noise_std, scenario_train_rng),
    }

    n_test = min(len(id_test), len(ext_test))
    test_split = make_test_split(
        list(id_test),
        make_scenario1(id_test, n_test, scenario_test_rng),
        make_scenario2(ext_test, n_test, scenario_test_rng),
        make_scenario3(id_test, n_test, config.noise_std, scenario_test_rng),
    )

    probe = id_train[0]
    return DataBundle(
        corpus=corpus,
        id_train_pool=train_pool,
        calibration_pool=calibration_pool,
        ood_train_pools=ood_train_pools,
        test_split=test_split,
        image_dim=_payload_dim(probe.image),
        text_dim=_payload_dim(probe.text),
        alignment_maps=maps,
    )


def build_model(
    config: ExperimentConfig,
    image_dim: int,
    text_dim: int,
    alignment_maps: tuple | None = None,
) -> WoodModel:
    """Construct the model for a config; init is seeded from config.seed."""
    words = _seed_words(config.seed)
    backend = build_backend(
        config.backend,
        image_dim=image_dim,
        text_dim=text_dim,
        embedding_dim=config.embedding_dim,
        seed=int(words[4]),
        alignment_maps=alignment_maps,
    )
    return WoodModel(
        backend,
        margin=config.margin,
        lam=config.lam,
        classifier_hidden=config.classifier_hidden,
        gate_l1_weight=config.gate_l1_weight,
        seed=int(words[5]),
    )


@dataclass
class TrainResult:
    model: WoodModel
    log: list
    bundle: DataBundle
    out_dir: Path
    checkpoint_path: Path
    log_path: Path


def write_train_log(records: Sequence[Mapping], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(dict(r), sort_keys=True) for r in records]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def read_train_log(path) -> list:
    return [
        json.loads(line)
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


def train(config: ExperimentConfig) -> TrainResult:
    """Run the full optimization described by ``config`` and persist it.

    Adam over all trainable parameters, stepped learning-rate decay every
    ``config.step_epochs`` epochs, one shuffled pass over the ID pool per
    epoch with the per-batch OOD quota mixed in. Every step is logged with
    the complete loss breakdown. Divergence (a non-finite loss or parameter)
    aborts with ``TrainingDiverged`` rather than writing a checkpoint.
    """
    bundle = prepare_data(config)
    model = build_model(config, bundle.image_dim, bundle.text_dim, bundle.alignment_maps)
    words = _seed_words(config.seed)
    batch_rng = np.random.default_rng(int(words[3]))

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=config.step_epochs, gamma=config.lr_decay
    )

    log: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        batches = assemble_training_batches(
            bundle.id_train_pool,
            bundle.ood_train_pools,
            config.batch_size,
            config.ood_fraction,
            batch_rng,
            per_scenario=config.per_scenario_ood_budget,
        )
        for batch in batches:
            optimizer.zero_grad()
            fp = model(batch.images(), batch.texts(), batch.id_indices, batch.ood_indices)
            total, breakdown = batch_loss(
                fp.similarity,
                fp.p_bc,
                torch.as_tensor(batch.labels(), dtype=torch.float64),
                fp.gate_img,
                fp.gate_txt,
                margin=config.margin,
                lam=config.lam,
                gate_weight=config.gate_l1_weight,
            )
            if not math.isfinite(breakdown.total):
                raise TrainingDiverged("non-finite loss", epoch, step)
            total.backward()
            optimizer.step()
            with torch.no_grad():
                for p in params:
                    if not bool(torch.isfinite(p).all()):
                        raise TrainingDiverged("non-finite parameter", epoch, step)
            record = {
                "epoch": epoch,
                "step": step,
                "lr": float(optimizer.param_groups[0]["lr"]),
                "k_ood": len(batch.ood_indices),
                **breakdown.as_dict(),
            }
            log.append(record)
            step += 1
        scheduler.step()

    out_dir = resolve_output_dir(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.json")
    log_path = write_train_log(log, out_dir / "train_log.jsonl")
    checkpoint_path = save_checkpoint(
        model,
        out_dir / "checkpoint.npz",
        config=config,
        epoch=config.epochs,
        loss_history=[r["total"] for r in log],
        image_dim=bundle.image_dim,
        text_dim=bundle.text_dim,
    )
    return TrainResult(
        model=model,
        log=log,
        bundle=bundle,
        out_dir=out_dir,
        checkpoint_path=checkpoint_path,
        log_path=log_path,
    )


def score_dataset(
    model: WoodModel,
    samples: Sequence[PairedSample],
    chunk_size: int = 256,
) -> tuple[DetectionScores, list[str]]:
    """Score samples in chunks; returns scores plus aligned origin ids.

    Per-sample scores do not depend on chunk composition: p_cl uses only the
    pair's own diagonal similarity and p_bc is a per-row map.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("nothing to score")
    was_training = model.training
    model.eval()
    p_bc_parts, p_cl_parts = [], []
    try:
        with torch.no_grad():
            for lo in range(0, len(samples), chunk_size):
                part = samples[lo : lo + chunk_size]
                ids = tuple(i for i, s in enumerate(part) if not s.ood_flag)
                oods = tuple(i for i, s in enumerate(part) if s.ood_flag)
                fp = model([s.image for s in part], [s.text for s in part], ids, oods)
                p_bc_parts.append(fp.p_bc.numpy())
                p_cl_parts.append(fp.p_cl.numpy())
    finally:
        model.train(was_training)
    scores = DetectionScores.from_components(
        np.concatenate(p_bc_parts),
        np.concatenate(p_cl_parts),
        np.array([s.ood_flag for s in samples], dtype=bool),
        tuple(s.scenario for s in samples),
    )
    return scores, [s.origin_id for s in samples]


def calibrate_model(
    model: WoodModel,
    calibration_pool: Sequence[PairedSample],
    target: float = 0.95,
) -> ThresholdCalibration:
    """Calibrate delta on held-out ID pairs via their combined scores."""
    for s in calibration_pool:
        if s.ood_flag:
            raise ValueError("calibration pool must contain only ID samples")
    scores, _ = score_dataset(model, calibration_pool)
    return calibrate_threshold(scores.combined(), target)


@dataclass
class EvalResult:
    report: MetricsReport
    scores: DetectionScores
    origin_ids: list
    delta: float
    calibration: ThresholdCalibration | None


def evaluate(
    model: WoodModel,
    test_split: Sequence[PairedSample],
    delta: float | None = None,
    calibration_pool: Sequence[PairedSample] | None = None,
    target: float = 0.95,
) -> EvalResult:
    """Score the test split and report metrics per group.

    Either pass ``delta`` directly or a calibration pool to derive it from.
    The model is left exactly as it was: evaluation only reads parameters.
    """
    calibration = None
    if delta is None:
        if calibration_pool is None:
            raise ValueError("pass either delta or a calibration pool")
        calibration = calibrate_model(model, calibration_pool, target)
        delta = calibration.delta
    scores, origin_ids = score_dataset(model, test_split)
    report = build_metrics_report(scores, delta)
    return EvalResult(
        report=report,
        scores=scores,
        origin_ids=origin_ids,
        delta=float(delta),
        calibration=calibration,
    )


def export_evaluation(result: EvalResult, out_dir, bins: int = 20) -> dict:
    """Write report.json/report.txt, scores.tsv, histograms.tsv, calibration.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    report_json = out_dir / "report.json"
    report_json.write_text(result.report.to_json() + "\n", encoding="utf-8")
    paths["report_json"] = report_json

    report_txt = out_dir / "report.txt"
    report_txt.write_text(result.report.format_table() + "\n", encoding="utf-8")
    paths["report_txt"] = report_txt

    scores_tsv = out_dir / "scores.tsv"
    decisions = decide(result.scores.p_ood, result.delta)
    lines = []
    for i, origin in enumerate(result.origin_ids):
        lines.append(
            "\t".join(
                [
                    origin,
                    result.scores.scenarios[i],
                    "1" if result.scores.ood_flags[i] else "0",
                    f"{result.scores.p_bc[i]:.12g}",
                    f"{result.scores.p_cl[i]:.12g}",
                    f"{result.scores.p_ood[i]:.12g}",
                    "1" if decisions[i] else "0",
                ]
            )
        )
    scores_tsv.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths["scores_tsv"] = scores_tsv

    rows = score_histograms(result.scores, bins=bins, thresholds={"combined": result.delta})
    paths["histograms_tsv"] = write_histograms(rows, out_dir / "histograms.tsv")

    if result.calibration is not None:
        calib_json = out_dir / "calibration.json"
        calib_json.write_text(
            json.dumps(result.calibration.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        paths["calibration_json"] = calib_json
    return paths


@dataclass
class SweepPoint:
    value: float
    report: MetricsReport


@dataclass
class SweepResult:
    param: str
    points: list = field(default_factory=list)


_SWEEP_PARAMS = {"lam": (0.0, 1.0), "margin": (0.0, 2.0)}


def ablation_sweep(
    config: ExperimentConfig,
    param: str,
    values: Sequence[float],
) -> SweepResult:
    """Retrain and evaluate across a one-parameter grid.

    Every grid point reuses ``config.seed``, so all rows see identical data
    splits, scenario pools and batch order; only the swept parameter moves.
    Each point's artifacts land in a subdirectory of the run's output dir.

    Raises:
        ValueError: unknown parameter, empty grid, or out-of-range values.
    """
    if param not in _SWEEP_PARAMS:
        raise ValueError(f"param must be one of {sorted(_SWEEP_PARAMS)}, got {param!r}")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("empty sweep grid")
    lo, hi = _SWEEP_PARAMS[param]
    for v in values:
        if not (lo <= v <= hi):
            raise ValueError(f"{param} value {v} outside [{lo}, {hi}]")

    base_out = resolve_output_dir(config)
    result = SweepResult(param=param)
    for v in values:
        sub = config.replace(
            **{param: v}, output_dir=str(base_out / f"{param}_{v:g}")
        )
        trained = train(sub)
        ev = evaluate(
            trained.model,
            trained.bundle.test_split,
            calibration_pool=trained.bundle.calibration_pool,
            target=sub.calibration_target,
        )
        export_evaluation(ev, trained.out_dir)
        result.points.append(SweepPoint(value=v, report=ev.report))
    return result


def format_sweep_table(result: SweepResult, group: str = "overall") -> str:
    """Render a sweep as a fixed-width table over one evaluation group."""
    header = (
        f"{result.param:>8} {'acc':>7} {'recall':>7} {'prec':>7} {'f1':>7} {'auroc':>7}"
    )
    lines = [header, "-" * len(header)]
    for point in result.points:
        g = point.report.groups[group]
        auc = f"{g.auroc:.4f}" if g.auroc is not None else "   n/a"
        lines.append(
            f"{point.value:>8g} {g.accuracy:>7.2f} {g.recall:>7.2f} "
            f"{g.precision:>7.2f} {g.f1:>7.2f} {auc:>7}"
        )
    return "\n".join(lines)


def write_sweep(result: SweepResult, out_dir) -> dict:
    """Persist a sweep as TSV (machine) and txt (human) tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = out_dir / f"sweep_{result.param}.tsv"
    rows = []
    for point in result.points:
        for group, g in point.report.groups.items():
            rows.append(
                "\t".join(
                    [
                        f"{point.value:g}",
                        group,
                        f"{g.accuracy:.6g}",
                        f"{g.recall:.6g}",
                        f"{g.precision:.6g}",
                        f"{g.f1:.6g}",
                        f"{g.auroc:.6g}" if g.auroc is not None else "nan",
                    ]
                )
            )
    tsv.write_text("\n".join(rows) + "\n", encoding="utf-8")
    txt = out_dir / f"sweep_{result.param}.txt"
    txt.write_text(format_sweep_table(result) + "\n", encoding="utf-8")
    return {"tsv": tsv, "txt": txt}


@dataclass
class Checkpoint:
    model: WoodModel
    config: ExperimentConfig
    epoch: int
    loss_history: np.ndarray


def _backend_raw_dims(backend) -> tuple[int, int]:
    if isinstance(backend, FrozenLinearBackend):
        return int(backend.image_weight.shape[1]), int(backend.text_weight.shape[1])
    if isinstance(backend, TrainableLinearBackend):
        return int(backend.image_in.in_features), int(backend.text_in.in_features)
    return 0, 0


def save_checkpoint(
    model: WoodModel,
    path,
    *,
    config: ExperimentConfig,
    epoch: int,
    loss_history: Sequence[float] = (),
    image_dim: int | None = None,
    text_dim: int | None = None,
) -> Path:
    """Write model weights plus config and training metadata as one npz.

    The file is self-describing: a format tag, the JSON config, the raw
    input dims (so the model shell can be rebuilt without the corpus) and
    one array per state-dict entry.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    inferred = _backend_raw_dims(model.backend)
    image_dim = inferred[0] if image_dim is None else int(image_dim)
    text_dim = inferred[1] if text_dim is None else int(text_dim)
    arrays = {
        "meta/format": np.array(CHECKPOINT_FORMAT),
        "meta/config": np.array(json.dumps(config.to_dict(), sort_keys=True)),
        "meta/epoch": np.array(int(epoch)),
        "meta/loss_history": np.asarray(list(loss_history), dtype=np.float64),
        "meta/image_dim": np.array(image_dim),
        "meta/text_dim": np.array(text_dim),
    }
    for key, tensor in model.state_dict().items():
        arrays[f"state/{key}"] = tensor.detach().cpu().numpy()
    np.savez(path, **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    """Rebuild a model from a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: missing file, unreadable archive, a format tag
            other than the current one, or weights that do not fit the
            config's architecture.
    """
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint at {path}")
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    try:
        if "meta/format" not in data:
            raise CheckpointError(f"{path} has no format tag")
        fmt = str(data["meta/format"])
        if fmt != CHECKPOINT_FORMAT:
            raise CheckpointError(
                f"{path} has format {fmt!r}, expected {CHECKPOINT_FORMAT!r}"
            )
        config = ExperimentConfig.from_dict(json.loads(str(data["meta/config"])))
        image_dim = int(data["meta/image_dim"])
        text_dim = int(data["meta/text_dim"])
        if image_dim == 0 and config.corpus is not None:
            image_dim = config.corpus.image_dim
        if text_dim == 0 and config.corpus is not None:
            text_dim = config.corpus.text_dim
        model = build_model(config, image_dim, text_dim, alignment_maps=None)
        state = {
            key[len("state/") :]: torch.as_tensor(data[key])
            for key in data.files
            if key.startswith("state/")
        }
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"{path} does not fit its config: {exc}") from exc
        model.eval()
        return Checkpoint(
            model=model,
            config=config,
            epoch=int(data["meta/epoch"]),
            loss_history=np.asarray(data["meta/loss_history"], dtype=np.float64),
        )
    finally:
        data.close()
