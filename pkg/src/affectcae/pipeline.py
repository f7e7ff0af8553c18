"""
Pipeline Stages
===============
Runs the stages of a continuous affect experiment against an output
directory, one artifact set per stage:

    <out>/pretrain/    model.afpl, loss.csv, accuracy.csv
    <out>/cae/         model.afpl, loss.csv
    <out>/features/    index.csv, <subject>.csv, <subject>_labels.csv
    <out>/svr/         <dimension>.svrm, <dimension>_grid.csv, predictions.csv
    <out>/postprocess/ <dimension>.chain
    <out>/evaluate/    scores.csv, predictions.csv
    <out>/sweep/       <kind>.csv, reference.csv, one directory per cell

Stages only communicate through these files. A pipeline may name an
``upstream`` directory whose artifacts are used when its own are absent
(sweep cells share one pre-trained network this way).
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import RunConfig, dump_config
from .data import (
    ArrayDataset,
    LabeledImageSet,
    SequencePair,
    export_fer_csv,
    export_recola_layout,
    frames_for_training,
    handle_missing,
    load_fer_csv,
    load_recola_layout,
    synth_dataset,
    synth_labeled_images,
)
from .errors import AffectError, LockError, MissingArtifactError, ShapeError
from .metrics import ScoreReport, accuracy, score, write_scores
from .models import (
    CONV_BLOCKS,
    EncodedFeatures,
    build_cae,
    build_pretrain_cnn,
    classify,
    encode,
    set_frozen,
    transfer_weights,
)
from .nn import TrainConfig, TrainResult, load_checkpoint, save_checkpoint, train
from .postprocess import ChainGrid, PostprocessChain, delay_compensate, optimize_chain
from .svr import grid_search, predict_svr, save_svr

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "train-cae", "encode", "train-svr", "postprocess", "evaluate")
ENCODER_LAYERS = tuple(name for block in CONV_BLOCKS for name in block)

# Best reported RECOLA dev scores with d=900 and a 40-frame delay; documentation only
REFERENCE_SCORES = (
    {"dimension": "valence", "encoder_size": 900, "delay": 40, "ccc": 0.516, "source": "published, RECOLA dev"},
    {"dimension": "arousal", "encoder_size": 900, "delay": 40, "ccc": 0.264, "source": "published, RECOLA dev"},
)


@contextmanager
def output_lock(out_dir: Path) -> Iterator[Path]:
    """Exclusive ``.lock`` file for the duration of one command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out_dir} is in use by another command (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)


def _write_table(frame: pd.DataFrame, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")


def _history_frame(result: TrainResult, extra: Optional[Dict[str, List[float]]] = None) -> pd.DataFrame:
    columns: Dict[str, List[float]] = {"epoch": list(range(1, len(result.history) + 1)), "loss": result.history}
    if result.validation_history:
        columns["val_loss"] = result.validation_history
    for name, values in (extra or {}).items():
        columns[name] = values
    return pd.DataFrame(columns)


class Pipeline:
    """
    Stage runner bound to one config and one output directory.

    Every stage reads its inputs from files written by earlier stages and
    raises MissingArtifactError naming the stage to run when they are absent.
    """

    def __init__(self, config: RunConfig, out_dir: Path, upstream: Optional[Path] = None):
        self.config = config
        self.out_dir = Path(out_dir)
        self.upstream = Path(upstream) if upstream else None
        self.seed = config.run.seed

    # ── Artifact lookup ───────────────────────────────────────

    def path(self, relative: str) -> Path:
        target = self.out_dir / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def artifact(self, relative: str, stage: str) -> Path:
        """Existing artifact in this directory or upstream; otherwise MissingArtifactError."""
        own = self.out_dir / relative
        if own.exists():
            return own
        if self.upstream is not None and (self.upstream / relative).exists():
            return self.upstream / relative
        raise MissingArtifactError(f"{relative} not found; run `{stage}` first", stage=stage)

    def write_config(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dump_config(self.config, self.out_dir / "config.ini")

    # ── Inputs ────────────────────────────────────────────────

    def load_images(self) -> Dict[str, LabeledImageSet]:
        """FER CSV when configured, otherwise seeded synthetic blob classes."""
        fer_csv = self.config.paths.fer_csv
        if fer_csv:
            if not Path(fer_csv).exists():
                raise MissingArtifactError(f"FER CSV not found: {fer_csv}")
            return load_fer_csv(fer_csv)
        size = self.config.run.input_size
        n = self.config.synth.images_per_class
        return {
            partition: synth_labeled_images(self.seed + k, n, size, partition)
            for k, partition in enumerate(("train", "val", "test"))
        }

    def load_sequences(self) -> List[SequencePair]:
        """RECOLA-style layout when configured, otherwise synthetic sequences; missing frames handled."""
        root = self.config.paths.recola_root
        if root:
            if not Path(root).is_dir():
                raise MissingArtifactError(f"dataset root not found: {root}")
            pairs = load_recola_layout(root)
        else:
            synth = self.config.synth
            pairs = synth_dataset(
                self.seed,
                n_subjects=synth.subjects,
                n_frames=synth.frames,
                image_size=self.config.run.input_size,
                n_dev=synth.dev_subjects,
                missing_rate=synth.missing_rate,
            )
        return handle_missing(pairs, self.config.run.missing_frames)

    # ── Stages ────────────────────────────────────────────────

    def pretrain(self) -> Dict[str, float]:
        """Train the 7-class CNN; returns accuracy per partition."""
        cfg = self.config.pretrain
        logger.info("Stage pretrain: supervised CNN pre-training")
        sets = self.load_images()
        spec, weights = build_pretrain_cnn(self.seed, self.config.run.conv_channels, self.config.run.input_size, cfg.dropout)
        if sets["train"].images.shape[1:3] != spec.input_shape[:2]:
            raise ShapeError(f"images are {sets['train'].images.shape[1:3]}, network expects {spec.input_shape[:2]}")

        train_config = TrainConfig(
            learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size,
            max_epochs=cfg.epochs,
            loss="categorical-crossentropy",
            seed=self.seed,
            patience=cfg.patience,
        )
        validation = sets.get("val")
        val_accuracy: List[float] = []

        def track_accuracy(epoch: int, current):
            if validation is not None:
                val_accuracy.append(accuracy(classify(spec, current, validation.images), validation.labels))

        result = train(
            spec,
            weights,
            sets["train"].dataset(),
            train_config,
            validation=validation.dataset() if validation is not None else None,
            on_epoch=track_accuracy,
        )
        extra = {"val_accuracy": val_accuracy} if val_accuracy else None
        _write_table(_history_frame(result, extra), self.path("pretrain/loss.csv"))
        save_checkpoint(self.path("pretrain/model.afpl"), spec, result.weights)

        scores = {}
        for partition, image_set in sets.items():
            scores[partition] = accuracy(classify(spec, result.weights, image_set.images), image_set.labels)
        rows = [{"partition": p, "accuracy": a, "n": len(sets[p])} for p, a in scores.items()]
        _write_table(pd.DataFrame(rows), self.path("pretrain/accuracy.csv"))
        logger.info("Pre-training accuracy: " + ", ".join(f"{p} {a:.3f}" for p, a in scores.items()))
        return scores

    def train_cae(self, transfer: Optional[bool] = None, freeze: Optional[int] = None) -> TrainResult:
        """Transfer, freeze and train the autoencoder on training-partition frames."""
        cfg = self.config.cae
        transfer = cfg.transfer if transfer is None else transfer
        freeze = cfg.freeze if freeze is None else freeze
        logger.info(f"Stage train-cae: d={cfg.encoder_size}, freeze={freeze}, transfer={transfer}")

        spec, weights = build_cae(
            cfg.encoder_size,
            self.seed,
            self.config.run.conv_channels,
            self.config.run.input_size,
            cfg.dropout,
            cfg.decoder_pool_upsample,
        )
        if transfer:
            _, source = load_checkpoint(self.artifact("pretrain/model.afpl", "pretrain"))
            weights = transfer_weights(source, weights)
        elif freeze:
            logger.warning("Freezing randomly initialized conv layers (no transfer)")
        weights = set_frozen(weights, freeze)

        pairs = self.load_sequences()
        dataset = frames_for_training([seq for seq, _ in pairs if seq.partition == "train"])
        validation = None
        if cfg.patience:
            # Early stopping watches a held-out tail of the training frames, never dev frames
            cut = int(len(dataset) * 0.9)
            validation = ArrayDataset(dataset.inputs[cut:], dataset.targets[cut:], partition="train-holdout")
            dataset = ArrayDataset(dataset.inputs[:cut], dataset.targets[:cut], partition="train")

        train_config = TrainConfig(
            learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size,
            max_epochs=cfg.epochs,
            loss="mse",
            seed=self.seed,
            patience=cfg.patience,
            freeze_bn_stats=cfg.freeze_bn_stats,
        )
        result = train(spec, weights, dataset, train_config, validation=validation)

        encoder_norms = [
            float(np.sqrt(sum(norms.get(layer, 0.0) ** 2 for layer in ENCODER_LAYERS))) for norms in result.gradient_norms
        ]
        if encoder_norms:
            logger.info(f"Encoder conv gradient norm: first epoch {encoder_norms[0]:.3e}, last {encoder_norms[-1]:.3e}")
            if max(encoder_norms) == 0.0:
                logger.warning("Encoder conv layers received no updates (all frozen)")
        _write_table(_history_frame(result, {"encoder_grad_norm": encoder_norms}), self.path("cae/loss.csv"))
        save_checkpoint(self.path("cae/model.afpl"), spec, result.weights)
        return result

    def encode(self) -> List[str]:
        """Write bottleneck features and aligned labels per subject; returns subject ids."""
        logger.info("Stage encode: extracting encoder features")
        spec, weights = load_checkpoint(self.artifact("cae/model.afpl", "train-cae"))
        pairs = self.load_sequences()
        index = []
        for seq, track in pairs:
            features = encode(spec, weights, seq.frames, seq.timestamps)
            features.to_csv(self.path(f"features/{seq.subject}.csv"))
            labels = pd.DataFrame({"timestamp": track.timestamps, "valence": track.valence, "arousal": track.arousal})
            labels.to_csv(self.path(f"features/{seq.subject}_labels.csv"), index=False, lineterminator="\n")
            index.append({"subject": seq.subject, "partition": seq.partition, "frames": len(seq)})
        _write_table(pd.DataFrame(index), self.path("features/index.csv"))
        logger.info(f"Encoded {len(index)} subject(s), d={spec.layer('encoder').units}")
        return [row["subject"] for row in index]

    def _load_features(self) -> List[Tuple[str, str, EncodedFeatures, pd.DataFrame]]:
        index_path = self.artifact("features/index.csv", "encode")
        index = pd.read_csv(index_path, dtype={"subject": str, "partition": str})
        root = index_path.parent
        subjects = []
        delay = self.config.svr.delay
        for subject, partition in zip(index["subject"], index["partition"]):
            features = EncodedFeatures.from_csv(root / f"{subject}.csv")
            labels = pd.read_csv(root / f"{subject}_labels.csv", float_precision="round_trip")
            if delay:
                rows, labels = delay_compensate(features.features, labels, delay)
                features = EncodedFeatures(features=rows, timestamps=features.timestamps[: len(rows)])
                labels = labels.reset_index(drop=True)
            subjects.append((subject, partition, features, labels))
        if not any(p == "train" for _, p, _, _ in subjects) or not any(p == "dev" for _, p, _, _ in subjects):
            raise MissingArtifactError("features need both train and dev subjects", stage="encode")
        return subjects

    def train_svr(self) -> Dict[str, float]:
        """Grid-search one SVR per dimension; returns chosen dev CCC per dimension."""
        cfg = self.config.svr
        logger.info(f"Stage train-svr: delay={cfg.delay} frames, kernel={cfg.kernel}")
        subjects = self._load_features()

        def stack(partition: str, column: str) -> Tuple[np.ndarray, np.ndarray]:
            chosen = [(f, labels) for _, p, f, labels in subjects if p == partition]
            x = np.vstack([f.features for f, _ in chosen])
            return x, np.concatenate([labels[column].to_numpy() for _, labels in chosen])

        predictions = pd.DataFrame(
            {
                "subject": np.concatenate([[s] * len(f.timestamps) for s, _, f, _ in subjects]),
                "partition": np.concatenate([[p] * len(f.timestamps) for _, p, f, _ in subjects]),
                "timestamp": np.concatenate([f.timestamps for _, _, f, _ in subjects]),
            }
        )
        chosen_scores = {}
        for dimension in self.config.evaluate.dimensions:
            x_train, y_train = stack("train", dimension)
            x_dev, y_dev = stack("dev", dimension)
            report = grid_search(
                x_train,
                y_train,
                x_dev,
                y_dev,
                cfg.c_grid,
                cfg.epsilon_grid,
                cfg.kernel,
                gamma=cfg.gamma or None,
                tol=cfg.tol,
                max_iter=cfg.max_iter,
                jobs=self.config.run.jobs,
            )
            save_svr(self.path(f"svr/{dimension}.svrm"), report.model)
            report.to_csv(self.path(f"svr/{dimension}_grid.csv"))
            chosen_scores[dimension] = report.chosen.dev_ccc

            all_features = np.vstack([f.features for _, _, f, _ in subjects])
            predictions[f"{dimension}_gold"] = np.concatenate([labels[dimension].to_numpy() for _, _, _, labels in subjects])
            predictions[f"{dimension}_pred"] = predict_svr(report.model, all_features)
        _write_table(predictions, self.path("svr/predictions.csv"))
        return chosen_scores

    def _load_predictions(self) -> pd.DataFrame:
        path = self.artifact("svr/predictions.csv", "train-svr")
        return pd.read_csv(path, dtype={"subject": str, "partition": str}, float_precision="round_trip")

    @staticmethod
    def _segments(frame: pd.DataFrame) -> List[int]:
        """Consecutive run lengths of the subject column."""
        subjects = frame["subject"].to_numpy()
        breaks = np.flatnonzero(subjects[1:] != subjects[:-1]) + 1
        return list(np.diff(np.concatenate([[0], breaks, [len(subjects)]])).astype(int))

    def postprocess(self) -> Dict[str, PostprocessChain]:
        """Fit one post-processing chain per dimension."""
        cfg = self.config.postprocess
        logger.info(f"Stage postprocess: centering={cfg.center_mode}, scaling={cfg.scale_mode}")
        predictions = self._load_predictions()
        train_rows = predictions[predictions["partition"] == "train"]
        dev_rows = predictions[predictions["partition"] == "dev"]
        grid = ChainGrid(windows=tuple(cfg.windows), shifts=tuple(cfg.shifts))
        chains = {}
        for dimension in self.config.evaluate.dimensions:
            chain = optimize_chain(
                train_rows[f"{dimension}_gold"].to_numpy(),
                train_rows[f"{dimension}_pred"].to_numpy(),
                dev_rows[f"{dimension}_gold"].to_numpy(),
                dev_rows[f"{dimension}_pred"].to_numpy(),
                grid,
                cfg.center_mode,
                cfg.scale_mode,
                train_segments=self._segments(train_rows),
                dev_segments=self._segments(dev_rows),
            )
            chain.save(self.path(f"postprocess/{dimension}.chain"))
            logger.info(
                f"{dimension}: {len(chain.steps)} step(s) kept, dev CCC {chain.raw_dev_ccc:.4f} -> {chain.dev_ccc:.4f}"
            )
            chains[dimension] = chain
        return chains

    def evaluate(self) -> List[ScoreReport]:
        """Raw and post-processed scores per dimension and partition."""
        logger.info("Stage evaluate")
        predictions = self._load_predictions()
        reports = []
        for dimension in self.config.evaluate.dimensions:
            chain = PostprocessChain.load(self.artifact(f"postprocess/{dimension}.chain", "postprocess"))
            for partition in ("train", "dev"):
                rows = predictions[predictions["partition"] == partition]
                gold = rows[f"{dimension}_gold"].to_numpy()
                raw = rows[f"{dimension}_pred"].to_numpy()
                post = chain.apply(raw, self._segments(rows))
                reports.append(score(gold, raw, dimension, partition, "raw"))
                reports.append(score(gold, post, dimension, partition, "postprocessed"))
                predictions.loc[rows.index, f"{dimension}_post"] = post
        write_scores(reports, self.path("evaluate/scores.csv"))
        if self.config.evaluate.write_predictions:
            _write_table(predictions, self.path("evaluate/predictions.csv"))
        for r in reports:
            if r.partition == "dev":
                logger.info(f"{r.dimension} dev {r.stage}: CCC {r.ccc:.4f}, Pearson {r.pearson:.4f}, RMSE {r.rmse:.4f}")
        return reports

    def run_from(self, first_stage: str = "pretrain") -> List[ScoreReport]:
        """Run ``first_stage`` and every later stage."""
        if first_stage not in STAGES:
            raise ValueError(f"unknown stage '{first_stage}'")
        stages = STAGES[STAGES.index(first_stage) :]
        if "pretrain" in stages and not self.config.cae.transfer:
            stages = stages[1:]
        actions = {
            "pretrain": self.pretrain,
            "train-cae": self.train_cae,
            "encode": self.encode,
            "train-svr": self.train_svr,
            "postprocess": self.postprocess,
        }
        for stage in stages[:-1]:
            actions[stage]()
        return self.evaluate()

    # ── Synthetic data export ─────────────────────────────────

    def synth_data(self, target: Optional[Path] = None) -> Path:
        """Write the synthetic sequences in the on-disk layout plus a synthetic FER CSV."""
        target = Path(target) if target else self.out_dir / "synth"
        synth = self.config.synth
        pairs = synth_dataset(
            self.seed, synth.subjects, synth.frames, self.config.run.input_size, synth.dev_subjects, synth.missing_rate
        )
        export_recola_layout(pairs, target / "recola")
        if self.config.run.input_size == 48:
            images = {
                p: synth_labeled_images(self.seed + k, synth.images_per_class, 48, p)
                for k, p in enumerate(("train", "val", "test"))
            }
            export_fer_csv(images, target / "fer.csv")
        logger.info(f"Synthetic data written to {target}")
        return target


# ── Sweeps ─────────────────────────────────────────────────────


@dataclass
class SweepCell:
    kind: str
    value: int
    out_dir: Path
    reports: List[ScoreReport] = field(default_factory=list)
    error: str = ""


def _cell_config(config: RunConfig, kind: str, value: int) -> RunConfig:
    if kind == "freeze":
        return config.with_overrides(cae={"freeze": value})
    if kind == "encoder-size":
        return config.with_overrides(cae={"encoder_size": value})
    return config.with_overrides(svr={"delay": value})


def run_sweep(config: RunConfig, out_dir: Path, kind: Optional[str] = None) -> List[SweepCell]:
    """
    One pipeline run per sweep value, sharing the pre-trained CNN (and, for
    delay sweeps, the trained autoencoder and its features).

    Failed cells are recorded and the sweep continues.
    """
    kind = kind or config.sweep.kind
    values = {"freeze": config.sweep.freeze, "encoder-size": config.sweep.encoder_sizes, "delay": config.sweep.delays}[
        kind
    ]
    sweep_dir = Path(out_dir) / "sweep"
    base = Pipeline(config, sweep_dir / "base")
    base.write_config()
    if config.cae.transfer:
        base.pretrain()
    first_stage = "train-cae"
    if kind == "delay":
        base.train_cae()
        base.encode()
        first_stage = "train-svr"

    cells = [SweepCell(kind, int(v), sweep_dir / f"{kind}-{v}") for v in values]

    def run_cell(cell: SweepCell) -> SweepCell:
        try:
            cell_pipeline = Pipeline(_cell_config(config, kind, cell.value), cell.out_dir, upstream=base.out_dir)
            cell_pipeline.write_config()
            cell.reports = cell_pipeline.run_from(first_stage)
        except AffectError as e:
            cell.error = str(e)
            logger.error(f"Sweep cell {kind}={cell.value} failed: {e}")
        except Exception as e:
            cell.error = f"{type(e).__name__}: {e}"
            logger.error(f"Sweep cell {kind}={cell.value} failed unexpectedly: {cell.error}")
        return cell

    logger.info(f"Sweep {kind}: {len(cells)} cell(s), {config.run.jobs} job(s)")
    if config.run.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.run.jobs) as pool:
            cells = list(pool.map(run_cell, cells))
    else:
        cells = [run_cell(c) for c in cells]

    write_sweep_table(cells, kind, config, sweep_dir / f"{kind}.csv")
    _write_table(pd.DataFrame(list(REFERENCE_SCORES)), sweep_dir / "reference.csv")
    errors = [{"kind": c.kind, "value": c.value, "error": c.error} for c in cells if c.error]
    if errors:
        _write_table(pd.DataFrame(errors), sweep_dir / f"{kind}_errors.csv")
    return cells


def _dev_ccc(cell: SweepCell, dimension: str) -> float:
    for r in cell.reports:
        if r.dimension == dimension and r.partition == "dev" and r.stage == "postprocessed":
            return r.ccc
    return float("nan")


def write_sweep_table(cells: Sequence[SweepCell], kind: str, config: RunConfig, path: Path):
    """
    Freeze sweeps: one row per dimension, one CCC column per freeze count.
    Encoder-size and delay sweeps: one row per (dimension, cell).
    """
    dimensions = config.evaluate.dimensions
    if kind == "freeze":
        rows = []
        for dimension in dimensions:
            row: Dict[str, object] = {"dimension": dimension}
            for cell in cells:
                row[f"{cell.value} Conv-Frozen"] = _dev_ccc(cell, dimension)
            rows.append(row)
        _write_table(pd.DataFrame(rows), path)
        return

    rows = []
    for dimension in dimensions:
        for cell in cells:
            encoder_size = cell.value if kind == "encoder-size" else config.cae.encoder_size
            delay = cell.value if kind == "delay" else config.svr.delay
            rows.append({"dimension": dimension, "encoder_size": encoder_size, "delay": delay, "ccc": _dev_ccc(cell, dimension)})
    _write_table(pd.DataFrame(rows, columns=["dimension", "encoder_size", "delay", "ccc"]), path)
