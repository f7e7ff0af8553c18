"""
Datasets
========
Loaders, exporters and generators for the two kinds of input data:

- FER-style labeled images: CSV with ``emotion,pixels,Usage`` columns,
  48x48 grayscale pixels as space-separated 0-255 integers
- RECOLA-style sequences: per subject, 40 ms frames plus valence/arousal
  gold-standard tracks

On-disk sequence layout::

    <root>/<partition>/<subject>/frames/<milliseconds:08d>.pgm   (or .raw + frames/shape.txt)
    <root>/<partition>/<subject>/valence.csv                     timestamp,value
    <root>/<partition>/<subject>/arousal.csv                     timestamp,value

Also provides missing-frame handling, seeded synthetic data for desk-scale
runs, and the mini-batch iterator consumed by ``nn.train``.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from scipy import ndimage

from .errors import DataError, ParameterError, ParseError, RangeError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

FRAME_PERIOD = 0.04
PERIOD_TOLERANCE = 1e-6
FER_SIZE = 48
FER_PIXELS = FER_SIZE * FER_SIZE
NUM_CLASSES = 7
EMOTIONS = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
FER_USAGE = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}
SEQUENCE_PARTITIONS = ("train", "dev")
MISSING_STRATEGIES = ("substitute", "drop")

SequencePair = Tuple["FrameSequence", "AnnotationTrack"]


# ── Types ──────────────────────────────────────────────────────


@dataclass
class LabeledImageSet:
    """Images (N, H, W, 1) in [0, 1] with class indices 0..6."""

    images: Tensor
    labels: np.ndarray
    partition: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 1:
            raise ShapeError(f"images must be (N, H, W, 1), got {self.images.shape}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise RangeError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES:
            raise RangeError(f"labels must lie in 0..{NUM_CLASSES - 1}")

    def __len__(self) -> int:
        return len(self.images)

    def one_hot(self) -> Tensor:
        return np.eye(NUM_CLASSES)[self.labels]

    def dataset(self, partition: Optional[str] = None) -> "ArrayDataset":
        return ArrayDataset(self.images, self.one_hot(), partition=partition or self.partition)


@dataclass
class FrameSequence:
    """
    Grayscale frames of one subject at a 40 ms period.

    ``missing`` flags frames without a usable face; their pixels are zero
    until substituted. Consecutive timestamps are one period apart unless
    ``contiguous`` is false (frames dropped by the drop strategy).
    """

    subject: str
    timestamps: np.ndarray
    frames: Tensor
    missing: np.ndarray
    partition: str = "train"
    period: float = FRAME_PERIOD
    contiguous: bool = True

    def __post_init__(self):
        if self.frames.ndim != 3 or len(self.frames) != len(self.timestamps):
            raise ShapeError(f"{self.subject}: frames {self.frames.shape} do not match {len(self.timestamps)} timestamps")
        if len(self.missing) != len(self.timestamps):
            raise ShapeError(f"{self.subject}: missing mask length differs from frame count")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0.0):
            raise DataError(f"{self.subject}: timestamps must be strictly increasing")
        if self.contiguous and len(self.timestamps) > 1:
            steps = np.diff(self.timestamps)
            bad = np.flatnonzero(np.abs(steps - self.period) > PERIOD_TOLERANCE)
            if bad.size:
                k = int(bad[0])
                raise RangeError(
                    f"{self.subject}: frame step {steps[k]:.6f}s at t={self.timestamps[k]:.3f}s, expected {self.period}s"
                )

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def n_missing(self) -> int:
        return int(self.missing.sum())

    def window(self, start: int, stop: int) -> "FrameSequence":
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            frames=self.frames[start:stop],
            missing=self.missing[start:stop],
        )


@dataclass
class AnnotationTrack:
    """Per-frame valence and arousal gold standard in [-1, 1]."""

    subject: str
    timestamps: np.ndarray
    valence: np.ndarray
    arousal: np.ndarray

    def __post_init__(self):
        n = len(self.timestamps)
        if len(self.valence) != n or len(self.arousal) != n:
            raise ShapeError(f"{self.subject}: annotation columns differ in length")
        for name, values in (("valence", self.valence), ("arousal", self.arousal)):
            if n and (np.abs(values) > 1.0).any():
                bad = float(values[np.argmax(np.abs(values))])
                raise RangeError(f"{self.subject}: {name} value {bad} outside [-1, 1]")

    def __len__(self) -> int:
        return len(self.timestamps)

    def values(self, dimension: str) -> np.ndarray:
        if dimension not in ("valence", "arousal"):
            raise ParameterError(f"unknown dimension '{dimension}'")
        return self.valence if dimension == "valence" else self.arousal

    def window(self, start: int, stop: int) -> "AnnotationTrack":
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            valence=self.valence[start:stop],
            arousal=self.arousal[start:stop],
        )


# ── FER CSV ────────────────────────────────────────────────────


def load_fer_csv(path: Union[str, Path]) -> Dict[str, LabeledImageSet]:
    """
    Load a FER-style CSV and split it by its usage column.

    Returns:
        {"train" | "val" | "test": LabeledImageSet} for every partition present

    Raises:
        ParseError: a row with the wrong pixel count, a bad pixel or a label outside 0..6
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"FER CSV not found: {path}")
    table = pd.read_csv(path, dtype=str, keep_default_na=False)
    columns = {c.lower(): c for c in table.columns}
    for required in ("emotion", "pixels", "usage"):
        if required not in columns:
            raise ParseError(f"{path}: missing column '{required}'")

    pixels = np.empty((len(table), FER_PIXELS), dtype=np.float64)
    labels = np.empty(len(table), dtype=np.int64)
    for k, (emotion, pixel_text) in enumerate(zip(table[columns["emotion"]], table[columns["pixels"]]), start=1):
        values = pixel_text.split()
        if len(values) != FER_PIXELS:
            raise ParseError(f"row {k}: expected {FER_PIXELS} values, got {len(values)}")
        try:
            row = np.array(values, dtype=np.int64)
            label = int(emotion)
        except ValueError as e:
            raise ParseError(f"row {k}: {e}")
        if row.min() < 0 or row.max() > 255:
            raise ParseError(f"row {k}: pixel values must be 0..255")
        if not 0 <= label < NUM_CLASSES:
            raise ParseError(f"row {k}: label {label} outside 0..{NUM_CLASSES - 1}")
        pixels[k - 1] = row
        labels[k - 1] = label

    usage = table[columns["usage"]].map(lambda u: FER_USAGE.get(u, u.lower())).to_numpy()
    images = (pixels / 255.0).reshape(-1, FER_SIZE, FER_SIZE, 1)
    sets = {}
    for partition in ("train", "val", "test"):
        mask = usage == partition
        if mask.any():
            sets[partition] = LabeledImageSet(images=images[mask], labels=labels[mask], partition=partition)
    counts = ", ".join(f"{p}={len(s)}" for p, s in sets.items())
    logger.info(f"Loaded FER CSV {path.name}: {counts}")
    return sets


def export_fer_csv(sets: Dict[str, LabeledImageSet], path: Union[str, Path]):
    """Write sets back in FER CSV form (train, val, test order)."""
    usage_names = {v: k for k, v in FER_USAGE.items()}
    rows = []
    for partition in ("train", "val", "test"):
        if partition not in sets:
            continue
        s = sets[partition]
        ints = np.rint(s.images.reshape(len(s), -1) * 255.0).astype(np.int64)
        for label, row in zip(s.labels, ints):
            rows.append((int(label), " ".join(map(str, row)), usage_names[partition]))
    frame = pd.DataFrame(rows, columns=["emotion", "pixels", "Usage"])
    frame.to_csv(path, index=False, lineterminator="\n")


# ── RECOLA-style layout ────────────────────────────────────────


def _read_track(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    try:
        table = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"{path}: {e}")
    if list(table.columns) != ["timestamp", "value"]:
        raise ParseError(f"{path}: expected columns timestamp,value")
    timestamps = table["timestamp"].to_numpy(dtype=np.float64)
    if len(timestamps) > 1 and np.any(np.diff(timestamps) <= 0.0):
        raise DataError(f"{path}: timestamps are not strictly increasing")
    return timestamps, table["value"].to_numpy(dtype=np.float64)


def _frame_key(timestamp: float) -> int:
    return int(round(timestamp * 1000.0))


def _read_frames(frame_dir: Path) -> Dict[int, np.ndarray]:
    frames: Dict[int, np.ndarray] = {}
    if not frame_dir.is_dir():
        return frames
    raw_shape: Optional[Tuple[int, int]] = None
    shape_file = frame_dir / "shape.txt"
    if shape_file.exists():
        h, w = (int(v) for v in shape_file.read_text().split()[:2])
        raw_shape = (h, w)

    for path in sorted(frame_dir.iterdir()):
        if path.suffix not in (".pgm", ".raw") or not path.stem.isdigit():
            continue
        if path.suffix == ".pgm":
            with Image.open(path) as img:
                pixels = np.asarray(img.convert("L"), dtype=np.uint8)
        else:
            if raw_shape is None:
                raise DataError(f"{path}: raw frame without frames/shape.txt")
            pixels = np.fromfile(path, dtype=np.uint8)
            if pixels.size != raw_shape[0] * raw_shape[1]:
                raise DataError(f"{path}: {pixels.size} bytes, expected {raw_shape[0]}x{raw_shape[1]}")
            pixels = pixels.reshape(raw_shape)
        frames[int(path.stem)] = pixels.astype(np.float64) / 255.0
    return frames


def load_subject(subject_dir: Union[str, Path], partition: str) -> SequencePair:
    """Load one subject directory; frames are matched to annotation rows by exact timestamp."""
    subject_dir = Path(subject_dir)
    subject = subject_dir.name
    for name in ("valence.csv", "arousal.csv"):
        if not (subject_dir / name).exists():
            raise DataError(f"{subject_dir}: missing {name}")
    t_val, valence = _read_track(subject_dir / "valence.csv")
    t_aro, arousal = _read_track(subject_dir / "arousal.csv")
    if len(t_val) != len(t_aro) or not np.array_equal(t_val, t_aro):
        raise DataError(f"{subject}: valence and arousal timestamps differ")
    track = AnnotationTrack(subject=subject, timestamps=t_val, valence=valence, arousal=arousal)

    images = _read_frames(subject_dir / "frames")
    keys = [_frame_key(t) for t in t_val]
    unmatched = set(images) - set(keys)
    if unmatched:
        raise DataError(
            f"{subject}: {len(unmatched)} frame(s) without an annotation row (first at {min(unmatched)} ms)"
        )
    if not images:
        raise DataError(f"{subject}: no frames found")
    shapes = {img.shape for img in images.values()}
    if len(shapes) != 1:
        raise DataError(f"{subject}: frames have differing sizes {sorted(shapes)}")
    (shape,) = shapes

    frames = np.zeros((len(keys),) + shape, dtype=np.float64)
    missing = np.ones(len(keys), dtype=bool)
    for i, key in enumerate(keys):
        if key in images:
            frames[i] = images[key]
            missing[i] = False
    seq = FrameSequence(subject=subject, timestamps=t_val, frames=frames, missing=missing, partition=partition)
    if seq.n_missing:
        logger.info(f"{subject}: {seq.n_missing} missing frame(s)")
    return seq, track


def load_recola_layout(root: Union[str, Path]) -> List[SequencePair]:
    """
    Load every subject under ``<root>/train`` and ``<root>/dev``.

    Returns:
        (FrameSequence, AnnotationTrack) pairs, train subjects first, subjects sorted by name
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    pairs = []
    for partition in SEQUENCE_PARTITIONS:
        partition_dir = root / partition
        if not partition_dir.is_dir():
            continue
        for subject_dir in sorted(p for p in partition_dir.iterdir() if p.is_dir()):
            pairs.append(load_subject(subject_dir, partition))
    if not pairs:
        raise DataError(f"{root}: no subjects found under {', '.join(SEQUENCE_PARTITIONS)}")
    logger.info(f"Loaded {len(pairs)} subject(s) from {root}")
    return pairs


def export_recola_layout(pairs: Sequence[SequencePair], root: Union[str, Path]):
    """Write pairs in the on-disk layout; MISSING frames get no file."""
    root = Path(root)
    for seq, track in pairs:
        subject_dir = root / seq.partition / seq.subject
        frame_dir = subject_dir / "frames"
        frame_dir.mkdir(parents=True, exist_ok=True)
        pixels = np.rint(seq.frames * 255.0).clip(0, 255).astype(np.uint8)
        for t, image, gone in zip(seq.timestamps, pixels, seq.missing):
            if not gone:
                Image.fromarray(image).save(frame_dir / f"{_frame_key(t):08d}.pgm")
        for dimension in ("valence", "arousal"):
            table = pd.DataFrame({"timestamp": track.timestamps, "value": track.values(dimension)})
            table.to_csv(subject_dir / f"{dimension}.csv", index=False, lineterminator="\n")
    logger.info(f"Exported {len(pairs)} subject(s) to {root}")


# ── Missing frames ─────────────────────────────────────────────


def substitute_missing_frames(seq: FrameSequence) -> FrameSequence:
    """
    Replace each MISSING frame by the nearest preceding valid frame; a leading
    run of MISSING frames takes the first valid frame.
    """
    if not seq.missing.any():
        return seq
    if seq.missing.all():
        raise DataError(f"{seq.subject}: every frame is missing")
    positions = np.arange(len(seq))
    source = np.where(seq.missing, -1, positions)
    source = np.maximum.accumulate(source)
    source[source < 0] = int(np.argmax(~seq.missing))
    logger.debug(f"{seq.subject}: substituted {seq.n_missing} missing frame(s)")
    return replace(seq, frames=seq.frames[source], missing=np.zeros(len(seq), dtype=bool))


def drop_missing_frames(seq: FrameSequence, track: AnnotationTrack) -> SequencePair:
    """Remove MISSING frames together with their annotation rows."""
    keep = ~seq.missing
    if not keep.any():
        raise DataError(f"{seq.subject}: every frame is missing")
    seq = replace(
        seq, timestamps=seq.timestamps[keep], frames=seq.frames[keep], missing=seq.missing[keep], contiguous=False
    )
    track = replace(
        track, timestamps=track.timestamps[keep], valence=track.valence[keep], arousal=track.arousal[keep]
    )
    return seq, track


def handle_missing(pairs: Sequence[SequencePair], strategy: str = "substitute") -> List[SequencePair]:
    if strategy not in MISSING_STRATEGIES:
        raise ParameterError(f"unknown missing-frame strategy '{strategy}' (expected one of {MISSING_STRATEGIES})")
    if strategy == "substitute":
        return [(substitute_missing_frames(seq), track) for seq, track in pairs]
    return [drop_missing_frames(seq, track) for seq, track in pairs]


# ── Synthetic data ─────────────────────────────────────────────


def _smooth_latent(rng: np.random.Generator, n: int) -> np.ndarray:
    """Slowly drifting trajectory rescaled to [-0.9, 0.9]."""
    noise = rng.standard_normal(n + 200)
    smooth = ndimage.gaussian_filter1d(noise, sigma=max(2.0, n / 25.0), mode="reflect")[100:-100]
    span = smooth.max() - smooth.min()
    return 1.8 * (smooth - smooth.min()) / span - 0.9 if span > 0 else np.zeros(n)


def _blob(size: int, cx: np.ndarray, cy: np.ndarray, amplitude: np.ndarray, sigma: float) -> Tensor:
    grid = np.arange(size, dtype=np.float64)
    dx = (grid[None, None, :] - cx[:, None, None]) ** 2
    dy = (grid[None, :, None] - cy[:, None, None]) ** 2
    return amplitude[:, None, None] * np.exp(-(dx + dy) / (2.0 * sigma**2))


def synth_dataset(
    seed: int,
    n_subjects: int = 4,
    n_frames: int = 500,
    image_size: int = FER_SIZE,
    n_dev: int = 1,
    missing_rate: float = 0.0,
) -> List[SequencePair]:
    """
    Seeded synthetic sequences: a Gaussian blob whose x-position and intensity
    drift smoothly. Valence follows the x-position, arousal the intensity,
    both lightly smoothed and within [-1, 1]. The last ``n_dev`` subjects form
    the dev partition.

    Args:
        missing_rate: fraction of frames (never the first) flagged MISSING
    """
    if n_frames < 10:
        raise ParameterError(f"n_frames must be >= 10, got {n_frames}")
    if n_subjects < 1 or not 0 <= n_dev <= n_subjects:
        raise ParameterError(f"need n_subjects >= 1 and 0 <= n_dev <= n_subjects, got {n_subjects}/{n_dev}")
    if not 0.0 <= missing_rate < 1.0:
        raise ParameterError(f"missing_rate must be in [0, 1), got {missing_rate}")

    timestamps = np.arange(n_frames) * 40 / 1000.0
    pairs = []
    for s in range(n_subjects):
        rng = np.random.default_rng(np.random.SeedSequence([seed, s]))
        position = _smooth_latent(rng, n_frames)
        intensity = _smooth_latent(rng, n_frames)

        cx = (position + 1.0) / 2.0 * (image_size * 0.5) + image_size * 0.25
        cy = np.full(n_frames, (image_size - 1) / 2.0)
        amplitude = 0.25 + 0.35 * (intensity + 1.0)
        frames = _blob(image_size, cx, cy, amplitude, sigma=image_size / 8.0)

        missing = np.zeros(n_frames, dtype=bool)
        if missing_rate > 0.0:
            missing[1:] = rng.random(n_frames - 1) < missing_rate
            frames[missing] = 0.0

        valence = np.clip(ndimage.uniform_filter1d(position, size=5, mode="nearest"), -1.0, 1.0)
        arousal = np.clip(ndimage.uniform_filter1d(intensity, size=5, mode="nearest"), -1.0, 1.0)
        subject = f"S{s + 1:02d}"
        partition = "dev" if s >= n_subjects - n_dev else "train"
        seq = FrameSequence(
            subject=subject, timestamps=timestamps.copy(), frames=frames, missing=missing, partition=partition
        )
        track = AnnotationTrack(subject=subject, timestamps=timestamps.copy(), valence=valence, arousal=arousal)
        pairs.append((seq, track))
    logger.debug(f"Generated {n_subjects} synthetic subject(s) x {n_frames} frames (seed {seed})")
    return pairs


def synth_labeled_images(
    seed: int, n_per_class: int = 10, image_size: int = FER_SIZE, partition: str = "train"
) -> LabeledImageSet:
    """
    Seven-class blob-placement images: class 0 centers the blob, classes 1..6
    place it around a circle. Seeded jitter, amplitude and pixel noise.
    """
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(NUM_CLASSES), n_per_class)
    rng.shuffle(labels)

    angles = 2.0 * np.pi * (labels - 1) / (NUM_CLASSES - 1)
    radius = np.where(labels == 0, 0.0, image_size / 4.0)
    center = (image_size - 1) / 2.0
    n = len(labels)
    cx = center + radius * np.cos(angles) + rng.uniform(-1.0, 1.0, n)
    cy = center + radius * np.sin(angles) + rng.uniform(-1.0, 1.0, n)
    amplitude = rng.uniform(0.6, 1.0, n)
    images = _blob(image_size, cx, cy, amplitude, sigma=image_size / 10.0)
    images = np.clip(images + rng.normal(0.0, 0.02, images.shape), 0.0, 1.0)
    return LabeledImageSet(images=images[..., None], labels=labels, partition=partition)


# ── Batching ───────────────────────────────────────────────────


@dataclass
class ArrayDataset:
    """
    In-memory (inputs, targets) pairs tagged with their partition.

    A trailing batch of a single sample is merged into the previous batch so
    batchnorm never sees a batch of one.
    """

    inputs: Tensor
    targets: Tensor
    partition: str = "train"
    segments: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ShapeError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.inputs)

    def batches(self, batch_size: int, seed: Optional[int] = None) -> Iterator[Tuple[Tensor, Tensor]]:
        n = len(self)
        order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
        bounds = list(range(0, n, batch_size)) + [n]
        if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
            del bounds[-2]
        for start, stop in zip(bounds[:-1], bounds[1:]):
            idx = order[start:stop]
            yield self.inputs[idx], self.targets[idx]


def frames_for_training(sequences: Sequence[FrameSequence]) -> ArrayDataset:
    """
    Reconstruction dataset (input == target) from training-partition sequences.

    Raises:
        DataError: a non-training sequence was passed, or frames are still MISSING
    """
    if not sequences:
        raise DataError("no training sequences")
    for seq in sequences:
        if seq.partition != "train":
            raise DataError(f"{seq.subject}: '{seq.partition}' frames must not be used for autoencoder training")
        if seq.n_missing:
            raise DataError(f"{seq.subject}: {seq.n_missing} frame(s) still missing; substitute or drop them first")
    frames = np.concatenate([seq.frames for seq in sequences])[..., None]
    return ArrayDataset(inputs=frames, targets=frames, partition="train", segments=[len(s) for s in sequences])
