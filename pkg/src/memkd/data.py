"""UCR-style dataset files, preprocessing, splits, batching and synthetic data."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import ContractError, LabelError, MissingValueError, ParseError, SequenceTooShortError

logger = logging.getLogger(__name__)

TARGET_LENGTH = 100


@dataclass
class Dataset:
    """Series ``X [M, T, n]`` with class indices ``y [M]``.

    ``index`` holds each sample's position in the dataset it was loaded or
    generated as, so splits can be checked for loss and duplication.
    """

    X: np.ndarray
    y: np.ndarray
    label_map: dict[float, int]
    name: str = "dataset"
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.index is None:
            self.index = np.arange(len(self.y))
        if self.X.ndim != 3 or len(self.X) != len(self.y):
            raise ContractError(f"X {self.X.shape} and y {self.y.shape} do not describe a dataset")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise LabelError("class index outside the label map")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    @property
    def series_length(self) -> int:
        return self.X.shape[1]

    @property
    def num_channels(self) -> int:
        return self.X.shape[2]

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(self, X=self.X[rows], y=self.y[rows], index=self.index[rows])

    def class_counts(self) -> list[int]:
        return np.bincount(self.y, minlength=self.num_classes).tolist()

    def original_labels(self) -> np.ndarray:
        inverse = {v: k for k, v in self.label_map.items()}
        return np.array([inverse[int(c)] for c in self.y])


# ---------------------------------------------------------------------------
# file format


def _split_fields(line: str, delimiter: str | None) -> list[str]:
    return line.split(delimiter) if delimiter else line.split()


def _sniff(line: str) -> str | None:
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    return None


def _parse_value(text: str, lineno: int) -> float:
    text = text.strip()
    if text == "" or text == "?":
        raise MissingValueError("missing value", lineno)
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric field {text!r}", lineno) from None
    if not math.isfinite(value):
        raise MissingValueError(f"missing or non-finite value {text!r}", lineno)
    return value


def read_ucr_records(path) -> tuple[np.ndarray, np.ndarray]:
    """Return raw original labels ``[M]`` and values ``[M, T]`` from a UCR file."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty file")
    delimiter = _sniff(lines[0])
    width = None
    labels, rows = [], []
    for lineno, line in enumerate(lines, start=1):
        fields = _split_fields(line.strip(), delimiter)
        if width is None:
            width = len(fields)
            if width < 3:
                raise ParseError("a record needs a label and at least two values", lineno)
        elif len(fields) != width:
            raise ParseError(f"expected {width} fields, found {len(fields)}", lineno)
        values = [_parse_value(f, lineno) for f in fields]
        labels.append(values[0])
        rows.append(values[1:])
    return np.asarray(labels), np.asarray(rows, dtype=np.float64)


def load_ucr(path, label_map: Mapping[float, int] | None = None, name: str | None = None) -> Dataset:
    """Load a univariate UCR file.

    Without ``label_map`` labels are remapped to ``0..C-1`` by ascending
    original value.  With one (e.g. the training file's map when loading the
    test split) every label must already be in it.
    """
    raw_labels, values = read_ucr_records(path)
    if label_map is None:
        label_map = {float(v): i for i, v in enumerate(sorted(set(raw_labels.tolist())))}
    else:
        label_map = {float(k): int(v) for k, v in label_map.items()}
        unknown = sorted(set(raw_labels.tolist()) - set(label_map))
        if unknown:
            raise LabelError(f"{path}: labels {unknown} are not in the label map")
    y = np.array([label_map[float(v)] for v in raw_labels], dtype=np.int64)
    return Dataset(values[:, :, None], y, label_map, name or Path(path).name)


def _format_value(v: float) -> str:
    return repr(float(v))


def _format_label(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_ucr(path, dataset: Dataset, delimiter: str = ",") -> None:
    if dataset.num_channels != 1:
        raise ContractError("UCR files hold univariate series only")
    originals = dataset.original_labels()
    lines = [
        delimiter.join([_format_label(lab)] + [_format_value(v) for v in series[:, 0]])
        for lab, series in zip(originals, dataset.X)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def split_paths(prefix) -> tuple[Path, Path]:
    prefix = str(prefix)
    return Path(prefix + "_TRAIN"), Path(prefix + "_TEST")


def load_split_pair(prefix, name: str | None = None) -> tuple[Dataset, Dataset]:
    train_path, test_path = split_paths(prefix)
    name = name or Path(str(prefix)).name
    train = load_ucr(train_path, name=name)
    test = load_ucr(test_path, label_map=train.label_map, name=name)
    return train, test


# ---------------------------------------------------------------------------
# preprocessing


def resample_to_length(series: np.ndarray, target: int = TARGET_LENGTH) -> np.ndarray:
    """Linear interpolation of each channel onto ``target`` evenly spaced points."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    T = series.shape[0]
    if T < 2:
        raise SequenceTooShortError(f"cannot resample a series of length {T}")
    if T == target:
        return series.copy()
    src = np.arange(T) / (T - 1)
    dst = np.arange(target) / (target - 1)
    out = np.empty((target, series.shape[1]))
    for ch in range(series.shape[1]):
        out[:, ch] = np.interp(dst, src, series[:, ch])
    out[0], out[-1] = series[0], series[-1]
    return out


def znormalize(series: np.ndarray, guard: float = 1e-8) -> np.ndarray:
    series = np.asarray(series, dtype=np.float64)
    mean = series.mean(axis=0, keepdims=True)
    std = series.std(axis=0, keepdims=True)
    return (series - mean) / (std + guard)


def preprocess(dataset: Dataset, target_length: int = TARGET_LENGTH, normalize: bool = True) -> Dataset:
    X = np.stack([resample_to_length(s, target_length) for s in dataset.X])
    if normalize:
        X = np.stack([znormalize(s) for s in X])
    return replace(dataset, X=X)


# ---------------------------------------------------------------------------
# splits and batches


def split_train_val(dataset: Dataset, fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split sending ceil(fraction * count) of each class to validation."""
    if not 0 < fraction < 1:
        raise ContractError("validation fraction must lie in (0, 1)")
    if len(dataset) == 0:
        raise ContractError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    val_rows = []
    for c in range(dataset.num_classes):
        rows = np.flatnonzero(dataset.y == c)
        if len(rows) < 2:
            if len(rows):
                logger.warning("class %d has %d sample(s); keeping it in the training split", c, len(rows))
            continue
        n_val = math.ceil(fraction * len(rows))
        val_rows.append(rows[rng.permutation(len(rows))[:n_val]])
    val = np.sort(np.concatenate(val_rows)) if val_rows else np.array([], dtype=np.int64)
    train = np.setdiff1d(np.arange(len(dataset)), val)
    return dataset.subset(train), dataset.subset(val)


def batch_iter(dataset: Dataset, batch_size: int = 32,
               rng: np.random.Generator | int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(X, y, rows)`` batches; shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    n = len(dataset)
    if rng is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(rng).permutation(n)
    for start in range(0, n, batch_size):
        rows = order[start:start + batch_size]
        yield dataset.X[rows], dataset.y[rows], rows


# ---------------------------------------------------------------------------
# synthetic data

BUMP_WIDTH = 10
BUMP_AMPLITUDE = 1.0


def bump_offset(c: int, num_classes: int, length: int) -> int:
    """Start of the class-specific bump window, spread evenly over the series."""
    return int(round((c + 1) * (length - BUMP_WIDTH) / (num_classes + 1)))


def _balanced_labels(count: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.concatenate([np.full(count // num_classes + (c < count % num_classes), c) for c in range(num_classes)])
    return labels[rng.permutation(count)].astype(np.int64)


def _synthetic_series(labels: np.ndarray, num_classes: int, length: int, noise: float,
                      rng: np.random.Generator) -> np.ndarray:
    steps = np.arange(length)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(labels))
    noise_draw = rng.standard_normal((len(labels), length))
    X = np.empty((len(labels), length))
    for row, (c, phi) in enumerate(zip(labels, phases)):
        x = np.sin(2.0 * np.pi * (c + 1) * steps / length + phi)
        start = bump_offset(int(c), num_classes, length)
        x[start:start + BUMP_WIDTH] += BUMP_AMPLITUDE
        X[row] = x + noise * noise_draw[row]
    return X[:, :, None]


def make_synthetic(num_classes: int, train_size: int, test_size: int, length: int = TARGET_LENGTH,
                   noise: float = 0.3, seed: int = 0, name: str = "synthetic") -> tuple[Dataset, Dataset]:
    """Sine waves of class frequency ``c + 1`` with a class-positioned bump.

    Original labels are ``1..C`` as in the UCR archive.
    """
    if num_classes < 2:
        raise ContractError("synthetic data needs at least two classes")
    if length < BUMP_WIDTH + 2:
        raise ContractError(f"length must be at least {BUMP_WIDTH + 2}")
    rng = np.random.default_rng(seed)
    label_map = {float(c + 1): c for c in range(num_classes)}
    out = []
    for count in (train_size, test_size):
        y = _balanced_labels(count, num_classes, rng)
        X = _synthetic_series(y, num_classes, length, noise, rng)
        out.append(Dataset(X, y, dict(label_map), name))
    return out[0], out[1]
