"""Sensor stream ingestion, normalisation, sliding windows and synthetic data.

CSV layout: header ``subject,<ch_0>,...,<ch_{C-1}>,label``, one row per
sample, rows in time order within each subject.  The sampling rate is not
stored in the file.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .fileio import atomic_write_text


@dataclass
class Stream:
    subject: str
    values: np.ndarray  # [T, C]
    labels: np.ndarray  # [T]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class RawDataset:
    sampling_rate: float
    streams: list[Stream]
    class_names: list[str]
    channel_names: list[str]

    @property
    def channels(self) -> int:
        return len(self.channel_names)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.streams:
            seen.setdefault(s.subject, None)
        return list(seen)

    def validate(self) -> None:
        if self.sampling_rate <= 0:
            raise ConfigError("sampling_rate", f"must be positive, got {self.sampling_rate}")
        K = self.num_classes
        for s in self.streams:
            if s.values.ndim != 2 or s.values.shape[1] != self.channels:
                raise DataError(f"stream of subject {s.subject} has shape {s.values.shape}, "
                                f"expected [T, {self.channels}]")
            if len(s.labels) != len(s.values):
                raise DataError(f"stream of subject {s.subject}: {len(s.values)} samples but {len(s.labels)} labels")
            if len(s.labels) and (s.labels.min() < 0 or s.labels.max() >= K):
                raise DataError(f"stream of subject {s.subject} has labels outside [0, {K})")


@dataclass
class WindowedDataset:
    windows: np.ndarray  # [N, s_w, C]
    labels: np.ndarray  # [N]
    subject_of: np.ndarray  # [N], subject ids
    window_seconds: float
    overlap: float
    sampling_rate: float
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def window_samples(self) -> int:
        return self.windows.shape[1]

    @property
    def channels(self) -> int:
        return self.windows.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def subjects(self) -> list[str]:
        return list(dict.fromkeys(self.subject_of.tolist()))

    def select(self, subjects: Sequence[str]) -> "WindowedDataset":
        mask = np.isin(self.subject_of, list(subjects))
        return replace(self, windows=self.windows[mask], labels=self.labels[mask], subject_of=self.subject_of[mask])


# -- CSV -----------------------------------------------------------------------

@dataclass
class CsvSchema:
    sampling_rate: float
    subject_column: str = "subject"
    label_column: str = "label"
    channel_columns: list[str] | None = None
    class_names: list[str] | None = None


def load_csv(path, schema: CsvSchema) -> RawDataset:
    """Parse a sample-per-row CSV into one stream per subject.

    Without ``schema.class_names`` labels are mapped to indices in order of
    first appearance; if every label is a non-negative integer it is used as
    the index directly.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        return _parse_csv(fh, schema, str(path))


def _parse_csv(fh, schema: CsvSchema, source: str) -> RawDataset:
    reader = csv.reader(fh)
    header = None
    for row in reader:
        if row and not row[0].startswith("#"):
            header = [c.strip() for c in row]
            break
    if header is None:
        raise DataError(f"{source}: no data rows")
    for col in (schema.subject_column, schema.label_column):
        if col not in header:
            raise DataError(f"{source}: missing column '{col}' in header (line {reader.line_num})")
    if schema.channel_columns is None:
        channels = [c for c in header if c not in (schema.subject_column, schema.label_column)]
    else:
        channels = list(schema.channel_columns)
        for c in channels:
            if c not in header:
                raise DataError(f"{source}: missing channel column '{c}' in header (line {reader.line_num})")
    if not channels:
        raise DataError(f"{source}: header has no channel columns")
    subj_i = header.index(schema.subject_column)
    label_i = header.index(schema.label_column)
    ch_i = [header.index(c) for c in channels]

    per_subject: dict[str, tuple[list, list]] = {}
    label_lines: list[tuple[str, int]] = []
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise DataError(f"{source}: line {line} has {len(row)} fields, header has {len(header)}")
        try:
            vals = [float(row[i]) for i in ch_i]
        except ValueError:
            bad = next(row[i] for i in ch_i if not _is_float(row[i]))
            raise DataError(f"{source}: non-numeric channel value '{bad}' at line {line}") from None
        subject = row[subj_i].strip()
        bucket = per_subject.setdefault(subject, ([], []))
        bucket[0].append(vals)
        bucket[1].append(len(label_lines))
        label_lines.append((row[label_i].strip(), line))
    if not label_lines:
        raise DataError(f"{source}: no data rows")

    class_names, codes = _map_labels([l for l, _ in label_lines], schema.class_names, label_lines, source)
    streams = [Stream(subject, np.asarray(vals, dtype=np.float64), codes[np.asarray(idx)])
               for subject, (vals, idx) in per_subject.items()]
    ds = RawDataset(schema.sampling_rate, streams, class_names, channels)
    ds.validate()
    return ds


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _map_labels(labels, table, label_lines, source):
    if table is not None:
        lookup = {name: i for i, name in enumerate(table)}
        codes = np.empty(len(labels), dtype=np.int64)
        for j, lab in enumerate(labels):
            if lab not in lookup:
                raise DataError(f"{source}: unknown label '{lab}' at line {label_lines[j][1]}")
            codes[j] = lookup[lab]
        return list(table), codes
    if all(lab.isdigit() for lab in labels):
        codes = np.asarray([int(lab) for lab in labels], dtype=np.int64)
        return [str(i) for i in range(int(codes.max()) + 1)], codes
    order: dict[str, int] = {}
    codes = np.asarray([order.setdefault(lab, len(order)) for lab in labels], dtype=np.int64)
    return list(order), codes


def to_csv_text(raw: RawDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject", *raw.channel_names, "label"])
    for s in raw.streams:
        for vals, lab in zip(s.values, s.labels):
            writer.writerow([s.subject, *(repr(float(v)) for v in vals), raw.class_names[lab]])
    return buf.getvalue()


def write_csv(raw: RawDataset, path) -> None:
    atomic_write_text(path, to_csv_text(raw))


# -- preprocessing -------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def window_geometry(sampling_rate: float, window_seconds: float, overlap: float) -> tuple[int, int]:
    """Return ``(window_samples, stride)`` for the given rate and window settings."""
    if not 0.0 <= overlap < 1.0:
        raise ConfigError("overlap", f"must lie in [0, 1), got {overlap}")
    s_w = _round_half_up(window_seconds * sampling_rate)
    if s_w < 1:
        raise ConfigError("window_seconds", f"{window_seconds} s at {sampling_rate} Hz is shorter than one sample")
    stride = max(1, _round_half_up(s_w * (1.0 - overlap)))
    return s_w, stride


def segment(raw: RawDataset, window_seconds: float, overlap: float, label_mode: str = "last") -> WindowedDataset:
    """Cut every stream into overlapping windows; never crosses stream boundaries.

    ``label_mode`` is ``"last"`` (label of the final sample) or ``"majority"``.
    """
    if label_mode not in ("last", "majority"):
        raise ConfigError("label_mode", f"must be 'last' or 'majority', got {label_mode!r}")
    s_w, stride = window_geometry(raw.sampling_rate, window_seconds, overlap)
    windows, labels, subjects = [], [], []
    for s in raw.streams:
        n = len(s)
        if n < s_w:
            warnings.warn(f"stream of subject {s.subject} has {n} samples, shorter than one "
                          f"{s_w}-sample window; it contributes no windows", stacklevel=2)
            continue
        count = (n - s_w) // stride + 1
        starts = np.arange(count) * stride
        idx = starts[:, None] + np.arange(s_w)
        windows.append(s.values[idx])
        if label_mode == "last":
            labels.append(s.labels[starts + s_w - 1])
        else:
            K = raw.num_classes
            labels.append(np.asarray([np.bincount(s.labels[i], minlength=K).argmax() for i in idx]))
        subjects.append(np.full(count, s.subject, dtype=object))
    C = raw.channels
    return WindowedDataset(
        windows=np.concatenate(windows) if windows else np.zeros((0, s_w, C)),
        labels=np.concatenate(labels).astype(np.int64) if labels else np.zeros(0, dtype=np.int64),
        subject_of=np.concatenate(subjects) if subjects else np.zeros(0, dtype=object),
        window_seconds=window_seconds,
        overlap=overlap,
        sampling_rate=raw.sampling_rate,
        class_names=list(raw.class_names),
    )


STD_FLOOR = 1e-8


def channel_stats(raw: RawDataset, subjects: Sequence[str], mode: str = "zscore") -> tuple[np.ndarray, np.ndarray]:
    """Per-channel ``(shift, scale)`` fitted on the listed subjects only."""
    chosen = [s.values for s in raw.streams if s.subject in set(subjects)]
    if not chosen:
        raise DataError(f"no streams found for normalisation subjects {list(subjects)}")
    data = np.concatenate(chosen)
    if mode == "zscore":
        return data.mean(axis=0), np.maximum(data.std(axis=0), STD_FLOOR)
    if mode == "minmax":
        lo, hi = data.min(axis=0), data.max(axis=0)
        return lo, np.maximum(hi - lo, STD_FLOOR)
    if mode == "none":
        C = data.shape[1]
        return np.zeros(C), np.ones(C)
    raise ConfigError("normalization", f"unknown mode {mode!r}")


def normalize(raw: RawDataset, stats_from: Sequence[str], mode: str = "zscore") -> RawDataset:
    shift, scale = channel_stats(raw, stats_from, mode)
    streams = [Stream(s.subject, (s.values - shift) / scale, s.labels) for s in raw.streams]
    return replace(raw, streams=streams)


# -- synthetic data ------------------------------------------------------------

def synth_generate(num_subjects: int, num_classes: int, sampling_rate: float, duration_seconds: float,
                   seed: int, channels: int = 3, segment_seconds: float = 20.0,
                   noise: float = 0.15) -> RawDataset:
    """Synthetic accelerometer-like streams, one per subject.

    Each class owns a per-channel offset, sinusoid frequency and amplitude.
    Subjects perform the classes in blocks of ``segment_seconds`` (a random
    class order, cycled; blocks shrink if the duration cannot fit every class) with their own gain, phase and frequency jitter, plus
    white noise.
    """
    for name, v in (("num_subjects", num_subjects), ("num_classes", num_classes),
                    ("sampling_rate", sampling_rate), ("duration_seconds", duration_seconds),
                    ("channels", channels), ("segment_seconds", segment_seconds)):
        if v <= 0:
            raise ConfigError(name, f"must be positive, got {v}")
    rng = np.random.default_rng(seed)
    freq = rng.uniform(0.5, 4.0, size=(num_classes, channels))
    amp = rng.uniform(0.5, 1.5, size=(num_classes, channels))
    offset = rng.normal(0.0, 1.0, size=(num_classes, channels))

    n = int(round(duration_seconds * sampling_rate))
    # shrink blocks so every class occurs in each stream
    seg = max(1, int(round(min(segment_seconds, duration_seconds / num_classes) * sampling_rate)))
    t = np.arange(n) / sampling_rate
    streams = []
    for subj in range(num_subjects):
        gain = rng.uniform(0.8, 1.2, size=channels)
        jitter = rng.uniform(0.9, 1.1, size=(num_classes, channels))
        phase = rng.uniform(0, 2 * np.pi, size=(num_classes, channels))
        order = rng.permutation(num_classes)
        labels = order[(np.arange(n) // seg) % num_classes]
        f = freq[labels] * jitter[labels]
        signal = offset[labels] + amp[labels] * np.sin(2 * np.pi * f * t[:, None] + phase[labels])
        values = gain * signal + rng.normal(0.0, noise, size=(n, channels))
        streams.append(Stream(f"s{subj + 1:02d}", values, labels.astype(np.int64)))
    return RawDataset(float(sampling_rate), streams,
                      [f"class_{k}" for k in range(num_classes)],
                      [f"acc_{'xyz'[c]}" if channels <= 3 else f"ch_{c}" for c in range(channels)])
