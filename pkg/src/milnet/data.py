"""Recordings, label files, minibatch samplers and a synthetic corpus.

Strong (timed) labels are carried for evaluation only; nothing in the
training path reads them.
"""

from __future__ import annotations

import csv
import json
import os
import queue
import threading
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter, resample_poly

from milnet import features as feat

MAX_DURATION_S = 5.0


class DataError(ValueError):
    pass


@dataclass
class Recording:
    id: str
    weak_labels: frozenset = frozenset()
    strong_labels: list | None = None
    path: str | None = None
    waveform: np.ndarray | None = None
    sample_rate: int = feat.SAMPLE_RATE

    @property
    def is_positive(self):
        return bool(self.weak_labels)

    @property
    def duration_s(self):
        if self.waveform is None:
            return None
        return self.waveform.size / self.sample_rate

    def check_consistency(self):
        if self.strong_labels is not None:
            strong = {c for _, _, c in self.strong_labels}
            if strong != set(self.weak_labels):
                raise DataError(f"{self.id}: weak labels {sorted(self.weak_labels)} disagree "
                                f"with strong labels {sorted(strong)}")

    def load_waveform(self):
        if self.waveform is None:
            if self.path is None:
                raise DataError(f"{self.id}: no waveform and no audio path")
            self.waveform, self.sample_rate = read_wav(self.path)
        return self.waveform


@dataclass
class DatasetSplit:
    train: list
    test: list
    classes: list

    def __post_init__(self):
        ids = [r.id for r in self.train] + [r.id for r in self.test]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise DataError(f"recordings listed more than once: {dup}")
        vocab = set(self.classes)
        missing = sorted({c for r in self.train + self.test for c in r.weak_labels} - vocab)
        if missing:
            raise DataError(f"labels missing from the class vocabulary: {missing}")

    @property
    def recordings(self):
        return self.train + self.test


# -- audio -------------------------------------------------------------------


def resample(samples, from_rate, to_rate=feat.SAMPLE_RATE):
    """Polyphase windowed-sinc resampling."""
    if from_rate == to_rate:
        return np.asarray(samples, dtype=np.float64)
    g = gcd(int(from_rate), int(to_rate))
    return resample_poly(np.asarray(samples, dtype=np.float64), to_rate // g, from_rate // g)


def read_wav(path, target_rate=feat.SAMPLE_RATE, max_duration=MAX_DURATION_S):
    """Mono float64 samples in [-1, 1] at ``target_rate``, cropped to
    ``max_duration`` seconds.  Multi-channel input is averaged."""
    try:
        rate, data = wavfile.read(path)
    except Exception as err:
        raise DataError(f"{path}: unreadable WAV ({err})") from None
    if data.dtype == np.int16:
        y = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        y = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        y = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype.kind == "f":
        y = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype}")
    if y.ndim == 2:
        y = y.mean(axis=1)
    y = resample(y, rate, target_rate)
    if max_duration is not None:
        y = y[:int(round(max_duration * target_rate))]
    return y, target_rate


def write_wav(path, samples, rate=feat.SAMPLE_RATE):
    y = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0 - 1.0 / 32768)
    wavfile.write(path, rate, np.round(y * 32768.0).astype("<i2"))


# -- label files -------------------------------------------------------------


def _read_rows(path):
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]


def read_weak_csv(path):
    """``filename,label1 label2 ...`` rows -> ordered {filename: labels}."""
    out, dups = {}, []
    for row in _read_rows(path):
        name = row[0].strip()
        labels = frozenset(row[1].split()) if len(row) > 1 else frozenset()
        if name in out:
            dups.append(name)
        out[name] = labels
    if dups:
        raise DataError(f"{path}: duplicate filenames {sorted(set(dups))}")
    return out


def read_strong_csv(path):
    """``filename,onset_s,offset_s,class`` rows -> {filename: [(on, off, cls)]}."""
    out = {}
    for row in _read_rows(path):
        if len(row) != 4:
            raise DataError(f"{path}: bad strong-label row {row}")
        name, on, off, cls = (c.strip() for c in row)
        on, off = float(on), float(off)
        if not 0 <= on < off:
            raise DataError(f"{path}: bad interval {on}..{off} for {name}")
        out.setdefault(name, []).append((on, off, cls))
    return out


def _rec_id(filename):
    return os.path.splitext(os.path.basename(filename))[0]


def read_split_listing(path):
    """``filename,train|test`` rows -> {filename: 'train'|'test'}."""
    out = {}
    for row in _read_rows(path):
        name, part = row[0].strip(), row[1].strip().lower()
        if part not in ("train", "test"):
            raise DataError(f"{path}: split must be train or test, got {part!r}")
        out[name] = part
    return out


def load_weak_labels(csv_path, split=None, first_n_train=None, moved_to_train=(),
                     audio_dir=None, strong_csv=None) -> DatasetSplit:
    """Build a DatasetSplit from a weak-label CSV.

    The train/test assignment is, in order of precedence: an explicit
    ``split`` listing ({filename: part} or a listing file), the first
    ``first_n_train`` rows plus ``moved_to_train`` as training data, or
    everything in train.  The class vocabulary is sorted
    lexicographically.
    """
    weak = read_weak_csv(csv_path)
    names = list(weak)
    if isinstance(split, (str, os.PathLike)):
        split = read_split_listing(split)
    if split is not None:
        unknown = sorted(set(split) - set(weak))
        if unknown:
            raise DataError(f"split listing names unknown files {unknown}")
        parts = {n: split.get(n, "train") for n in names}
    elif first_n_train is not None:
        moved = set(moved_to_train)
        unknown = sorted(moved - set(weak))
        if unknown:
            raise DataError(f"moved_to_train names unknown files {unknown}")
        parts = {n: "train" if i < first_n_train or n in moved else "test"
                 for i, n in enumerate(names)}
    else:
        parts = dict.fromkeys(names, "train")

    strong = read_strong_csv(strong_csv) if strong_csv else {}
    unknown = sorted(set(strong) - set(weak))
    if unknown:
        raise DataError(f"strong labels reference unknown files {unknown}")
    if audio_dir is not None:
        missing = sorted(n for n in names if not os.path.isfile(os.path.join(audio_dir, n)))
        if missing:
            raise DataError(f"audio files not found in {audio_dir}: {missing}")

    train, test = [], []
    for n in names:
        rec = Recording(
            id=_rec_id(n), weak_labels=weak[n],
            strong_labels=strong.get(n, [] if strong_csv else None),
            path=os.path.join(audio_dir, n) if audio_dir is not None else None)
        rec.check_consistency()
        (train if parts[n] == "train" else test).append(rec)
    classes = sorted({c for labels in weak.values() for c in labels})
    return DatasetSplit(train, test, classes)


# -- frame grids -------------------------------------------------------------


def rasterise(events, n_frames, sr=feat.SAMPLE_RATE, hop=feat.HOP):
    """Boolean activity per frame: frame i owns [i*hop, (i+1)*hop) samples
    and is active if at least half of that interval overlaps an event."""
    grid = np.zeros(n_frames, dtype=bool)
    step = hop / sr
    for on, off, *_ in events:
        a, b = on / step, off / step
        lo, hi = max(int(np.floor(a)), 0), min(int(np.ceil(b)), n_frames)
        for i in range(lo, hi):
            if min(b, i + 1) - max(a, i) >= 0.5:
                grid[i] = True
    return grid


def class_grid(events, classes, n_frames, sr=feat.SAMPLE_RATE, hop=feat.HOP):
    index = {c: k for k, c in enumerate(classes)}
    grid = np.zeros((n_frames, len(classes)), dtype=bool)
    for ev in events:
        grid[:, index[ev[2]]] |= rasterise([ev], n_frames, sr, hop)
    return grid


def grid_to_intervals(grid, sr=feat.SAMPLE_RATE, hop=feat.HOP):
    """Runs of active frames -> (onset_s, offset_s) on frame boundaries."""
    g = np.concatenate([[False], np.asarray(grid, dtype=bool), [False]])
    d = np.diff(g.astype(np.int8))
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    step = hop / sr
    return [(s * step, e * step) for s, e in zip(starts, ends)]


# -- feature sets and minibatches -------------------------------------------


@dataclass
class FeatureSet:
    """Stacked, padded features for a list of recordings."""
    ids: list
    features: np.ndarray        # N x T x F float32
    lengths: np.ndarray         # N unpadded frame counts
    when_labels: np.ndarray     # N, 0/1
    who_targets: np.ndarray     # N x L multi-hot
    classes: list
    strong_grids: np.ndarray | None = None   # N x T any-class activity

    def __len__(self):
        return len(self.ids)

    @property
    def masks(self):
        return np.arange(self.features.shape[1])[None, :] < self.lengths[:, None]

    def subset(self, idx):
        idx = np.asarray(idx)
        return FeatureSet([self.ids[i] for i in idx], self.features[idx], self.lengths[idx],
                          self.when_labels[idx], self.who_targets[idx], self.classes,
                          None if self.strong_grids is None else self.strong_grids[idx])


def build_feature_set(recordings, classes, target_T=None, extractor=None) -> FeatureSet:
    """Extract (or fetch via ``extractor(rec)``) features and stack them."""
    mats = []
    for rec in recordings:
        fm = extractor(rec) if extractor is not None else feat.extract_logmel(
            rec.load_waveform(), rec.sample_rate, rec.id)
        mats.append(fm)
    if target_T is None:
        target_T = max(m.frames for m in mats)
    mats = [feat.pad_or_crop(m, target_T) for m in mats]
    index = {c: k for k, c in enumerate(classes)}
    who = np.zeros((len(recordings), len(classes)), dtype=np.float32)
    for i, rec in enumerate(recordings):
        for c in rec.weak_labels:
            who[i, index[c]] = 1.0
    lengths = np.array([m.length for m in mats], dtype=np.int64)
    grids = None
    if recordings and all(r.strong_labels is not None for r in recordings):
        grids = np.stack([rasterise(r.strong_labels, target_T) for r in recordings])
        grids &= np.arange(target_T)[None, :] < lengths[:, None]
    return FeatureSet(
        ids=[r.id for r in recordings],
        features=np.stack([m.values for m in mats]) if mats else np.zeros((0, target_T, feat.N_MELS), np.float32),
        lengths=lengths,
        when_labels=np.array([r.is_positive for r in recordings], dtype=np.int64),
        who_targets=who, classes=list(classes), strong_grids=grids)


@dataclass
class Minibatch:
    index: np.ndarray
    features: np.ndarray
    masks: np.ndarray
    lengths: np.ndarray
    when_targets: np.ndarray
    who_targets: np.ndarray

    @property
    def size(self):
        return len(self.index)


def make_minibatch(fs: FeatureSet, idx) -> Minibatch:
    idx = np.asarray(idx, dtype=np.int64)
    lengths = fs.lengths[idx]
    masks = np.arange(fs.features.shape[1])[None, :] < lengths[:, None]
    return Minibatch(idx, fs.features[idx], masks, lengths, fs.when_labels[idx],
                     fs.who_targets[idx])


class HalfAndHalfSampler:
    """Balanced minibatches: half positive, half negative recordings.

    Each epoch walks a fresh permutation of the majority polarity, half a
    batch at a time, so every majority recording appears exactly once.
    The minority polarity fills the other half from a concatenation of
    fresh permutations, so it is duplicated as evenly as possible.  When
    the majority count is not a multiple of half a batch, the last batch
    is short but still balanced (e.g. 2 + 2).
    """

    salt = 1

    def __init__(self, is_positive, batch_size=8, seed=0):
        pos = np.asarray(is_positive, dtype=bool)
        if batch_size < 2 or batch_size % 2:
            raise ValueError(f"batch size must be a positive even number, got {batch_size}")
        self.positives = np.flatnonzero(pos)
        self.negatives = np.flatnonzero(~pos)
        if not len(self.positives) or not len(self.negatives):
            raise DataError("Half-and-Half sampling needs both positive and negative recordings")
        self.batch_size = batch_size
        self.seed = seed
        if len(self.positives) >= len(self.negatives):
            self.majority, self.minority = self.positives, self.negatives
        else:
            self.majority, self.minority = self.negatives, self.positives

    def __len__(self):
        half = self.batch_size // 2
        return -(-len(self.majority) // half)

    def epoch(self, e):
        rng = np.random.default_rng([self.seed, self.salt, e])
        half = self.batch_size // 2
        major = rng.permutation(self.majority)
        m = len(major)
        reps = -(-m // len(self.minority))
        minor = np.concatenate([rng.permutation(self.minority) for _ in range(reps)])[:m]
        batches = []
        for start in range(0, m, half):
            idx = np.concatenate([major[start:start + half], minor[start:start + half]])
            batches.append(rng.permutation(idx))
        return batches


class PlainSampler:
    """Uniform shuffle per epoch, sequential batches, short tail kept."""

    salt = 2

    def __init__(self, n, batch_size=8, seed=0):
        if n < 1:
            raise DataError("cannot sample from an empty training set")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed

    def __len__(self):
        return -(-self.n // self.batch_size)

    def epoch(self, e):
        order = np.random.default_rng([self.seed, self.salt, e]).permutation(self.n)
        return [order[i:i + self.batch_size] for i in range(0, self.n, self.batch_size)]


def make_sampler(mode, fs: FeatureSet, batch_size=8, seed=0):
    if mode == "hnh":
        return HalfAndHalfSampler(fs.when_labels.astype(bool), batch_size, seed)
    if mode == "plain":
        return PlainSampler(len(fs), batch_size, seed)
    raise ValueError(f"unknown input mode {mode!r}; expected 'hnh' or 'plain'")


def sample_hnh(fs: FeatureSet, batch_size=8, seed=0, epoch=0):
    for idx in HalfAndHalfSampler(fs.when_labels.astype(bool), batch_size, seed).epoch(epoch):
        yield make_minibatch(fs, idx)


def sample_plain(fs: FeatureSet, batch_size=8, seed=0, epoch=0):
    for idx in PlainSampler(len(fs), batch_size, seed).epoch(epoch):
        yield make_minibatch(fs, idx)


class Prefetcher:
    """Assemble minibatches on a worker thread through a bounded queue."""

    _done = object()

    def __init__(self, fs: FeatureSet, batches, capacity=2):
        self._queue = queue.Queue(maxsize=capacity)
        self._error = None
        self._thread = threading.Thread(target=self._run, args=(fs, list(batches)), daemon=True)
        self._thread.start()

    def _run(self, fs, batches):
        try:
            for idx in batches:
                self._queue.put(make_minibatch(fs, idx))
        except Exception as err:  # re-raised on the consumer side
            self._error = err
        self._queue.put(self._done)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._done:
                break
            yield item
        self._thread.join()
        if self._error is not None:
            raise self._error


# -- synthetic corpus --------------------------------------------------------


def class_frequency(c, num_classes, lo=600.0, hi=9000.0):
    if num_classes == 1:
        return lo
    return lo * (hi / lo) ** (c / (num_classes - 1))


def _noise(rng, n, level):
    # one-pole low-passed white noise, normalised to the requested rms
    white = rng.normal(size=n)
    coloured = lfilter([1.0], [1.0, -0.9], white)
    return coloured * (level / coloured.std())


def _motif(rng, freq, n, sr):
    t = np.arange(n) / sr
    sweep = 1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(3, 8) * t)
    phase = 2 * np.pi * freq * np.cumsum(sweep) / sr
    tone = np.sin(phase) + 0.4 * np.sin(2 * phase)
    ramp = min(int(0.01 * sr), n // 2)
    env = np.ones(n)
    if ramp:
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
    return tone * env


def synth_dataset(num_classes, num_recordings, pos_fraction, seed, num_test=0,
                  duration_s=MAX_DURATION_S, sr=feat.SAMPLE_RATE) -> DatasetSplit:
    """Noise-only negatives and positives with 1-3 tone-burst events.

    Every class owns a distinct base frequency.  Strong labels are exact
    by construction; weak labels are derived from them.  The last
    ``num_test`` recordings form the test split.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if not 0 <= pos_fraction <= 1:
        raise ValueError(f"pos_fraction must lie in [0, 1], got {pos_fraction}")
    if not 0 <= num_test <= num_recordings:
        raise ValueError(f"num_test must lie in [0, {num_recordings}]")
    rng = np.random.default_rng(seed)
    classes = [f"c{k:02d}" for k in range(num_classes)]
    n = int(round(duration_s * sr))
    n_pos = int(round(pos_fraction * num_recordings))
    polarity = rng.permutation(np.arange(num_recordings) < n_pos)
    recs = []
    for i in range(num_recordings):
        y = _noise(rng, n, rng.uniform(0.01, 0.03))
        events = []
        if polarity[i]:
            for _ in range(int(rng.integers(1, 4))):
                c = int(rng.integers(num_classes))
                dur = rng.uniform(0.3, min(1.0, duration_s))
                on = rng.uniform(0, duration_s - dur)
                start = int(round(on * sr))
                length = min(int(round(dur * sr)), n - start)
                amp = rng.uniform(0.15, 0.3)
                y[start:start + length] += amp * _motif(
                    rng, class_frequency(c, num_classes), length, sr)
                events.append((start / sr, (start + length) / sr, classes[c]))
            events.sort()
        peak = np.abs(y).max()
        if peak > 0.99:
            y *= 0.99 / peak
        recs.append(Recording(id=f"rec{i:04d}", weak_labels=frozenset(c for *_, c in events),
                              strong_labels=events, waveform=y, sample_rate=sr,
                              path=None))
    n_train = num_recordings - num_test
    return DatasetSplit(recs[:n_train], recs[n_train:], classes)


WEAK_CSV = "weak_labels.csv"
STRONG_CSV = "strong_labels.csv"
MANIFEST = "manifest.json"
AUDIO_DIR = "audio"


def write_dataset(split: DatasetSplit, out_dir, extra=None):
    """WAVs under ``audio/``, the weak and strong CSVs and a manifest
    naming the split and class vocabulary."""
    out = Path(out_dir)
    try:
        (out / AUDIO_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataError(f"cannot write to {out}: {err}") from None
    weak_rows, strong_rows = [], []
    for rec in split.recordings:
        fname = f"{rec.id}.wav"
        write_wav(out / AUDIO_DIR / fname, rec.load_waveform(), rec.sample_rate)
        weak_rows.append([fname, " ".join(sorted(rec.weak_labels))])
        for on, off, c in rec.strong_labels or []:
            strong_rows.append([fname, f"{on:.6f}", f"{off:.6f}", c])
    for name, rows in ((WEAK_CSV, weak_rows), (STRONG_CSV, strong_rows)):
        with open(out / name, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
    manifest = {"classes": split.classes,
                "train": [f"{r.id}.wav" for r in split.train],
                "test": [f"{r.id}.wav" for r in split.test]}
    if extra:
        manifest.update(extra)
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def load_dataset(data_dir) -> DatasetSplit:
    """Read a dataset directory written by :func:`write_dataset` (or any
    directory with ``weak_labels.csv`` and ``audio/``)."""
    d = Path(data_dir)
    weak = d / WEAK_CSV
    if not weak.is_file():
        raise DataError(f"{d}: missing {WEAK_CSV}")
    strong = d / STRONG_CSV
    split, classes = None, None
    if (d / MANIFEST).is_file():
        manifest = json.loads((d / MANIFEST).read_text())
        split = {n: "train" for n in manifest.get("train", [])}
        split.update({n: "test" for n in manifest.get("test", [])})
        classes = manifest.get("classes")
    ds = load_weak_labels(weak, split=split or None, audio_dir=d / AUDIO_DIR,
                          strong_csv=strong if strong.is_file() else None)
    if classes:
        ds = DatasetSplit(ds.train, ds.test, list(classes))
    return ds
