"""Dataset handling: CSV ingestion, label codec, window cache, stratified
5-fold splitting, class weights, and the deterministic synthetic generator
that stands in for the private study data.

Sedentary labels: AL, E, R, S (codes 0..3; OTHER is ingested but excluded
from modeling). Social labels: A, WSEIC, WSNEIC (codes 0..2).
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import dsp
from .errors import ConfigError, InputError, IntegrityError, ParseError

SED_CLASSES = ("AL", "E", "R", "S")
SOC_CLASSES = ("A", "WSEIC", "WSNEIC")
SED_CODE = {name: i for i, name in enumerate(SED_CLASSES)}
SOC_CODE = {name: i for i, name in enumerate(SOC_CLASSES)}
NUM_SED = len(SED_CLASSES)
NUM_SOC = len(SOC_CLASSES)
NUM_JOINT = NUM_SED * NUM_SOC
OTHER_LABEL = "OTHER"
OTHER_CODE = -1  # sedentary "Other Activity": kept at ingestion, not modeled

CSV_HEADER = (
    "segment_id,participant_id,timestamp_ms,"
    "ax,ay,az,gx,gy,gz,mx,my,mz,qx,qy,qz,qw,"
    "sedentary_label,social_label"
)

CACHE_MAGIC = b"SSCD"
CACHE_VERSION = 1


@dataclass
class RawRecording:
    """One 60 s, 50 Hz segment with its two self-report labels."""

    segment_id: str
    participant_id: str
    segment: dsp.SensorSegment
    sedentary_label: str
    social_label: str


@dataclass
class LabeledWindow:
    """A 13 x 100 feature window with encoded labels."""

    features: np.ndarray
    sed: int
    soc: int
    participant_id: str
    source_segment_id: str = ""


@dataclass
class FoldSplit:
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray


@dataclass
class SplitPlan:
    k: int
    fold_of: np.ndarray  # window index -> test-fold index
    folds: list[FoldSplit]

    def split_hash(self):
        return hashlib.sha256(self.fold_of.astype(np.int64).tobytes()).hexdigest()


@dataclass
class ClassWeights:
    sed: np.ndarray
    soc: np.ndarray


@dataclass
class SynthConfig:
    samples_per_joint_class: int
    noise_std: float = 0.0
    coupling: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_joint_class < 1:
            raise ConfigError("samples_per_joint_class must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("coupling must lie in [0, 1]")


# -- label codec ---------------------------------------------------------------


def encode_labels(sedentary_label, social_label):
    """(sed, soc) codes, or None when the sedentary label is OTHER."""
    if social_label not in SOC_CODE:
        raise ParseError(f"unknown social label {social_label!r}")
    if sedentary_label == OTHER_LABEL:
        return None
    if sedentary_label not in SED_CODE:
        raise ParseError(f"unknown sedentary label {sedentary_label!r}")
    return SED_CODE[sedentary_label], SOC_CODE[social_label]


def decode_labels(sed, soc):
    return SED_CLASSES[sed], SOC_CLASSES[soc]


def joint_class(sed, soc):
    return sed * NUM_SOC + soc


# -- CSV ingestion --------------------------------------------------------------


def load_recordings(path):
    """Parse the segment CSV into RawRecordings, one per segment_id.

    Rows are interpolated onto the uniform 50 Hz grid anchored at each
    segment's first timestamp (gap repair); a repaired segment must land
    within one sample of 60 s.
    """
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row", line=1) from None
        if ",".join(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(f"unexpected header {','.join(header)!r}", line=1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 18:
                raise ParseError(f"expected 18 fields, got {len(row)}", line=line_no)
            seg_id, pid = row[0], row[1]
            try:
                ts = float(row[2])
                values = [float(v) for v in row[3:16]]
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", line=line_no) from None
            sed_label, soc_label = row[16].strip(), row[17].strip()
            if sed_label not in SED_CODE and sed_label != OTHER_LABEL:
                raise ParseError(f"unknown sedentary label {sed_label!r}", line=line_no)
            if soc_label not in SOC_CODE:
                raise ParseError(f"unknown social label {soc_label!r}", line=line_no)
            groups.setdefault(seg_id, []).append(
                (line_no, ts, values, pid, sed_label, soc_label)
            )

    recordings = []
    for seg_id, rows in groups.items():
        _, ts0, _, pid, sed_label, soc_label = rows[0]
        times = np.array([r[1] for r in rows])
        if np.any(np.diff(times) <= 0):
            bad = int(np.argmax(np.diff(times) <= 0))
            raise IntegrityError(
                f"segment {seg_id!r}: timestamps not strictly increasing "
                f"near row {rows[bad + 1][0]}"
            )
        for line_no, _, _, row_pid, row_sed, row_soc in rows:
            if (row_pid, row_sed, row_soc) != (pid, sed_label, soc_label):
                raise IntegrityError(
                    f"segment {seg_id!r}: inconsistent participant/labels "
                    f"at line {line_no}"
                )
        data = np.array([r[2] for r in rows]).T  # 13 x n_rows
        duration_ms = times[-1] - times[0]
        n = int(round(duration_ms / 20.0)) + 1
        if abs(n - 3000) > 1:
            raise IntegrityError(
                f"segment {seg_id!r}: {n} samples after gap repair, "
                "expected 3000 +/- 1 (60 s at 50 Hz)"
            )
        grid = times[0] + 20.0 * np.arange(n)
        channels = np.vstack([np.interp(grid, times, row) for row in data])
        segment = dsp.SensorSegment(channels, 50.0, start_time=times[0] / 1000.0)
        recordings.append(RawRecording(seg_id, pid, segment, sed_label, soc_label))
    return recordings


def write_recordings_csv(path, recordings):
    """Inverse of load_recordings for nominal (gap-free) segments."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER.split(","))
        for rec in recordings:
            t0_ms = rec.segment.start_time * 1000.0
            for i in range(rec.segment.channels.shape[1]):
                writer.writerow(
                    [rec.segment_id, rec.participant_id, f"{t0_ms + 20.0 * i:.1f}"]
                    + [repr(float(v)) for v in rec.segment.channels[:, i]]
                    + [rec.sedentary_label, rec.social_label]
                )


def windows_from_recordings(recordings, keep_other=False):
    """Run the full conditioning pipeline and window each recording.

    OTHER-labeled recordings are dropped unless keep_other is set, in which
    case their windows carry sed = -1 and must be filtered before modeling.
    """
    windows = []
    for rec in recordings:
        encoded = encode_labels(rec.sedentary_label, rec.social_label)
        if encoded is None:
            if not keep_other:
                continue
            sed, soc = OTHER_CODE, SOC_CODE[rec.social_label]
        else:
            sed, soc = encoded
        conditioned = dsp.resample_50_to_40(dsp.preprocess_segment(rec.segment))
        for mat in dsp.segment_windows(conditioned.channels):
            windows.append(
                LabeledWindow(mat, sed, soc, rec.participant_id, rec.segment_id)
            )
    return windows


# -- window cache (flat binary) --------------------------------------------------


def write_window_cache(path, windows):
    """magic 'SSCD', u16 version, u32 count, then per window:
    13x100 little-endian f64, sed u8, soc u8, u16-length-prefixed UTF-8 pid.
    """
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<HI", CACHE_VERSION, len(windows)))
        for w in windows:
            feats = np.ascontiguousarray(w.features, dtype="<f8")
            if feats.shape != (dsp.NUM_CHANNELS, dsp.WINDOW_LEN):
                raise InputError(f"window features must be 13x100, got {feats.shape}")
            fh.write(feats.tobytes())
            pid = w.participant_id.encode("utf-8")
            sed_byte = 255 if w.sed == OTHER_CODE else w.sed
            fh.write(struct.pack("<BBH", sed_byte, w.soc, len(pid)))
            fh.write(pid)


def read_window_cache(path):
    block = dsp.NUM_CHANNELS * dsp.WINDOW_LEN * 8
    windows = []
    with open(path, "rb") as fh:
        if fh.read(4) != CACHE_MAGIC:
            raise ParseError(f"{path}: not a window cache (bad magic)")
        version, count = struct.unpack("<HI", fh.read(6))
        if version != CACHE_VERSION:
            raise ParseError(f"{path}: unsupported cache version {version}")
        for _ in range(count):
            raw = fh.read(block)
            if len(raw) != block:
                raise ParseError(f"{path}: truncated feature block")
            feats = np.frombuffer(raw, dtype="<f8").reshape(
                dsp.NUM_CHANNELS, dsp.WINDOW_LEN
            )
            sed_byte, soc, pid_len = struct.unpack("<BBH", fh.read(4))
            pid = fh.read(pid_len).decode("utf-8")
            sed = OTHER_CODE if sed_byte == 255 else int(sed_byte)
            windows.append(LabeledWindow(feats.copy(), sed, int(soc), pid))
    return windows


def window_arrays(windows):
    """(features (N,13,100), sed (N,), soc (N,), pids list) from windows."""
    feats = np.stack([w.features for w in windows]) if windows else np.zeros((0, 13, 100))
    sed = np.array([w.sed for w in windows], dtype=np.int64)
    soc = np.array([w.soc for w in windows], dtype=np.int64)
    pids = [w.participant_id for w in windows]
    return feats, sed, soc, pids


# -- stratified k-fold ------------------------------------------------------------


def stratified_kfold(sed, soc, k=5, seed=0, val_fraction=0.2, participant_ids=None):
    """Stratified k-fold plan on the joint (sed, soc) label.

    Each fold's held-out windows are its test split; validation is carved
    out of the remaining pool (val_fraction of it, stratified). When
    participant_ids is given, whole participants are assigned to folds
    instead (leakage-strict mode; stratification becomes best-effort).
    """
    sed = np.asarray(sed)
    soc = np.asarray(soc)
    n = len(sed)
    joint = sed * NUM_SOC + soc
    rng = np.random.default_rng(seed)

    if participant_ids is not None:
        fold_of = _grouped_assignment(participant_ids, k, rng)
    else:
        fold_of = np.empty(n, dtype=np.int64)
        offset = 0
        for cls in range(NUM_JOINT):
            idx = np.flatnonzero(joint == cls)
            if len(idx) < k:
                sed_c, soc_c = divmod(cls, NUM_SOC)
                raise ConfigError(
                    f"joint class {decode_labels(sed_c, soc_c)} has only "
                    f"{len(idx)} samples, need >= {k} for {k}-fold splits"
                )
            idx = rng.permutation(idx)
            for j, window in enumerate(idx):
                fold_of[window] = (offset + j) % k
            offset = (offset + len(idx)) % k

    folds = []
    for f in range(k):
        test_ids = np.flatnonzero(fold_of == f)
        pool = np.flatnonzero(fold_of != f)
        if participant_ids is not None:
            val_ids, train_ids = _grouped_validation(
                pool, participant_ids, val_fraction, rng
            )
        else:
            val_ids, train_ids = _stratified_validation(
                pool, joint, val_fraction, rng
            )
        folds.append(
            FoldSplit(np.sort(train_ids), np.sort(val_ids), np.sort(test_ids))
        )
    return SplitPlan(k, fold_of, folds)


def _stratified_validation(pool, joint, val_fraction, rng):
    target = int(round(val_fraction * len(pool)))
    per_class = []
    for cls in np.unique(joint[pool]):
        members = rng.permutation(pool[joint[pool] == cls])
        quota = val_fraction * len(members)
        per_class.append((cls, members, int(quota), quota - int(quota)))
    taken = sum(base for _, _, base, _ in per_class)
    # largest-remainder apportionment up to the pool-level target
    order = sorted(per_class, key=lambda item: (-item[3], item[0]))
    extras = {cls: 0 for cls, *_ in per_class}
    i = 0
    while taken < target and i < len(order):
        extras[order[i][0]] += 1
        taken += 1
        i += 1
    val = np.concatenate(
        [members[: base + extras[cls]] for cls, members, base, _ in per_class]
    ).astype(np.int64)
    train = np.setdiff1d(pool, val)
    return val, train


def _grouped_assignment(participant_ids, k, rng):
    pids = np.asarray(participant_ids)
    unique = sorted(set(pids))
    order = rng.permutation(len(unique))
    counts = np.zeros(k, dtype=np.int64)
    fold_of = np.empty(len(pids), dtype=np.int64)
    sizes = {p: int(np.sum(pids == p)) for p in unique}
    for pos in sorted(order, key=lambda i: -sizes[unique[i]]):
        pid = unique[pos]
        f = int(np.argmin(counts))
        counts[f] += sizes[pid]
        fold_of[pids == pid] = f
    return fold_of


def _grouped_validation(pool, participant_ids, val_fraction, rng):
    pids = np.asarray(participant_ids)
    unique = sorted(set(pids[pool]))
    order = rng.permutation(len(unique))
    target = val_fraction * len(pool)
    val_pids = set()
    taken = 0
    for pos in order:
        if taken >= target:
            break
        pid = unique[pos]
        val_pids.add(pid)
        taken += int(np.sum(pids[pool] == pid))
    val = pool[np.isin(pids[pool], sorted(val_pids))]
    train = np.setdiff1d(pool, val)
    return val.astype(np.int64), train


def class_weights(train_labels, num_classes):
    """Balanced inverse-frequency weights w_k = N / (K * n_k)."""
    labels = np.asarray(train_labels)
    if labels.size == 0:
        raise ConfigError("cannot compute class weights from an empty split")
    counts = np.bincount(labels, minlength=num_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ConfigError(
            f"class(es) {missing.tolist()} absent from the training split"
        )
    return labels.size / (num_classes * counts.astype(np.float64))


def fold_class_weights(sed_train, soc_train):
    return ClassWeights(
        class_weights(sed_train, NUM_SED), class_weights(soc_train, NUM_SOC)
    )


# -- synthetic generator -----------------------------------------------------------

# sedentary class -> tone frequency on channels 0-5; per-window amplitude
# jitter defeats pure band-energy readouts and rewards temporal models
SED_FREQ_HZ = (1.0, 2.0, 3.0, 4.0)
SED_TONE_AMPLITUDE = 1.0
SED_TONE_JITTER = 0.25
# social class -> carrier amplitude on channels 6-12, observed through a
# per-window gain (small enough to keep noise-free classes separable); the
# coupling leak carries the true class amplitude, so the other task's
# channels disambiguate gain-corrupted observations
SOC_AMPLITUDE = (0.5, 1.0, 1.5)
SOC_GAIN_JITTER = 0.18
SOC_CARRIER_HZ = 5.0
# the leak arrives as a burst over a random sub-interval, so exploiting it
# requires locating it in the other task's sequence
LEAK_BURST_FRACTION = 0.4
_SYNTH_PARTICIPANTS = 8


def synth_windows(config):
    """Deterministic 13x100 windows at 40 Hz, one per (joint class, index).

    Sedentary class sets the tone frequency on channels 0-5; social class
    sets the carrier amplitude on channels 6-12; `coupling` leaks the
    social carrier onto channels 0-5.
    """
    rng = np.random.default_rng(config.seed)
    t = np.arange(dsp.WINDOW_LEN) / 40.0
    windows = []
    idx = 0
    for sed in range(NUM_SED):
        for soc in range(NUM_SOC):
            for i in range(config.samples_per_joint_class):
                feats = _synth_signal(rng, t, sed, soc, config)
                pid = f"p{idx % _SYNTH_PARTICIPANTS:02d}"
                windows.append(
                    LabeledWindow(feats, sed, soc, pid, f"synth-{sed}{soc}-{i:04d}")
                )
                idx += 1
    return windows


def synth_recordings(config):
    """Raw 60 s, 50 Hz recordings with the same class structure.

    Accelerometer rows ride on a 9.81 gravity offset on the z axis so the
    conditioning pipeline has something to remove.
    """
    rng = np.random.default_rng(config.seed)
    t = np.arange(3000) / 50.0
    recordings = []
    idx = 0
    for sed in range(NUM_SED):
        for soc in range(NUM_SOC):
            for i in range(config.samples_per_joint_class):
                feats = _synth_signal(rng, t, sed, soc, config)
                feats[2] += 9.81
                pid = f"p{idx % _SYNTH_PARTICIPANTS:02d}"
                seg_id = f"synth-{sed}{soc}-{i:04d}"
                recordings.append(
                    RawRecording(
                        seg_id,
                        pid,
                        dsp.SensorSegment(feats, 50.0),
                        SED_CLASSES[sed],
                        SOC_CLASSES[soc],
                    )
                )
                idx += 1
    return recordings


def _synth_signal(rng, t, sed, soc, config):
    feats = np.empty((dsp.NUM_CHANNELS, len(t)))
    freq = SED_FREQ_HZ[sed]
    tone_amp = SED_TONE_AMPLITUDE * rng.uniform(1 - SED_TONE_JITTER, 1 + SED_TONE_JITTER)
    base_amp = SOC_AMPLITUDE[soc]
    gain = rng.uniform(1 - SOC_GAIN_JITTER, 1 + SOC_GAIN_JITTER)
    # one phase per underlying process, with small per-channel jitter
    tone_phase = rng.uniform(0, 2 * np.pi)
    masker_freq = rng.uniform(*MASKER_FREQ_RANGE_HZ)
    masker_phase = rng.uniform(0, 2 * np.pi)
    masker_len = max(1, int(MASKER_FRACTION * len(t)))
    masker_start = int(rng.integers(0, len(t) - masker_len + 1))
    masker_on = np.zeros(len(t))
    masker_on[masker_start : masker_start + masker_len] = 1.0
    masker = MASKER_RELATIVE_AMP * tone_amp * masker_on * np.sin(
        2 * np.pi * masker_freq * t + masker_phase
    )
    for ch in range(6):
        feats[ch] = tone_amp * np.sin(
            2 * np.pi * freq * t + tone_phase + rng.uniform(0, 0.5)
        ) + masker
    carrier_phase = rng.uniform(0, 2 * np.pi)
    for ch in range(6, 13):
        feats[ch] = base_amp * gain * np.sin(
            2 * np.pi * SOC_CARRIER_HZ * t + carrier_phase + rng.uniform(0, 0.5)
        )
    if config.coupling > 0:
        # the leak is phase-coherent with the social carrier and carries the
        # true class amplitude: cross-task evidence that resolves the
        # gain-ambiguous observation on channels 6-12
        leak = config.coupling * base_amp * np.sin(
            2 * np.pi * SOC_CARRIER_HZ * t + carrier_phase
        )
        burst = max(1, int(LEAK_BURST_FRACTION * len(t)))
        start = int(rng.integers(0, len(t) - burst + 1))
        window = np.zeros(len(t))
        window[start : start + burst] = 1.0
        feats[:6] += leak * window
    if config.noise_std > 0:
        feats += rng.normal(0.0, config.noise_std, feats.shape)
    return feats
