"""Spectrum representation, preprocessing, dataset manifests, and synthetic data.

A spectrum is an intensity vector on a strictly increasing wavenumber axis
(cm^-1). Preprocessing cuts everything below the laser-line region and
rescales the remainder into [0, 1]. Dataset manifests declare each class as
known / ignored / never-seen and bind spectrum files (or inline data) to
train/test splits; never-seen classes exist only at test time.

All operations here are pure or work on caller-owned data; nothing holds
shared mutable state.
"""

from __future__ import annotations

import csv
import enum
import fnmatch
import math
from configparser import ConfigParser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetError, ParseError

DEFAULT_CUT_BELOW = 150.0     # cm^-1, typical edge-filter cutoff for 532 nm systems
DEFAULT_GRID_BINS = 1024
DEFAULT_WAVENUMBER_RANGE = (200.0, 3200.0)
DEFAULT_TRAIN_FRACTION = 5.0 / 6.0


class ClassRole(enum.IntEnum):
    """How a class participates in training and testing.

    KNOWN classes are what the network identifies. IGNORED classes appear in
    training only as teach-to-reject examples. NEVER_SEEN classes must not
    appear in any training batch; they exist to measure false positives.
    """

    KNOWN = 0
    IGNORED = 1
    NEVER_SEEN = 2

    @classmethod
    def parse(cls, text: str) -> "ClassRole":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise DatasetError(f"unknown class role {text!r}")

    def __str__(self) -> str:
        return self.name.lower()


class Split(enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass
class Spectrum:
    """One intensity vector on a strictly increasing wavenumber axis."""

    wavenumbers: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        self.wavenumbers = np.asarray(self.wavenumbers, dtype=np.float64)
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.wavenumbers.ndim != 1 or self.intensities.ndim != 1:
            raise DatasetError("spectrum axes must be 1-D")
        if len(self.wavenumbers) != len(self.intensities):
            raise DatasetError(
                f"axis length {len(self.wavenumbers)} != intensity length {len(self.intensities)}")
        if len(self.wavenumbers) == 0:
            raise DatasetError("empty spectrum")
        if np.any(np.diff(self.wavenumbers) <= 0):
            raise DatasetError("wavenumbers must be strictly increasing")

    def __len__(self) -> int:
        return len(self.wavenumbers)


def preprocess(raw: Spectrum, cut_below: float = DEFAULT_CUT_BELOW) -> Spectrum:
    """Drop all bins below ``cut_below`` and min-max rescale into [0, 1].

    The rescale is exact: the minimum maps to 0 and the maximum to 1. A
    constant spectrum maps to all zeros (it carries no class information).
    Idempotent on spectra that are already cut and normalized.
    """
    if cut_below >= raw.wavenumbers[-1]:
        raise DatasetError(f"cut at {cut_below} cm^-1 leaves spectrum empty after cut")
    keep = raw.wavenumbers >= cut_below
    wn = raw.wavenumbers[keep]
    inten = raw.intensities[keep]
    if len(wn) == 0:
        raise DatasetError(f"cut at {cut_below} cm^-1 leaves spectrum empty after cut")
    if len(wn) < 2:
        raise DatasetError(f"cut at {cut_below} cm^-1 leaves only one bin")
    lo, hi = inten.min(), inten.max()
    if hi > lo:
        scaled = (inten - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(inten)
    return Spectrum(wn, scaled)


# ---------------------------------------------------------------------------
# records, manifests, splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestClass:
    class_id: str
    name: str
    role: ClassRole


@dataclass(frozen=True)
class Record:
    """One spectrum bound to a class; ``source`` is a file path or inline data."""

    source: str | Spectrum
    class_id: str
    role: ClassRole
    split: Split | None = None

    @property
    def sample_id(self) -> str:
        if isinstance(self.source, str):
            return self.source
        return f"{self.class_id}/inline-{id(self.source):x}"


def split_dataset(records: Sequence[Record], train_fraction: float, seed: int,
                  ) -> tuple[list[Record], list[Record]]:
    """Stratified per-class train/test split, deterministic for a fixed seed.

    Train counts round down (floor, with a one-ulp guard so 6 * 5/6 lands on
    5); the remainder goes to the test set. Never-seen classes go entirely to
    the test set regardless of the fraction.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train fraction must be in (0, 1), got {train_fraction}")
    by_class: dict[str, list[Record]] = {}
    for rec in records:
        by_class.setdefault(rec.class_id, []).append(rec)

    rng = np.random.default_rng(seed)
    train: list[Record] = []
    test: list[Record] = []
    for class_id in sorted(by_class):
        group = by_class[class_id]
        role = group[0].role
        if role == ClassRole.NEVER_SEEN:
            test.extend(replace(r, split=Split.TEST) for r in group)
            continue
        if role == ClassRole.KNOWN and len(group) < 2:
            raise DatasetError(f"known class {class_id!r} has {len(group)} record(s); cannot stratify")
        n_train = math.floor(len(group) * train_fraction + 1e-9)
        order = rng.permutation(len(group))
        for pos, idx in enumerate(order):
            if pos < n_train:
                train.append(replace(group[idx], split=Split.TRAIN))
            else:
                test.append(replace(group[idx], split=Split.TEST))
    return train, test


@dataclass
class DatasetManifest:
    """Declares classes with roles and binds records to train/test splits."""

    classes: list[ManifestClass]
    records: list[Record]
    train_fraction: float = DEFAULT_TRAIN_FRACTION
    seed: int = 0
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate class ids in manifest")
        roles = {c.class_id: c.role for c in self.classes}
        if self.known_class_count < 2:
            raise DatasetError(f"need at least 2 known classes, have {self.known_class_count}")
        counts: dict[str, dict[Split, int]] = {}
        for rec in self.records:
            if rec.class_id not in roles:
                raise DatasetError(f"record references undeclared class {rec.class_id!r}")
            if rec.role != roles[rec.class_id]:
                raise DatasetError(f"record role for {rec.class_id!r} disagrees with class declaration")
            if rec.split is None:
                raise DatasetError(f"record for {rec.class_id!r} has no split assigned")
            if rec.role == ClassRole.NEVER_SEEN and rec.split != Split.TEST:
                raise DatasetError(f"never-seen class {rec.class_id!r} has a training record")
            counts.setdefault(rec.class_id, {Split.TRAIN: 0, Split.TEST: 0})[rec.split] += 1
        for class_id, by_split in counts.items():
            if roles[class_id] == ClassRole.NEVER_SEEN:
                continue
            total = by_split[Split.TRAIN] + by_split[Split.TEST]
            expected = total * self.train_fraction
            if abs(by_split[Split.TRAIN] - expected) > 1.0 + 1e-9:
                raise DatasetError(
                    f"class {class_id!r}: {by_split[Split.TRAIN]}/{total} training records is more than "
                    f"one record away from fraction {self.train_fraction}")

    @property
    def known_ids(self) -> list[str]:
        return [c.class_id for c in self.classes if c.role == ClassRole.KNOWN]

    @property
    def known_class_count(self) -> int:
        return len(self.known_ids)

    def role_of(self, class_id: str) -> ClassRole:
        for c in self.classes:
            if c.class_id == class_id:
                return c.role
        raise DatasetError(f"unknown class {class_id!r}")

    def records_for(self, split: Split) -> list[Record]:
        return [r for r in self.records if r.split == split]


# ---------------------------------------------------------------------------
# synthetic spectra
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticClassProfile:
    """Gaussian-peak recipe for one synthetic class.

    Per-sample jitter: peak positions move by a normal draw of sd
    ``position_jitter`` (cm^-1); widths and amplitudes are scaled by
    1 + jitter * z, floored at 0.05 to stay positive.
    """

    peak_positions: tuple[float, ...]
    peak_widths: tuple[float, ...]
    peak_amplitudes: tuple[float, ...]
    baseline_slope: float = 0.0
    baseline_offset: float = 0.0
    noise_sigma: float = 0.0
    position_jitter: float = 0.0
    width_jitter: float = 0.0
    amplitude_jitter: float = 0.0

    def __post_init__(self):
        n = len(self.peak_positions)
        if len(self.peak_widths) != n or len(self.peak_amplitudes) != n:
            raise DatasetError("peak positions, widths, and amplitudes must have equal length")
        if any(w <= 0 for w in self.peak_widths):
            raise DatasetError("peak widths must be positive")
        if any(a <= 0 for a in self.peak_amplitudes):
            raise DatasetError("peak amplitudes must be positive")
        if self.noise_sigma < 0:
            raise DatasetError("noise sigma must be nonnegative")


def default_grid(bins: int = DEFAULT_GRID_BINS,
                 wavenumber_range: tuple[float, float] = DEFAULT_WAVENUMBER_RANGE) -> np.ndarray:
    lo, hi = wavenumber_range
    return np.linspace(lo, hi, bins)


def generate_synthetic(profile: SyntheticClassProfile, n: int, seed: int,
                       wavenumbers: np.ndarray | None = None) -> list[Spectrum]:
    """Draw ``n`` spectra from a class profile, deterministic per (profile, seed).

    Each sample is a sum of jittered Gaussian peaks plus a linear baseline and
    i.i.d. Gaussian noise. With zero noise and zero jitter the result is a
    pure function of the profile.
    """
    if n < 1:
        raise DatasetError(f"need n >= 1, got {n}")
    wn = default_grid() if wavenumbers is None else np.asarray(wavenumbers, dtype=np.float64)
    for p in profile.peak_positions:
        if not wn[0] <= p <= wn[-1]:
            raise DatasetError(f"peak at {p} cm^-1 outside grid [{wn[0]}, {wn[-1]}]")

    rng = np.random.default_rng(seed)
    positions = np.asarray(profile.peak_positions)
    widths = np.asarray(profile.peak_widths)
    amplitudes = np.asarray(profile.peak_amplitudes)
    out = []
    for _ in range(n):
        pos = positions + rng.normal(0.0, 1.0, size=len(positions)) * profile.position_jitter
        wid = widths * np.maximum(0.05, 1.0 + rng.normal(0.0, 1.0, size=len(widths)) * profile.width_jitter)
        amp = amplitudes * np.maximum(0.05, 1.0 + rng.normal(0.0, 1.0, size=len(amplitudes)) * profile.amplitude_jitter)
        y = profile.baseline_offset + profile.baseline_slope * (wn - wn[0])
        for p, w, a in zip(pos, wid, amp):
            y = y + a * np.exp(-0.5 * ((wn - p) / w) ** 2)
        if profile.noise_sigma > 0:
            y = y + rng.normal(0.0, profile.noise_sigma, size=len(wn))
        out.append(Spectrum(wn.copy(), y))
    return out


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

CSV_HEADER = ("wavenumber", "intensity")


def write_csv(path, spectrum: Spectrum) -> None:
    """Write one spectrum as ``wavenumber,intensity`` rows (9 significant digits)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for w, i in zip(spectrum.wavenumbers, spectrum.intensities):
            writer.writerow([f"{w:.9g}", f"{i:.9g}"])


def read_csv(path) -> Spectrum:
    """Read one spectrum from a two-column CSV; the header row is optional."""
    wavenumbers: list[float] = []
    intensities: list[float] = []
    with open(path, "r", newline="") as fh:
        for row_idx, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ParseError(f"{path}: expected 2 columns, got {len(row)}", row=row_idx)
            if row_idx == 1 and row[0].strip().lower() == CSV_HEADER[0]:
                continue
            try:
                w, i = float(row[0]), float(row[1])
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell {row!r}", row=row_idx)
            if wavenumbers and w <= wavenumbers[-1]:
                raise ParseError(f"{path}: wavenumber {w} not increasing", row=row_idx)
            wavenumbers.append(w)
            intensities.append(i)
    if not wavenumbers:
        raise ParseError(f"{path}: no rows")
    return Spectrum(np.array(wavenumbers), np.array(intensities))


MANIFEST_DATASET_SECTION = "dataset"
MANIFEST_CLASS_PREFIX = "class:"


def write_manifest(path, classes: Sequence[ManifestClass], files_by_class: dict[str, str],
                   train_fraction: float, seed: int) -> None:
    """Write a dataset manifest: one [dataset] section plus one section per class.

    ``files_by_class`` maps class id to a file glob relative to the manifest.
    """
    parser = ConfigParser()
    parser[MANIFEST_DATASET_SECTION] = {
        "seed": str(seed),
        "train_fraction": repr(train_fraction),
    }
    for cls in classes:
        parser[MANIFEST_CLASS_PREFIX + cls.class_id] = {
            "name": cls.name,
            "role": str(cls.role),
            "files": files_by_class[cls.class_id],
        }
    with open(path, "w") as fh:
        parser.write(fh)


def load_manifest(path) -> DatasetManifest:
    """Load a manifest, expand file globs, and assign deterministic splits."""
    path = Path(path)
    parser = ConfigParser()
    read = parser.read(path)
    if not read:
        raise DatasetError(f"manifest not found: {path}")
    if MANIFEST_DATASET_SECTION not in parser:
        raise DatasetError(f"{path}: missing [{MANIFEST_DATASET_SECTION}] section")
    ds = parser[MANIFEST_DATASET_SECTION]
    seed = ds.getint("seed", fallback=0)
    train_fraction = ds.getfloat("train_fraction", fallback=DEFAULT_TRAIN_FRACTION)

    classes: list[ManifestClass] = []
    records: list[Record] = []
    base = path.parent
    for section in parser.sections():
        if not section.startswith(MANIFEST_CLASS_PREFIX):
            continue
        class_id = section[len(MANIFEST_CLASS_PREFIX):]
        role = ClassRole.parse(parser[section]["role"])
        name = parser[section].get("name", class_id)
        classes.append(ManifestClass(class_id, name, role))
        pattern = parser[section]["files"]
        matches = sorted(str(p.relative_to(base)) for p in base.glob(pattern))
        if not matches:
            raise DatasetError(f"{path}: class {class_id!r} glob {pattern!r} matched no files")
        records.extend(Record(m, class_id, role) for m in matches)

    train, test = split_dataset(records, train_fraction, seed)
    return DatasetManifest(classes=classes, records=train + test,
                           train_fraction=train_fraction, seed=seed, base_dir=base)


# ---------------------------------------------------------------------------
# array assembly for training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class DatasetArrays:
    """One split stacked into arrays, ready for the network.

    ``labels`` holds the known-class index in [0, C) for known samples and -1
    otherwise; ``class_ids`` keeps the per-sample class for confusion tables.
    """

    x: np.ndarray                  # (N, L) preprocessed intensities
    roles: np.ndarray              # (N,) ClassRole codes
    labels: np.ndarray             # (N,) known index or -1
    class_ids: list[str]
    sample_ids: list[str]
    wavenumbers: np.ndarray
    known_ids: list[str]

    def __len__(self) -> int:
        return len(self.x)

    @property
    def known_class_count(self) -> int:
        return len(self.known_ids)

    def subset(self, mask: np.ndarray) -> "DatasetArrays":
        idx = np.flatnonzero(mask)
        return DatasetArrays(
            x=self.x[idx], roles=self.roles[idx], labels=self.labels[idx],
            class_ids=[self.class_ids[i] for i in idx],
            sample_ids=[self.sample_ids[i] for i in idx],
            wavenumbers=self.wavenumbers, known_ids=self.known_ids)


def load_split(manifest: DatasetManifest, split: Split,
               cut_below: float = DEFAULT_CUT_BELOW) -> DatasetArrays:
    """Read, preprocess, and stack every record of one split."""
    records = manifest.records_for(split)
    if not records:
        raise DatasetError(f"manifest has no {split.value} records")
    known_index = {cid: i for i, cid in enumerate(manifest.known_ids)}

    rows, roles, labels, class_ids, sample_ids = [], [], [], [], []
    wn_ref: np.ndarray | None = None
    for rec in records:
        spec = rec.source if isinstance(rec.source, Spectrum) else read_csv(manifest.base_dir / rec.source)
        spec = preprocess(spec, cut_below)
        if wn_ref is None:
            wn_ref = spec.wavenumbers
        elif len(spec) != len(wn_ref) or not np.allclose(spec.wavenumbers, wn_ref):
            raise DatasetError(f"record {rec.sample_id!r} is not on the common wavenumber grid")
        rows.append(spec.intensities)
        roles.append(int(rec.role))
        labels.append(known_index.get(rec.class_id, -1))
        class_ids.append(rec.class_id)
        sample_ids.append(rec.sample_id)

    return DatasetArrays(
        x=np.stack(rows), roles=np.array(roles, dtype=np.int8),
        labels=np.array(labels, dtype=np.int64), class_ids=class_ids,
        sample_ids=sample_ids, wavenumbers=wn_ref, known_ids=list(manifest.known_ids))
