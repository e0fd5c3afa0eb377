"""Decision rule, metrics, threshold sweeps, and report serialization.

Every strategy shares one accept/reject rule: take the winning softmax score
and accept the winning class if that score clears the cutoff. The background
strategy first checks whether the catch-all class won outright, then applies
the cutoff to the known-class scores renormalized among themselves.

Accept/reject is monotone in the cutoff by construction, so a sweep's false
positive column can never rise and its inconclusive column can never fall as
the cutoff grows. The partition counts on known samples (correct, wrong,
rejected) always sum to the number of known samples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .losses import Strategy
from .spectra import ClassRole

REJECT = -1
FLOAT_FORMAT = "%.9g"

# Operating points reported on a 40-chemical Raman benchmark (20 known, 10
# ignored, 10 never-seen): documentation constants for comparison tables,
# not targets for synthetic data.
REFERENCE_OPERATING_POINTS = {
    Strategy.SOFTMAX_THRESHOLD: {"cutoff": 0.99, "fp_never": 0.100, "inconclusive_known": 0.070},
    Strategy.ENTROPIC_OPEN_SET: {"cutoff": 0.93, "fp_never": 0.000, "inconclusive_known": 0.0237},
    Strategy.OBJECTOSPHERE: {"cutoff": 0.91, "fp_never": 0.000, "inconclusive_known": 0.0026},
}


@dataclass(frozen=True)
class Decision:
    """Outcome for one sample: a known-class index, or REJECT."""

    index: int
    score: float

    @property
    def accepted(self) -> bool:
        return self.index != REJECT


def _check_cutoff(cutoff: float) -> None:
    if not 0.0 <= cutoff <= 1.0:
        raise ConfigError(f"cutoff must be in [0, 1], got {cutoff}")


def decide(scores: np.ndarray, cutoff: float, strategy: Strategy,
           known_class_count: int) -> Decision:
    """Accept/reject one score vector. Scalar twin of ``decide_batch``."""
    _check_cutoff(cutoff)
    scores = np.asarray(scores)
    c = known_class_count
    if strategy == Strategy.BACKGROUND_CLASS:
        if scores.shape != (c + 1,):
            raise ShapeMismatchError(f"expected {c + 1} scores, got shape {scores.shape}")
        known_part = scores[:c]
        denom = known_part.sum()
        best = int(np.argmax(known_part))
        value = float(known_part[best] / denom) if denom > 0.0 else 0.0
        if int(np.argmax(scores)) == c:
            return Decision(REJECT, value)
    else:
        if scores.shape != (c,):
            raise ShapeMismatchError(f"expected {c} scores, got shape {scores.shape}")
        best = int(np.argmax(scores))
        value = float(scores[best])
    if value >= cutoff:
        return Decision(best, value)
    return Decision(REJECT, value)


def decide_batch(scores: np.ndarray, cutoff: float, strategy: Strategy,
                 known_class_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized decision rule: (indices with REJECT = -1, winning scores)."""
    _check_cutoff(cutoff)
    scores = np.asarray(scores)
    c = known_class_count
    n = scores.shape[0]
    if strategy == Strategy.BACKGROUND_CLASS:
        if scores.shape[1] != c + 1:
            raise ShapeMismatchError(f"expected {c + 1} columns, got {scores.shape[1]}")
        known_part = scores[:, :c]
        denom = np.maximum(known_part.sum(axis=1), 1e-300)
        best = known_part.argmax(axis=1)
        value = known_part[np.arange(n), best] / denom
        background_won = scores.argmax(axis=1) == c
        accept = ~background_won & (value >= cutoff)
    else:
        if scores.shape[1] != c:
            raise ShapeMismatchError(f"expected {c} columns, got {scores.shape[1]}")
        best = scores.argmax(axis=1)
        value = scores[np.arange(n), best]
        accept = value >= cutoff
    return np.where(accept, best, REJECT), value


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class FeatureNormStats:
    """Feature-magnitude summary per role: means plus a shared histogram.

    Bins cover [0, p99] of all norms in 50 equal steps; the final count in
    each row is the overflow above p99.
    """

    mean_by_role: dict[int, float]
    bin_edges: np.ndarray
    counts_by_role: dict[int, np.ndarray]


def feature_norm_stats(features: np.ndarray, roles: np.ndarray,
                       bins: int = 50) -> FeatureNormStats:
    norms = np.linalg.norm(np.asarray(features), axis=1)
    roles = np.asarray(roles)
    upper = max(float(np.percentile(norms, 99)), 1e-12)
    edges = np.linspace(0.0, upper, bins + 1)
    means, counts = {}, {}
    for role in sorted(set(int(r) for r in roles)):
        sel = norms[roles == role]
        means[role] = float(sel.mean())
        hist, _ = np.histogram(sel, bins=edges)
        counts[role] = np.append(hist, np.count_nonzero(sel > upper))
    return FeatureNormStats(means, edges, counts)


@dataclass
class EvalReport:
    """All headline metrics for one strategy at one cutoff."""

    strategy: Strategy
    cutoff: float
    known_count: int
    known_accuracy: float
    known_wrong: float
    known_inconclusive: float
    fp_ignored: float | None
    fp_never: float | None
    per_run_known_accuracy: list[float]
    ensemble_known_accuracy: float
    confusion_class_ids: list[str]
    confusion_columns: list[str]
    confusion: np.ndarray
    feature_norms: FeatureNormStats | None = None

    def metric_rows(self) -> list[tuple[str, float | None]]:
        rows: list[tuple[str, float | None]] = [
            ("cutoff", self.cutoff),
            ("known_count", float(self.known_count)),
            ("known_accuracy", self.known_accuracy),
            ("known_wrong", self.known_wrong),
            ("known_inconclusive", self.known_inconclusive),
            ("fp_ignored", self.fp_ignored),
            ("fp_never", self.fp_never),
            ("ensemble_known_accuracy", self.ensemble_known_accuracy),
        ]
        rows.extend((f"run{i}_known_accuracy", v)
                    for i, v in enumerate(self.per_run_known_accuracy))
        if self.feature_norms is not None:
            for role, mean in sorted(self.feature_norms.mean_by_role.items()):
                rows.append((f"mean_feature_norm_{ClassRole(role)}", mean))
        return rows


def _closed_world_accuracy(scores: np.ndarray, labels: np.ndarray,
                           known_mask: np.ndarray, c: int) -> float:
    """Plain argmax accuracy over the first C columns, no threshold."""
    preds = scores[known_mask, :c].argmax(axis=1)
    return float(np.mean(preds == labels[known_mask]))


def evaluate(per_run_scores: np.ndarray, roles: np.ndarray, labels: np.ndarray,
             class_ids: Sequence[str], known_ids: Sequence[str], cutoff: float,
             strategy: Strategy, features: np.ndarray | None = None) -> EvalReport:
    """Score a test split: (R, N, W) per-run softmax scores -> one report.

    The decision rule runs on the run-averaged scores. Per-run closed-world
    accuracies are included so ensemble averaging can be compared against the
    individual runs.
    """
    per_run_scores = np.asarray(per_run_scores)
    if per_run_scores.ndim != 3:
        raise ShapeMismatchError(f"expected (runs, samples, classes) scores, got shape "
                                 f"{per_run_scores.shape}")
    roles = np.asarray(roles)
    labels = np.asarray(labels)
    c = len(known_ids)
    averaged = per_run_scores.mean(axis=0)
    indices, _ = decide_batch(averaged, cutoff, strategy, c)

    known_mask = roles == int(ClassRole.KNOWN)
    ignored_mask = roles == int(ClassRole.IGNORED)
    never_mask = roles == int(ClassRole.NEVER_SEEN)
    n_known = int(known_mask.sum())
    if n_known == 0:
        raise ConfigError("test split has no known samples to score")

    correct = int(np.count_nonzero(known_mask & (indices == labels)))
    rejected = int(np.count_nonzero(known_mask & (indices == REJECT)))
    wrong = n_known - correct - rejected

    def fp_rate(mask: np.ndarray) -> float | None:
        total = int(mask.sum())
        if total == 0:
            return None
        return float(np.count_nonzero(mask & (indices != REJECT)) / total)

    per_run = [_closed_world_accuracy(per_run_scores[r], labels, known_mask, c)
               for r in range(per_run_scores.shape[0])]
    ensemble_acc = _closed_world_accuracy(averaged, labels, known_mask, c)

    all_ids = sorted(set(class_ids))
    columns = list(known_ids) + ["REJECT"]
    confusion = np.zeros((len(all_ids), len(columns)), dtype=np.int64)
    row_of = {cid: i for i, cid in enumerate(all_ids)}
    for sample_idx, cid in enumerate(class_ids):
        col = len(columns) - 1 if indices[sample_idx] == REJECT else int(indices[sample_idx])
        confusion[row_of[cid], col] += 1

    return EvalReport(
        strategy=strategy, cutoff=cutoff, known_count=n_known,
        known_accuracy=correct / n_known,
        known_wrong=wrong / n_known,
        known_inconclusive=rejected / n_known,
        fp_ignored=fp_rate(ignored_mask),
        fp_never=fp_rate(never_mask),
        per_run_known_accuracy=per_run,
        ensemble_known_accuracy=ensemble_acc,
        confusion_class_ids=all_ids,
        confusion_columns=columns,
        confusion=confusion,
        feature_norms=None if features is None else feature_norm_stats(features, roles),
    )


# ---------------------------------------------------------------------------
# threshold sweeps and operating points
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    cutoff: float
    fp_never: float | None
    fp_ignored: float | None
    inconclusive_known: float
    accuracy_known: float


def threshold_sweep(averaged_scores: np.ndarray, roles: np.ndarray, labels: np.ndarray,
                    cutoffs: Sequence[float], strategy: Strategy,
                    known_class_count: int) -> list[SweepRow]:
    """Evaluate the decision rule on an ascending cutoff grid.

    Cutoffs above 1 are clamped to 1.0 (a softmax score can never exceed 1,
    so anything above behaves identically to exactly 1).
    """
    grid = np.minimum(np.asarray(list(cutoffs), dtype=np.float64), 1.0)
    if len(grid) == 0:
        raise ConfigError("cutoff grid is empty")
    if np.any(np.diff(grid) < 0):
        raise ConfigError("cutoff grid must be ascending")
    roles = np.asarray(roles)
    labels = np.asarray(labels)
    known_mask = roles == int(ClassRole.KNOWN)
    ignored_mask = roles == int(ClassRole.IGNORED)
    never_mask = roles == int(ClassRole.NEVER_SEEN)
    n_known = int(known_mask.sum())
    if n_known == 0:
        raise ConfigError("sweep needs known samples")

    rows = []
    for cutoff in grid:
        indices, _ = decide_batch(averaged_scores, float(cutoff), strategy, known_class_count)
        accepted = indices != REJECT

        def rate(mask):
            total = int(mask.sum())
            return float(np.count_nonzero(mask & accepted) / total) if total else None

        rows.append(SweepRow(
            cutoff=float(cutoff),
            fp_never=rate(never_mask),
            fp_ignored=rate(ignored_mask),
            inconclusive_known=float(np.count_nonzero(known_mask & ~accepted) / n_known),
            accuracy_known=float(np.count_nonzero(known_mask & (indices == labels)) / n_known),
        ))
    return rows


@dataclass(frozen=True)
class OperatingPoint:
    row: SweepRow
    flagged: bool
    note: str = ""


def select_operating_point(rows: Sequence[SweepRow]) -> OperatingPoint:
    """Pick the sweep row with zero false positives on ignored samples and the
    fewest inconclusive outcomes on knowns; ties go to the smallest cutoff.

    Never-seen rates play no part in the selection. If no row reaches zero
    false positives the row with the lowest rate is returned, flagged.
    """
    if not rows:
        raise ConfigError("cannot select an operating point from an empty sweep")
    zero_fp = [r for r in rows if (r.fp_ignored or 0.0) == 0.0]
    if zero_fp:
        best = min(zero_fp, key=lambda r: (r.inconclusive_known, r.cutoff))
        return OperatingPoint(best, flagged=False)
    best = min(rows, key=lambda r: (r.fp_ignored, r.inconclusive_known, r.cutoff))
    return OperatingPoint(best, flagged=True,
                          note="no cutoff reached zero false positives on ignored samples")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _format(value: float | None) -> str:
    if value is None:
        return "nan"
    return FLOAT_FORMAT % value


def write_report(path, report: EvalReport) -> None:
    """Metrics as metric,value rows, then the confusion table."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["strategy", str(report.strategy)])
        for name, value in report.metric_rows():
            writer.writerow([name, _format(value)])
        writer.writerow([])
        writer.writerow(["confusion"] + report.confusion_columns)
        for cid, counts in zip(report.confusion_class_ids, report.confusion):
            writer.writerow([cid] + [str(int(v)) for v in counts])


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cutoff", "fp_never", "fp_ignored",
                         "inconclusive_known", "accuracy_known"])
        for r in rows:
            writer.writerow([_format(r.cutoff), _format(r.fp_never), _format(r.fp_ignored),
                             _format(r.inconclusive_known), _format(r.accuracy_known)])


def read_sweep_csv(path) -> list[SweepRow]:
    rows = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for rec in reader:
            cutoff, fp_never, fp_ignored, inconclusive, accuracy = (float(v) for v in rec)
            rows.append(SweepRow(
                cutoff,
                None if np.isnan(fp_never) else fp_never,
                None if np.isnan(fp_ignored) else fp_ignored,
                inconclusive, accuracy))
    return rows


def write_feature_norm_csv(path, stats: FeatureNormStats) -> None:
    """Histogram rows: bin bounds then one count column per role; the final
    row is the overflow above the top edge."""
    role_names = [str(ClassRole(r)) for r in sorted(stats.counts_by_role)]
    roles = sorted(stats.counts_by_role)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high"] + [f"count_{n}" for n in role_names])
        edges = stats.bin_edges
        for b in range(len(edges) - 1):
            writer.writerow([_format(edges[b]), _format(edges[b + 1])]
                            + [str(int(stats.counts_by_role[r][b])) for r in roles])
        writer.writerow([_format(edges[-1]), "inf"]
                        + [str(int(stats.counts_by_role[r][-1])) for r in roles])


def format_report(report: EvalReport) -> str:
    """Human-readable summary for terminal output."""
    lines = [
        f"strategy:            {report.strategy}",
        f"cutoff:              {report.cutoff:g}",
        f"known samples:       {report.known_count}",
        f"known accuracy:      {report.known_accuracy:.2%}",
        f"known wrong:         {report.known_wrong:.2%}",
        f"known inconclusive:  {report.known_inconclusive:.2%}",
    ]
    if report.fp_ignored is not None:
        lines.append(f"FP rate on ignored:  {report.fp_ignored:.2%}")
    if report.fp_never is not None:
        lines.append(f"FP rate on never-seen: {report.fp_never:.2%}")
    accs = ", ".join(f"{a:.2%}" for a in report.per_run_known_accuracy)
    lines.append(f"closed-world accuracy per run: {accs}")
    lines.append(f"closed-world ensemble accuracy: {report.ensemble_known_accuracy:.2%}")
    if report.feature_norms is not None:
        for role, mean in sorted(report.feature_norms.mean_by_role.items()):
            lines.append(f"mean feature norm ({ClassRole(role)}): {mean:.4g}")
    return "\n".join(lines)


def export_features(path, sample_ids: Sequence[str], roles: np.ndarray,
                    features: np.ndarray) -> None:
    """Deep features to CSV so external embedding tools can consume them."""
    features = np.asarray(features)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "role"] + [f"f{i}" for i in range(features.shape[1])])
        for sid, role, row in zip(sample_ids, roles, features):
            writer.writerow([sid, str(ClassRole(int(role)))]
                            + [FLOAT_FORMAT % v for v in row])
