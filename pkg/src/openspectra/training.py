"""Training loop, run ensembles, and the alpha/beta grid search.

One run = one seeded weight init plus one seeded shuffle stream, trained with
Adam under a cosine learning-rate decay. An ensemble is R such runs differing
only by seed; its prediction is the arithmetic mean of the per-run softmax
scores. Never-seen samples are barred from every code path here: the dataset
is audited before the first epoch and every batch is re-checked.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DatasetError, DivergenceError, ShapeMismatchError
from .evaluation import select_operating_point, threshold_sweep
from .losses import LossSpec, Strategy, batch_loss
from .network import Model, NetworkConfig
from .spectra import ClassRole, DatasetArrays

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    """Everything one run needs besides the data and the architecture."""

    loss: LossSpec
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    final_learning_rate: float = 1e-5
    optimizer: str = "adam"
    seed: int = 0
    ensemble_size: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {self.ensemble_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 < self.final_learning_rate <= self.learning_rate:
            raise ConfigError("final learning rate must be in (0, learning_rate]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


def cosine_learning_rate(epoch: int, config: TrainConfig) -> float:
    """Cosine decay from the initial to the final rate over epochs 1..E."""
    if config.epochs == 1:
        return config.learning_rate
    t = (epoch - 1) / (config.epochs - 1)
    return config.final_learning_rate + 0.5 * (
        config.learning_rate - config.final_learning_rate) * (1.0 + math.cos(math.pi * t))


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, params: dict[str, ad.Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * p.grad ** 2
            m_hat = self.m[name] / correct1
            v_hat = self.v[name] / correct2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    """Plain gradient descent; kept as a deterministic baseline optimizer."""

    def __init__(self, params: dict[str, ad.Tensor]):
        self.params = params

    def step(self, lr: float) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data = p.data - lr * p.grad


def _make_optimizer(name: str, params: dict[str, ad.Tensor]):
    return Adam(params) if name == "adam" else Sgd(params)


# ---------------------------------------------------------------------------
# hygiene audit
# ---------------------------------------------------------------------------

@dataclass
class HygieneAudit:
    """Proof-of-work record that training never touched a never-seen sample."""

    dataset_size: int = 0
    samples_checked: int = 0
    batches_checked: int = 0
    never_seen_count: int = 0

    @property
    def passed(self) -> bool:
        return self.never_seen_count == 0 and self.samples_checked > 0


def audit_training_data(data: DatasetArrays) -> HygieneAudit:
    """Scan a training set's roles; any never-seen sample is an error."""
    never = int(np.count_nonzero(data.roles == int(ClassRole.NEVER_SEEN)))
    if never:
        raise DatasetError(
            f"{never} never-seen sample(s) in a training set; they are test-only")
    return HygieneAudit(dataset_size=len(data))


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogRow:
    epoch: int
    loss: float
    train_accuracy: float


@dataclass
class TrainHistory:
    rows: list[LogRow] = field(default_factory=list)
    audit: HygieneAudit = field(default_factory=HygieneAudit)
    warnings: list[str] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.rows[-1].loss


def train(model: Model, data: DatasetArrays, config: TrainConfig,
          shuffle_rng: np.random.Generator | None = None) -> TrainHistory:
    """Optimize ``model`` in place; returns the per-epoch history.

    Row 0 of the history is the loss of the very first batch before any
    update (near log(output_count) for a fresh init); rows 1..E are per-epoch
    means. The softmax-threshold strategy trains on known samples only, the
    other strategies on known plus ignored.
    """
    spec = config.loss
    if model.config.output_count != spec.output_count:
        raise ConfigError(f"model has {model.config.output_count} outputs but "
                          f"{spec.strategy} needs {spec.output_count}")
    if not spec.uses_ignored:
        data = data.subset(data.roles == int(ClassRole.KNOWN))
    if len(data) == 0:
        raise DatasetError("training set is empty after role filtering")

    history = TrainHistory(audit=audit_training_data(data))
    if shuffle_rng is None:
        shuffle_rng = np.random.default_rng(config.seed)
    optimizer = _make_optimizer(config.optimizer, model.params)
    n = len(data)
    never_code = int(ClassRole.NEVER_SEEN)

    for epoch in range(1, config.epochs + 1):
        lr = cosine_learning_rate(epoch, config)
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        batch_count = 0
        correct = 0
        known_total = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            roles = data.roles[idx]
            history.audit.never_seen_count += int(np.count_nonzero(roles == never_code))
            if history.audit.never_seen_count:
                raise DatasetError("never-seen sample reached a training batch")
            history.audit.samples_checked += len(idx)
            history.audit.batches_checked += 1

            labels = data.labels[idx]
            model.zero_grad()
            with ad.Tape() as tape:
                logits, features = model.forward(data.x[idx], training=True)
                loss = batch_loss(logits, features, roles, labels, spec)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise DivergenceError(f"training diverged at epoch {epoch}: "
                                          f"loss is {loss_value}")
                tape.backward(loss)

            known = roles == int(ClassRole.KNOWN)
            if np.any(known):
                preds = logits.data[known, :spec.known_class_count].argmax(axis=1)
                correct += int(np.count_nonzero(preds == labels[known]))
                known_total += int(known.sum())

            if epoch == 1 and start == 0:
                first_acc = correct / known_total if known_total else float("nan")
                history.rows.append(LogRow(0, loss_value, first_acc))

            optimizer.step(lr)
            loss_sum += loss_value
            batch_count += 1

        accuracy = correct / known_total if known_total else float("nan")
        history.rows.append(LogRow(epoch, loss_sum / batch_count, accuracy))

    _warn_if_loss_rises(history)
    return history


def _warn_if_loss_rises(history: TrainHistory, window: int = 5) -> None:
    """Soft check: 5-epoch smoothed loss should not increase between windows."""
    losses = [r.loss for r in history.rows if r.epoch > 0]
    if len(losses) < 2 * window:
        return
    means = [sum(losses[i:i + window]) / window
             for i in range(0, len(losses) - window + 1, window)]
    for a, b in zip(means, means[1:]):
        if b > a:
            msg = (f"smoothed training loss rose between {window}-epoch windows "
                   f"({a:.4g} -> {b:.4g})")
            history.warnings.append(msg)
            log.warning(msg)
            return


def write_train_log(path, history: TrainHistory) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "train_accuracy"])
        for row in history.rows:
            writer.writerow([row.epoch, "%.9g" % row.loss, "%.9g" % row.train_accuracy])


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

@dataclass
class EnsemblePrediction:
    """Per-run softmax scores (R, N, W) and their arithmetic mean (N, W)."""

    per_run: np.ndarray
    averaged: np.ndarray


@dataclass
class EnsembleResult:
    models: list[Model]
    histories: list[TrainHistory]
    run_seeds: list[int]


def train_run(data: DatasetArrays, net_config: NetworkConfig, config: TrainConfig,
              run_seed: int) -> tuple[Model, TrainHistory]:
    """One seeded run: independent init and shuffle streams from one seed."""
    init_ss, shuffle_ss = np.random.SeedSequence(run_seed).spawn(2)
    model = Model(net_config, seed=np.random.default_rng(init_ss))
    history = train(model, data, config, np.random.default_rng(shuffle_ss))
    return model, history


def train_ensemble(data: DatasetArrays, net_config: NetworkConfig,
                   config: TrainConfig) -> EnsembleResult:
    """R runs differing only by seed (base seed + run index)."""
    result = EnsembleResult([], [], [])
    for r in range(config.ensemble_size):
        run_seed = config.seed + r
        model, history = train_run(data, net_config, config, run_seed)
        result.models.append(model)
        result.histories.append(history)
        result.run_seeds.append(run_seed)
    return result


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def predict_scores(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode softmax scores for a whole array, in memory-bounded chunks."""
    chunks = []
    for start in range(0, len(x), batch_size):
        logits, _ = model.forward(x[start:start + batch_size], training=False)
        chunks.append(_stable_softmax(logits.data))
    return np.concatenate(chunks)


def predict_features(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    chunks = []
    for start in range(0, len(x), batch_size):
        _, features = model.forward(x[start:start + batch_size], training=False)
        chunks.append(features.data)
    return np.concatenate(chunks)


def ensemble_predict(models: Sequence[Model], x: np.ndarray,
                     batch_size: int = 256) -> EnsemblePrediction:
    """Mean of per-run softmax scores: the ensemble's prediction."""
    if not models:
        raise ConfigError("ensemble_predict needs at least one model")
    widths = {m.config.output_count for m in models}
    if len(widths) != 1:
        raise ShapeMismatchError(f"ensemble members disagree on output count: {sorted(widths)}")
    per_run = np.stack([predict_scores(m, x, batch_size) for m in models])
    return EnsemblePrediction(per_run=per_run, averaged=per_run.mean(axis=0))


# ---------------------------------------------------------------------------
# alpha/beta grid search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TuneRow:
    alpha: float
    beta: float
    cutoff: float
    fp_ignored: float | None
    inconclusive_known: float
    flagged: bool


@dataclass
class TuneResult:
    alpha: float
    beta: float
    cutoff: float
    rows: list[TuneRow]
    flagged: bool


def tune_alpha_beta(train_data: DatasetArrays, val_data: DatasetArrays,
                    net_config: NetworkConfig, config: TrainConfig,
                    alphas: Sequence[float], betas: Sequence[float],
                    cutoffs: Sequence[float]) -> TuneResult:
    """Grid search for the feature-magnitude hyperparameters.

    Each grid point trains one seeded run, sweeps the cutoff on the
    validation split, and records the operating point chosen by the
    zero-false-positive rule. The winner minimizes the known-class
    inconclusive rate subject to zero false positives on ignored samples
    (ties: smaller alpha, then smaller beta). The validation split must
    contain known and ignored samples only.
    """
    if len(alphas) == 0 or len(betas) == 0:
        raise ConfigError("alpha/beta grid is empty")
    if np.any(val_data.roles == int(ClassRole.NEVER_SEEN)):
        raise DatasetError("validation split for tuning must not contain never-seen samples")

    rows: list[TuneRow] = []
    for alpha in sorted(set(float(a) for a in alphas)):
        for beta in sorted(set(float(b) for b in betas)):
            spec = replace(config.loss, alpha=alpha, beta=beta)
            run_config = replace(config, loss=spec)
            model, _ = train_run(train_data, net_config, run_config, run_config.seed)
            scores = predict_scores(model, val_data.x)
            sweep = threshold_sweep(scores, val_data.roles, val_data.labels,
                                    cutoffs, spec.strategy, spec.known_class_count)
            op = select_operating_point(sweep)
            rows.append(TuneRow(alpha, beta, op.row.cutoff, op.row.fp_ignored,
                                op.row.inconclusive_known, op.flagged))

    clean = [r for r in rows if not r.flagged]
    if clean:
        best = min(clean, key=lambda r: (r.inconclusive_known, r.alpha, r.beta))
        return TuneResult(best.alpha, best.beta, best.cutoff, rows, flagged=False)
    best = min(rows, key=lambda r: (r.fp_ignored, r.inconclusive_known, r.alpha, r.beta))
    return TuneResult(best.alpha, best.beta, best.cutoff, rows, flagged=True)
