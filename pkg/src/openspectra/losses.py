"""The four rejection-strategy loss functions.

All four act on softmax scores from the network logits:

* softmax_threshold: plain cross-entropy on known classes only; rejection
  happens at test time by thresholding the winning score.
* background_class: cross-entropy over C+1 outputs where every ignored
  sample is labeled with the extra catch-all class.
* entropic_open_set: cross-entropy on knowns; ignored samples are pushed
  toward the uniform distribution by the mean negative log score, which is
  minimized exactly at uniform where it equals log(C).
* objectosphere: entropic_open_set plus a feature-magnitude term that
  pushes known-class feature norms above sqrt(beta) and ignored-class
  features toward the origin.

Never-seen samples must not reach any of these; they exist only to measure
false positives at test time, and every entry point here rejects them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DatasetError
from .spectra import ClassRole

DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 10.0


class Strategy(enum.Enum):
    SOFTMAX_THRESHOLD = "softmax_threshold"
    BACKGROUND_CLASS = "background_class"
    ENTROPIC_OPEN_SET = "entropic_open_set"
    OBJECTOSPHERE = "objectosphere"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        try:
            return cls(text.strip().lower())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ConfigError(f"unknown strategy {text!r}; expected one of: {valid}")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class LossSpec:
    """Which strategy to train with, and its hyperparameters."""

    strategy: Strategy
    known_class_count: int
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.known_class_count < 2:
            raise ConfigError(f"need at least 2 known classes, got {self.known_class_count}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")

    @property
    def output_count(self) -> int:
        """Network outputs: C, plus one catch-all for the background strategy."""
        if self.strategy == Strategy.BACKGROUND_CLASS:
            return self.known_class_count + 1
        return self.known_class_count

    @property
    def uses_ignored(self) -> bool:
        return self.strategy != Strategy.SOFTMAX_THRESHOLD


def _check_no_never_seen(roles: np.ndarray) -> None:
    if np.any(roles == int(ClassRole.NEVER_SEEN)):
        raise DatasetError("never-seen samples reached a loss function; they are test-only")


def _one_hot(labels: np.ndarray, width: int) -> np.ndarray:
    if np.any(labels < 0) or np.any(labels >= width):
        raise DatasetError(f"labels must be in [0, {width}), got range "
                           f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((len(labels), width))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(scores: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Mean of -log(score at the true label) over the batch.

    The true-label score is picked out by a one-hot mask and summed before
    the log, so padding scores that underflow to zero never produce 0 * inf.
    """
    n, width = scores.shape
    mask = ad.Tensor(_one_hot(np.asarray(labels), width))
    picked = ad.sum(ad.mul(scores, mask), axis=-1)
    return ad.mul(ad.Tensor(-1.0 / n), ad.sum(ad.log(picked)))


def background_class_encode(roles: np.ndarray, labels: np.ndarray,
                            known_class_count: int) -> np.ndarray:
    """Labels for the C+1-way background strategy: ignored samples get index C."""
    _check_no_never_seen(roles)
    out = np.asarray(labels).copy()
    out[np.asarray(roles) == int(ClassRole.IGNORED)] = known_class_count
    if np.any(out < 0):
        raise DatasetError("known sample without a class label")
    return out


def _split_known_ignored(roles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    roles = np.asarray(roles)
    _check_no_never_seen(roles)
    known_idx = np.flatnonzero(roles == int(ClassRole.KNOWN))
    ignored_idx = np.flatnonzero(roles == int(ClassRole.IGNORED))
    return known_idx, ignored_idx


def entropic_open_set_loss(scores: ad.Tensor, roles: np.ndarray,
                           labels: np.ndarray) -> ad.Tensor:
    """Mean entropic open-set loss over a mixed batch of known and ignored rows.

    Known rows contribute -log(S at label); ignored rows contribute the mean
    of -log(S) over all C classes, whose unique minimum log(C) is reached at
    the uniform distribution.
    """
    n, c = scores.shape
    known_idx, ignored_idx = _split_known_ignored(roles)
    if len(known_idx) + len(ignored_idx) != n:
        raise DatasetError("every row needs a known or ignored role")
    labels = np.asarray(labels)

    total = ad.Tensor(0.0)
    if len(known_idx):
        known_scores = ad.take_rows(scores, known_idx)
        mask = ad.Tensor(_one_hot(labels[known_idx], c))
        picked = ad.sum(ad.mul(known_scores, mask), axis=-1)
        total = ad.sub(total, ad.sum(ad.log(picked)))
    if len(ignored_idx):
        ignored_scores = ad.take_rows(scores, ignored_idx)
        total = ad.sub(total, ad.mul(ad.Tensor(1.0 / c), ad.sum(ad.log(ignored_scores))))
    return ad.mul(ad.Tensor(1.0 / n), total)


def objectosphere_loss(scores: ad.Tensor, features: ad.Tensor, roles: np.ndarray,
                       labels: np.ndarray, alpha: float, beta: float) -> ad.Tensor:
    """Entropic open-set loss plus the feature-magnitude term.

    Per known row the extra term is alpha * max(beta - ||F||^2, 0); per
    ignored row it is alpha * ||F||^2. With alpha = 0 the arithmetic reduces
    bit for bit to the entropic loss (the extra term multiplies to exact
    zero and x + 0.0 == x in floating point).
    """
    n = scores.shape[0]
    entropic = entropic_open_set_loss(scores, roles, labels)
    known_idx, ignored_idx = _split_known_ignored(roles)

    extra = ad.Tensor(0.0)
    if len(known_idx):
        f_known = ad.take_rows(features, known_idx)
        sq_norm = ad.sum(ad.square(f_known), axis=-1)
        hinge = ad.relu(ad.sub(ad.Tensor(np.full(len(known_idx), beta)), sq_norm))
        extra = ad.add(extra, ad.sum(hinge))
    if len(ignored_idx):
        f_ignored = ad.take_rows(features, ignored_idx)
        extra = ad.add(extra, ad.sum(ad.square(f_ignored)))
    return ad.add(entropic, ad.mul(ad.Tensor(alpha / n), extra))


def batch_loss(logits: ad.Tensor, features: ad.Tensor, roles: np.ndarray,
               labels: np.ndarray, spec: LossSpec) -> ad.Tensor:
    """Strategy dispatch: one scalar loss for a batch of network outputs."""
    roles = np.asarray(roles)
    _check_no_never_seen(roles)
    if logits.shape[1] != spec.output_count:
        raise DatasetError(
            f"{spec.strategy} expects {spec.output_count} logits, got {logits.shape[1]}")
    scores = ad.softmax(logits)

    if spec.strategy == Strategy.SOFTMAX_THRESHOLD:
        if np.any(roles != int(ClassRole.KNOWN)):
            raise DatasetError("softmax_threshold trains on known classes only")
        return cross_entropy(scores, labels)
    if spec.strategy == Strategy.BACKGROUND_CLASS:
        encoded = background_class_encode(roles, labels, spec.known_class_count)
        return cross_entropy(scores, encoded)
    if spec.strategy == Strategy.ENTROPIC_OPEN_SET:
        return entropic_open_set_loss(scores, roles, labels)
    return objectosphere_loss(scores, features, roles, labels, spec.alpha, spec.beta)
