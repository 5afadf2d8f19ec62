"""
Training: generalized dice loss, Adam, subject-wise folds, early stopping on
validation F1-bar, and the median-candidate test split.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics, model
from .errors import ConfigError, TrainingDivergedError
from .model import ArchConfig, ModelParams
from .postproc import SpindleEvent, extract_events

log = logging.getLogger(__name__)

GDL_EPS = 1e-5


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 12
    patience_epochs: int = 300
    max_epochs: int = 800
    folds: int = 6
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.eps_adam <= 0:
            raise ConfigError("learning rate and Adam epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.folds < 1:
            raise ConfigError("batch_size, max_epochs and folds must be >= 1")
        if not 0 <= self.patience_epochs <= self.max_epochs:
            raise ConfigError("patience must be between 0 and max_epochs")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- labels and loss

def rasterize(events: Sequence[SpindleEvent], fs: float, n: int) -> np.ndarray:
    """Sample t is 1 iff t / fs lies in [onset, onset + duration)."""
    mask = np.zeros(n, dtype=np.uint8)
    t_end = n / fs
    for ev in events:
        if ev.offset_s > t_end + 1e-9:
            raise ValueError(f"event {ev} extends past the segment end ({t_end} s)")
        # small tolerance so onsets on the sample grid do not lose a sample to rounding
        start = int(math.ceil(ev.onset_s * fs - 1e-6))
        stop = int(math.ceil(ev.offset_s * fs - 1e-6))
        mask[start:min(stop, n)] = 1
    return mask


def one_hot(masks: np.ndarray) -> np.ndarray:
    """[B, T] binary spindle masks to [B, 2, T] with the spindle class first."""
    masks = np.asarray(masks)
    out = np.empty((masks.shape[0], 2, masks.shape[1]), dtype=np.float32)
    out[:, model.SPINDLE] = masks
    out[:, 1 - model.SPINDLE] = 1 - masks
    return out


def generalized_dice_loss(p: np.ndarray, r: np.ndarray, eps: float = GDL_EPS):
    """Generalized dice loss over a whole batch and its gradient wrt ``p``.

    Class weights are 1 / ((sum of reference mass)^2 + eps) with sums over every
    sample in the batch.
    """
    axes = (0, 2)
    p64 = p.astype(np.float64)
    r64 = r.astype(np.float64)
    w = 1.0 / (r64.sum(axis=axes) ** 2 + eps)
    inter = (w * (r64 * p64).sum(axis=axes)).sum()
    union = (w * (r64 + p64).sum(axis=axes)).sum()
    loss = 1.0 - 2.0 * inter / union
    wb = w[None, :, None]
    grad = -2.0 * wb * (r64 * union - inter) / union ** 2
    return float(loss), grad.astype(p.dtype)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """Bias-corrected Adam update applied in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        params[name] -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps_adam)).astype(
            params[name].dtype, copy=False)


# ---------------------------------------------------------------- folds and splits

@dataclass
class SubjectInfo:
    subject_id: str
    cohort: str
    n_segments: int


def make_folds(subjects: Sequence[SubjectInfo], k: int, seed: int = 0,
               many_segments: int = 10) -> dict[str, int]:
    """Assign subjects to ``k`` folds.

    Subjects with ``many_segments`` or more segments are dealt round-robin so
    every fold gets the same number (+-1); the rest go greedily to the fold
    with the fewest segments so far.
    """
    if k < 1:
        raise ConfigError("need at least one fold")
    if len(subjects) < k:
        raise ConfigError(f"{len(subjects)} subjects cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    heavy = [s for s in order if s.n_segments >= many_segments]
    light = [s for s in order if s.n_segments < many_segments]
    assignment: dict[str, int] = {}
    seg_counts = [0] * k
    subj_counts = [0] * k
    for i, s in enumerate(heavy):
        fold = i % k
        assignment[s.subject_id] = fold
        seg_counts[fold] += s.n_segments
        subj_counts[fold] += 1
    for s in sorted(light, key=lambda s: -s.n_segments):
        fold = min(range(k), key=lambda f: (seg_counts[f], subj_counts[f], f))
        assignment[s.subject_id] = fold
        seg_counts[fold] += s.n_segments
        subj_counts[fold] += 1
    return assignment


@dataclass
class SplitResult:
    train: list[str]
    test: list[str]
    scores: list[float]
    chosen: int
    candidates: list[list[str]]


def draw_test_candidate(subjects: Sequence[SubjectInfo], rng: np.random.Generator,
                        n_per_cohort: int, segments_per_cohort: int | None,
                        many_segments: int, max_tries: int = 1000) -> list[str]:
    chosen = []
    for cohort in ("younger", "older"):
        pool = [s for s in subjects if s.cohort == cohort and s.n_segments < many_segments]
        if len(pool) < n_per_cohort:
            raise ConfigError(f"only {len(pool)} eligible {cohort} subjects, need {n_per_cohort}")
        for _ in range(max_tries):
            pick = [pool[i] for i in rng.choice(len(pool), n_per_cohort, replace=False)]
            if segments_per_cohort is None or sum(s.n_segments for s in pick) == segments_per_cohort:
                break
        else:
            raise ConfigError(f"cannot draw {n_per_cohort} {cohort} subjects "
                              f"with {segments_per_cohort} segments")
        chosen.extend(sorted(s.subject_id for s in pick))
    return chosen


def select_median_split(subjects: Sequence[SubjectInfo], scorer: Callable[[list[str]], float],
                        candidates: int = 25, seed: int = 0, n_per_cohort: int = 18,
                        segments_per_cohort: int | None = 54,
                        many_segments: int = 10) -> SplitResult:
    """Draw candidate test sets and keep the one whose score is the median.

    Candidates exclude subjects with ``many_segments`` or more segments and hold
    ``n_per_cohort`` subjects of each cohort. With an even number of
    candidates the lower median is used.
    """
    if candidates < 1:
        raise ConfigError("need at least one candidate")
    rng = np.random.default_rng(seed)
    cands = [draw_test_candidate(subjects, rng, n_per_cohort, segments_per_cohort, many_segments)
             for _ in range(candidates)]
    scores = [float(scorer(c)) for c in cands]
    ranked = sorted(range(candidates), key=lambda i: (scores[i], i))
    chosen = ranked[(candidates - 1) // 2]
    test = set(cands[chosen])
    train = sorted(s.subject_id for s in subjects if s.subject_id not in test)
    return SplitResult(train, sorted(test), scores, chosen, cands)


# ---------------------------------------------------------------- training loop

def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled minibatch indices; the last short batch is kept."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def validation_f1_bar(params: ModelParams, x: np.ndarray, events: Sequence[Sequence[SpindleEvent]],
                      fs: float, grid=metrics.THRESHOLD_GRID, batch_size: int = 12) -> float:
    detections = predict_events(params, x, fs, batch_size=batch_size)
    curve = metrics.pooled_curve(zip(events, detections), grid)
    return metrics.f1_bar(grid, [p.f1 for p in curve])


def predict_events(params: ModelParams, x: np.ndarray, fs: float,
                   batch_size: int = 12) -> list[list[SpindleEvent]]:
    probs = model.predict_proba(params, x, batch_size=batch_size)
    return [extract_events(p, params.arch.smoothing_width, fs) for p in probs]


@dataclass
class TrainState:
    """Everything needed to continue training deterministically."""

    params: ModelParams
    adam: AdamState
    epoch: int = 0
    best: ModelParams | None = None
    best_score: float = -math.inf
    since_best: int = 0
    history: list[dict] = field(default_factory=list)


def train_step(params: ModelParams, x: np.ndarray, masks: np.ndarray, adam: AdamState,
               config: TrainConfig) -> float:
    tape = model.Tape("train")
    probs = model.forward(params, x[:, None, :], mode="train", tape=tape)
    loss, grad = generalized_dice_loss(probs, one_hot(masks))
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    grads = model.backward(params, tape, grad)
    adam_step(params.tensors, grads, adam, config)
    return loss


def train_fold(train_x: np.ndarray, train_masks: np.ndarray, val_x: np.ndarray,
               val_events: Sequence[Sequence[SpindleEvent]], arch: ArchConfig,
               config: TrainConfig, fs: float = 100.0, state: TrainState | None = None,
               on_epoch: Callable[[TrainState], None] | None = None):
    """Train one fold with early stopping on validation F1-bar.

    ``train_x`` is [N, T] float32, ``train_masks`` [N, T] binary. Returns the
    best parameters and the per-epoch history. Passing a ``state`` resumes a
    previous run; ``on_epoch`` is called after every epoch (checkpointing).
    """
    config.validate()
    if len(train_x) == 0 or len(val_x) == 0:
        raise ValueError("training and validation sets must be non-empty")
    train_x = np.asarray(train_x, dtype=np.float32)
    if state is None:
        state = TrainState(model.build(arch, seed=config.seed), AdamState())
    while state.epoch < config.max_epochs and state.since_best <= config.patience_epochs:
        epoch = state.epoch
        losses = []
        try:
            for idx in epoch_batches(len(train_x), config.batch_size, config.seed, epoch):
                losses.append(train_step(state.params, train_x[idx], train_masks[idx],
                                         state.adam, config))
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"epoch {epoch}: {exc}", state.history) from exc
        score = validation_f1_bar(state.params, val_x, val_events, fs)
        state.epoch += 1
        if score > state.best_score:
            state.best_score = score
            state.best = state.params.copy()
            state.best.meta = {"epoch": state.epoch, "best_f1_bar": score}
            state.since_best = 0
        else:
            state.since_best += 1
        state.history.append({"epoch": state.epoch, "loss": float(np.mean(losses)),
                              "val_f1_bar": score})
        log.info("epoch %d loss %.4f val F1-bar %.4f", state.epoch, np.mean(losses), score)
        if on_epoch is not None:
            on_epoch(state)
    return state.best, state.history
