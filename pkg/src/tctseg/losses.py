"""Partial-label losses: channel merging, Dice supervision, filtered
MSH/ATH consistency, and the uncertainty-weighted total objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tctseg import tensor as T
from tctseg.errors import ConfigError, DomainError, ShapeError

DICE_EPS = 1e-5

FILTER_STRATEGIES = ("none", "fixed", "batch_mean", "task_mean", "task_median", "confidence")
WEIGHTING_MODES = ("fixed", "uwl", "uauwl")


@dataclass(frozen=True)
class LabelSpace:
    num_classes: int
    names: tuple = ()

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("a label space needs at least one foreground class")
        if self.names and len(self.names) != self.num_classes:
            raise ConfigError(f"{len(self.names)} class names given for {self.num_classes} classes")

    @property
    def omega(self):
        return tuple(range(1, self.num_classes + 1))


@dataclass(frozen=True)
class PartialLabelSet:
    """Annotated classes ``phi`` of a sample, within classes 1..num_classes."""

    phi: tuple
    num_classes: int

    def __post_init__(self):
        phi = tuple(sorted(set(int(c) for c in self.phi)))
        object.__setattr__(self, "phi", phi)
        if not phi:
            raise DomainError("the annotated class set must be nonempty")
        bad = [c for c in phi if not 1 <= c <= self.num_classes]
        if bad:
            raise DomainError(f"annotated classes {bad} outside 1..{self.num_classes}")

    @property
    def complement(self):
        return tuple(c for c in range(1, self.num_classes + 1) if c not in self.phi)

    @property
    def m(self):
        return len(self.phi)


def one_hot_target(labels, label_set):
    """One-hot over ``{0} + phi`` (background first) from an integer label array.

    ``labels`` is ``[Z, Y, X]`` or ``[B, Z, Y, X]``; voxels holding a class
    outside phi count as background. Returns a float32 array with the channel
    axis at position 1 (a leading batch axis is added when absent).
    """
    labels = np.asarray(labels)
    if labels.ndim == 3:
        labels = labels[None]
    chans = [np.zeros(labels.shape, np.float32)]
    for c in label_set.phi:
        chans.append((labels == c).astype(np.float32))
    fg = np.sum(chans[1:], axis=0)
    chans[0] = 1.0 - fg
    return np.stack(chans, axis=1)


def main_merge_matrix(label_set, target="phi", exclude_self=False):
    """Constant matrix for ``merge_main_probs``.

    Rows are output channels: background, then ``phi`` (``target='phi'``) or
    every class (``target='omega'``). With ``exclude_self`` an unlabeled
    class that keeps its own channel is not also folded into background.
    """
    n = label_set.num_classes
    keep = label_set.phi if target == "phi" else tuple(range(1, n + 1))
    if target not in ("phi", "omega"):
        raise ConfigError(f"unknown merge target {target!r}")
    m = np.zeros((1 + len(keep), n + 1))
    m[0, 0] = 1.0
    for c in label_set.complement:
        if not (exclude_self and c in keep):
            m[0, c] = 1.0
    for row, c in enumerate(keep, start=1):
        m[row, c] = 1.0
    return m


def merge_main_probs(p, label_set, target="phi", exclude_self=False):
    """Fold unlabeled-class probabilities into the background channel.

    ``target='phi'`` keeps only annotated foreground channels (supervised
    loss); ``target='omega'`` keeps every class channel (consistency loss).
    """
    if p.shape[1] != label_set.num_classes + 1:
        raise ShapeError(
            f"expected {label_set.num_classes + 1} probability channels, got {p.shape[1]}"
        )
    return T.channel_mix(p, main_merge_matrix(label_set, target, exclude_self))


def _dice_loss(pred, target, eps=DICE_EPS):
    """1 - mean over channels of soft Dice, summing over every non-channel axis."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    tgt = target if isinstance(target, T.Tensor) else T.Tensor(np.asarray(target, dtype=pred.dtype))
    axes = (0,) + tuple(range(2, pred.ndim))
    inter = T.tsum(T.mul(pred, tgt), axis=axes)
    denom = T.add(T.tsum(pred, axis=axes), T.Tensor(tgt.data.sum(axis=axes)))
    dice = T.div(T.add(T.scale(inter, 2.0), eps), T.add(denom, eps))
    return T.sub(1.0, T.mean(dice))


def dice_loss_main(q, y, eps=DICE_EPS):
    """Dice loss between merged main-head probabilities and the partial one-hot target."""
    return _dice_loss(q, y, eps)


def merge_aux_target(y, label_set, j):
    """Two-channel (background, class j) target for auxiliary head ``j``."""
    if j not in label_set.phi:
        raise DomainError(f"class {j} is not annotated (annotated: {label_set.phi})")
    y = np.asarray(y)
    ch = 1 + label_set.phi.index(j)
    fg = y[:, ch]
    bg = y.sum(axis=1) - fg
    return np.stack([bg, fg], axis=1)


def dice_loss_aux_terms(ath_probs, y, label_set, eps=DICE_EPS):
    """Per-class auxiliary Dice terms, ``{j: loss}`` for ``j`` in phi.

    ``ath_probs`` maps class index to that head's two-channel softmax (a list
    indexed from class 1 is accepted too).
    """
    terms = {}
    for j in label_set.phi:
        g = ath_probs[j] if isinstance(ath_probs, dict) else ath_probs[j - 1]
        terms[j] = _dice_loss(g, merge_aux_target(y, label_set, j), eps)
    return terms


def dice_loss_aux(ath_probs, y, label_set, eps=DICE_EPS):
    terms = dice_loss_aux_terms(ath_probs, y, label_set, eps)
    total = None
    for t in terms.values():
        total = t if total is None else T.add(total, t)
    return total


# ------------------------------------------------------------------ filtering

@dataclass
class FilterConfig:
    strategy: str = "task_median"
    fixed_threshold: float = 0.5
    binarize_level: float = 0.5

    def __post_init__(self):
        if self.strategy not in FILTER_STRATEGIES:
            raise ConfigError(f"unknown filter strategy {self.strategy!r}; choose from {FILTER_STRATEGIES}")
        if not 0.0 <= self.fixed_threshold <= 1.0:
            raise ConfigError(f"fixed_threshold must lie in [0, 1], got {self.fixed_threshold}")


@dataclass
class FilterDecision:
    ious: np.ndarray
    theta: object  # float, or per-class array for batch_mean
    retained: np.ndarray

    @property
    def retained_count(self):
        return int(np.count_nonzero(self.retained))

    def theta_value(self):
        """Scalar summary of the threshold (mean when it is per-class)."""
        return float(np.mean(self.theta))


def _iou(a, b):
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def lower_median(values):
    """Median; for an even count, the lower of the two middle elements."""
    s = np.sort(np.asarray(values, dtype=np.float64))
    return float(s[(len(s) - 1) // 2])


def threshold_from_ious(ious, cfg):
    """(theta, retained) for the IoU-based strategies."""
    ious = np.asarray(ious, dtype=np.float64)
    if cfg.strategy == "none":
        return 0.0, np.ones(len(ious), bool)
    if cfg.strategy == "fixed":
        theta = float(cfg.fixed_threshold)
    elif cfg.strategy == "task_mean":
        theta = float(ious.mean())
    elif cfg.strategy == "task_median":
        theta = lower_median(ious)
    else:
        raise ConfigError(f"strategy {cfg.strategy!r} needs more than the IoU vector")
    return theta, ious >= theta


def binary_confidence(fg):
    """Mean of ``1 - H(p)/log 2`` over voxels, ``H`` the binary entropy."""
    p = np.clip(np.asarray(fg, dtype=np.float64), 1e-12, 1 - 1e-12)
    h = -(p * np.log(p) + (1 - p) * np.log(1 - p))
    return float(np.mean(1.0 - h / math.log(2.0)))


def compute_filter(q, ath_probs, cfg):
    """Decide which classes keep their consistency term.

    ``q`` is the all-class merged main-head output ``[B, N+1, ...]``;
    ``ath_probs`` the N two-channel head outputs. Masks are thresholded at
    ``cfg.binarize_level`` (strictly greater) over the whole batch.
    """
    qd = q.data if isinstance(q, T.Tensor) else np.asarray(q)
    gs = [g.data if isinstance(g, T.Tensor) else np.asarray(g) for g in ath_probs]
    n = qd.shape[1] - 1
    if len(gs) != n:
        raise ShapeError(f"{len(gs)} auxiliary outputs for {n} classes")
    level = cfg.binarize_level
    ious = np.empty(n)
    for j in range(1, n + 1):
        ious[j - 1] = _iou(qd[:, j] > level, gs[j - 1][:, 1] > level)

    if cfg.strategy == "confidence":
        conf = np.array([binary_confidence(g[:, 1]) for g in gs])
        return FilterDecision(ious, 0.5, conf >= 0.5)
    if cfg.strategy == "batch_mean":
        per_sample = np.empty((qd.shape[0], n))
        for b in range(qd.shape[0]):
            for j in range(1, n + 1):
                per_sample[b, j - 1] = _iou(qd[b, j] > level, gs[j - 1][b, 1] > level)
        theta = per_sample.mean(axis=0)
        return FilterDecision(ious, theta, ious >= theta)
    theta, retained = threshold_from_ious(ious, cfg)
    return FilterDecision(ious, theta, retained)


def consistency_loss(q, ath_probs, decision):
    """Squared MSH/ATH disagreement on {background, j}, summed over retained classes.

    Normalised by twice the voxel count of the whole input. The filter
    decision is a constant here.
    """
    n = q.shape[1] - 1
    nv = int(np.prod(q.shape)) // q.shape[1]
    total = None
    for j in range(1, n + 1):
        if not decision.retained[j - 1]:
            continue
        g = ath_probs[j - 1]
        sel = np.zeros((2, n + 1))
        sel[0, 0] = 1.0
        sel[1, j] = 1.0
        diff = T.sub(T.channel_mix(q, sel), g)
        term = T.scale(T.tsum(T.square(diff)), 1.0 / (2 * nv))
        total = term if total is None else T.add(total, term)
    if total is None:
        return T.Tensor(np.zeros((), dtype=q.dtype))
    return total


# ---------------------------------------------------------------- weighting

@dataclass
class RampSchedule:
    w_max: float = 0.1
    ramp_epochs: float = 16.0


def ramp_weight(t, sched):
    """Gaussian ramp-up ``w_max * exp(-5 (1 - t/T)^2)``, flat after ``T``."""
    if t < 0:
        raise DomainError(f"epoch must be >= 0, got {t}")
    if sched.ramp_epochs <= 0:
        return float(sched.w_max)
    frac = min(t, sched.ramp_epochs) / sched.ramp_epochs
    return float(sched.w_max * math.exp(-5.0 * (1.0 - frac) ** 2))


class UncertaintyParams:
    """Learnable log-variances ``s = log sigma^2``.

    ``uauwl``: ``s1`` for the main head, one shared ``s2`` for all auxiliary
    heads. ``uwl``: ``s1`` plus one ``s`` per auxiliary head. ``fixed``: none.
    """

    def __init__(self, mode, num_classes, dtype=np.float32):
        if mode not in WEIGHTING_MODES:
            raise ConfigError(f"unknown weighting mode {mode!r}; choose from {WEIGHTING_MODES}")
        self.mode = mode
        self.num_classes = num_classes
        self.params = {}
        if mode == "fixed":
            return
        names = ["uncertainty.s1"]
        if mode == "uauwl":
            names.append("uncertainty.s2")
        else:
            names += [f"uncertainty.s_aux.{j}" for j in range(1, num_classes + 1)]
        for name in names:
            self.params[name] = T.Tensor(np.zeros((), dtype=dtype), requires_grad=True, name=name)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def weights(self):
        return {n: float(np.exp(-p.data)) for n, p in self.params.items()}


@dataclass
class LossBreakdown:
    l_main: float
    l_aux: float
    l_con: float
    total: float
    w: float
    filter: FilterDecision = None
    uncertainty_weights: dict = field(default_factory=dict)

    def is_finite(self):
        return all(math.isfinite(v) for v in (self.l_main, self.l_aux, self.l_con, self.total))


def total_loss(l_main, l_aux, l_con, u, w):
    """Combine the three terms.

    ``l_aux`` is either one scalar Tensor or, for per-head weighting, a dict
    ``{j: Tensor}``; a dict is summed for the shared modes. Any term may be
    None (treated as absent).
    """
    if isinstance(l_aux, dict):
        aux_terms = l_aux
        l_aux_sum = None
        for t in aux_terms.values():
            l_aux_sum = t if l_aux_sum is None else T.add(l_aux_sum, t)
    else:
        aux_terms = None
        l_aux_sum = l_aux

    parts = []
    if u.mode == "fixed":
        parts.append(l_main)
        if l_aux_sum is not None:
            parts.append(l_aux_sum)
    elif u.mode == "uauwl":
        s1 = u.params["uncertainty.s1"]
        s2 = u.params["uncertainty.s2"]
        parts += [T.mul(T.exp(T.scale(s1, -1.0)), l_main), T.scale(s1, 0.5)]
        if l_aux_sum is not None:
            parts += [T.mul(T.exp(T.scale(s2, -1.0)), l_aux_sum), T.scale(s2, 0.5)]
    else:
        s1 = u.params["uncertainty.s1"]
        parts += [T.mul(T.exp(T.scale(s1, -1.0)), l_main), T.scale(s1, 0.5)]
        if aux_terms is None and l_aux_sum is not None:
            raise ConfigError("uwl weighting needs per-head auxiliary terms")
        for j, term in (aux_terms or {}).items():
            sj = u.params[f"uncertainty.s_aux.{j}"]
            parts += [T.mul(T.exp(T.scale(sj, -1.0)), term), T.scale(sj, 0.5)]
    if l_con is not None and w != 0.0:
        parts.append(T.scale(l_con, w))
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    return total
