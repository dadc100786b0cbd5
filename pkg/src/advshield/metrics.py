"""Genuine/adversarial error rates, operating points, detection EER, joint rates and minDCF.

Boundary conventions: a score ``s >= tau`` is accepted and ``s < tau`` is
rejected; a detection score ``d >= tau`` flags the trial as adversarial.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


class ScoredTrial(NamedTuple):
    trial_id: str
    score: float
    detection: float | None = None


@dataclass
class TrialPartition:
    gen_tgt: list[ScoredTrial] = field(default_factory=list)
    gen_ntgt: list[ScoredTrial] = field(default_factory=list)
    adv_tgt: list[ScoredTrial] = field(default_factory=list)
    adv_ntgt: list[ScoredTrial] = field(default_factory=list)

    def __post_init__(self):
        seen: set[str] = set()
        for group in (self.gen_tgt, self.gen_ntgt, self.adv_tgt, self.adv_ntgt):
            for t in group:
                if t.trial_id in seen:
                    raise ValueError(f"trial {t.trial_id!r} appears in more than one partition set")
                seen.add(t.trial_id)


@dataclass(frozen=True)
class OperatingPoint:
    tau: float
    far_at_tau: float
    frr_at_tau: float

    @property
    def eer(self) -> float:
        return 0.5 * (self.far_at_tau + self.frr_at_tau)


@dataclass
class MetricsReport:
    gen_eer: float
    adv_far: float
    adv_frr: float
    eer_det: float
    j_far: float
    j_frr: float
    min_dcf: float
    pooling_ratio: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def _scores(values) -> np.ndarray:
    arr = np.asarray([v.score if isinstance(v, ScoredTrial) else v for v in values], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("score list is empty")
    return arr


def far(scores_nontarget, tau: float) -> float:
    s = _scores(scores_nontarget)
    return float(np.count_nonzero(s >= tau)) / s.size


def frr(scores_target, tau: float) -> float:
    s = _scores(scores_target)
    return float(np.count_nonzero(s < tau)) / s.size


def candidate_thresholds(*score_lists) -> np.ndarray:
    """All distinct scores together with the midpoints between neighbours."""
    distinct = np.unique(np.concatenate([np.asarray(s, dtype=np.float64) for s in score_lists]))
    mids = 0.5 * (distinct[1:] + distinct[:-1])
    return np.unique(np.concatenate([distinct, mids]))


def _rates_at(tgt: np.ndarray, ntgt: np.ndarray, taus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tgt_sorted = np.sort(tgt)
    ntgt_sorted = np.sort(ntgt)
    # count(s >= tau) = n - count(s < tau); searchsorted 'left' counts s < tau
    far_v = (ntgt.size - np.searchsorted(ntgt_sorted, taus, side="left")) / ntgt.size
    frr_v = np.searchsorted(tgt_sorted, taus, side="left") / tgt.size
    return far_v, frr_v


def solve_eer(scores_target, scores_nontarget) -> OperatingPoint:
    """Threshold where FAR and FRR are closest; the EER is ``.eer``.

    Ties in ``|FAR - FRR|`` go to the smallest threshold.
    """
    tgt, ntgt = _scores(scores_target), _scores(scores_nontarget)
    taus = candidate_thresholds(tgt, ntgt)
    far_v, frr_v = _rates_at(tgt, ntgt, taus)
    gap = np.abs(far_v - frr_v)
    best = int(np.flatnonzero(gap == gap.min())[0])
    return OperatingPoint(float(taus[best]), float(far_v[best]), float(frr_v[best]))


def adv_rates(partition: TrialPartition, tau_asv: float) -> tuple[float, float]:
    """AdvFAR and AdvFRR at a fixed, genuine-calibrated operating point."""
    if not partition.adv_ntgt or not partition.adv_tgt:
        raise ValueError("adversarial target and non-target sets must be non-empty")
    return far(partition.adv_ntgt, tau_asv), frr(partition.adv_tgt, tau_asv)


def gen_rates(partition: TrialPartition, tau_asv: float) -> tuple[float, float]:
    return far(partition.gen_ntgt, tau_asv), frr(partition.gen_tgt, tau_asv)


def detection_eer(d_genuine, d_adversarial) -> OperatingPoint:
    """EER of the detector: adversarial with ``d < tau`` are missed, genuine with ``d >= tau`` are flagged.

    ``far_at_tau`` is the fraction of missed adversarial trials and
    ``frr_at_tau`` the fraction of flagged genuine trials.
    """
    op = solve_eer(d_adversarial, d_genuine)
    # solve_eer's FRR counts adversarial d < tau, its FAR counts genuine d >= tau
    return OperatingPoint(op.tau, op.frr_at_tau, op.far_at_tau)


def pool_by_ratio(
    adversarial: Sequence[ScoredTrial],
    genuine: Sequence[ScoredTrial],
    ratio: float,
    rng: np.random.Generator,
) -> tuple[list[ScoredTrial], list[ScoredTrial]]:
    """Down-sample the larger pool so that ``len(adv) / len(gen)`` approximates ``ratio``.

    Selected items keep their original order.
    """
    if ratio < 0:
        raise ValueError("pooling ratio must be >= 0")
    adversarial, genuine = list(adversarial), list(genuine)
    if ratio == 0:
        return [], genuine
    n_adv, n_gen = len(adversarial), len(genuine)
    if n_adv > ratio * n_gen:
        keep = int(round(ratio * n_gen))
        idx = np.sort(rng.choice(n_adv, size=keep, replace=False))
        return [adversarial[i] for i in idx], genuine
    keep = int(round(n_adv / ratio))
    idx = np.sort(rng.choice(n_gen, size=min(keep, n_gen), replace=False))
    return adversarial, [genuine[i] for i in idx]


def joint_purification(
    partition: TrialPartition,
    tau_asv: float,
    ratio: float = 1.0,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """j-FAR and j-FRR over the pooled adversarial and genuine trials of each class."""
    if ratio < 0:
        raise ValueError("pooling ratio must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    adv_n, gen_n = pool_by_ratio(partition.adv_ntgt, partition.gen_ntgt, ratio, rng)
    adv_t, gen_t = pool_by_ratio(partition.adv_tgt, partition.gen_tgt, ratio, rng)
    return far(adv_n + gen_n, tau_asv), frr(adv_t + gen_t, tau_asv)


def joint_detection(partition: TrialPartition, tau_det: float, tau_asv: float) -> tuple[float, float]:
    """j-FAR and j-FRR of the detector in tandem with ASV.

    Every adversarial trial belongs to the negative class. A negative trial is
    falsely accepted only if it evades the detector and passes ASV; a genuine
    target is falsely rejected if either stage rejects it.
    """
    negatives = partition.adv_ntgt + partition.adv_tgt + partition.gen_ntgt
    positives = partition.gen_tgt
    if not negatives or not positives:
        raise ValueError("joint detection needs both negative and positive trials")
    for t in negatives + positives:
        if t.detection is None:
            raise ValueError(f"trial {t.trial_id!r} has no detection score")
    d_neg = np.array([t.detection for t in negatives], dtype=np.float64)
    s_neg = np.array([t.score for t in negatives], dtype=np.float64)
    d_pos = np.array([t.detection for t in positives], dtype=np.float64)
    s_pos = np.array([t.score for t in positives], dtype=np.float64)
    j_far = np.count_nonzero((d_neg < tau_det) & (s_neg >= tau_asv)) / d_neg.size
    j_frr = np.count_nonzero((d_pos >= tau_det) | (s_pos < tau_asv)) / d_pos.size
    return float(j_far), float(j_frr)


def min_dcf(scores_target, scores_nontarget, p_target: float = 0.01) -> float:
    """Normalized minimum detection cost with unit miss and false-alarm costs."""
    if not 0.0 < p_target < 1.0:
        raise ValueError("p_target must lie strictly between 0 and 1")
    tgt, ntgt = _scores(scores_target), _scores(scores_nontarget)
    taus = np.concatenate([[-np.inf], candidate_thresholds(tgt, ntgt), [np.inf]])
    far_v, frr_v = _rates_at(tgt, ntgt, taus)
    cost = p_target * frr_v + (1.0 - p_target) * far_v
    return float(cost.min() / min(p_target, 1.0 - p_target))
