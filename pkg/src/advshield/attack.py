"""Basic Iterative Method attacks on the test side of verification trials."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .asv import AsvModel, cosine
from .dataio import ADVERSARIAL, TARGET, NONTARGET, Corpus, FeatureMatrix, Trial, Utterance


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """BIM parameters. ``epsilon`` and ``alpha`` are multiples of the per-channel
    feature std unless ``absolute`` is set."""

    epsilon: float = 0.3
    alpha: float = 0.06
    n_iters: int = 10
    aware_blocks: int = 0
    absolute: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.n_iters < 0:
            raise ValueError("n_iters must be >= 0")
        if self.n_iters >= 1 and not self.alpha > 0:
            raise ValueError("alpha must be > 0 when n_iters >= 1")
        if self.aware_blocks < 0:
            raise ValueError("aware_blocks must be >= 0")

    def radii(self, feature_std=None) -> tuple[np.ndarray, np.ndarray]:
        """Absolute L-inf radius and step size, per channel."""
        if self.absolute:
            return np.float64(self.epsilon), np.float64(self.alpha)
        if feature_std is None:
            raise ValueError("feature_std is required for std-relative epsilon")
        std = np.asarray(feature_std, dtype=np.float64)
        return self.epsilon * std, self.alpha * std


@dataclass
class AdversarialResult:
    x_adv: FeatureMatrix
    score_before: float
    score_after: float
    linf_norm: float


@dataclass
class AdversarialSet:
    features: dict[str, FeatureMatrix] = field(default_factory=dict)
    trials: list[Trial] = field(default_factory=list)
    results: list[AdversarialResult] = field(default_factory=list)


def attack_direction(label: str) -> int:
    """-1 pushes target trials' scores down, +1 pushes non-target scores up."""
    if label == TARGET:
        return -1
    if label == NONTARGET:
        return 1
    raise ValueError(f"bad trial label {label!r}")


def clip_linf(x, x_ref, epsilon_abs) -> np.ndarray:
    """Element-wise projection onto the L-inf ball of radius ``epsilon_abs`` around ``x_ref``.

    The result has the dtype of ``x_ref``; cells that rounding would push
    outside the ball are moved one ulp inward, so membership holds exactly.
    """
    x = np.asarray(x)
    ref = np.asarray(x_ref)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    eps = np.asarray(epsilon_abs, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("epsilon must be >= 0")
    ref64 = ref.astype(np.float64)
    out = np.clip(x.astype(np.float64), ref64 - eps, ref64 + eps).astype(ref.dtype)
    diff = out.astype(np.float64) - ref64
    over = diff > eps
    under = diff < -eps
    if over.any():
        out[over] = np.nextafter(out[over], ref[over])
    if under.any():
        out[under] = np.nextafter(out[under], ref[under])
    return out


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _objective_scores(asv: AsvModel, chain: Sequence[nn.Module], e_enroll: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    y = x
    for block in chain:
        y = block(y)
    return cosine(e_enroll, asv(y))


def bim_batch(asv: AsvModel, chain: Sequence[nn.Module], e_enroll: np.ndarray, x: np.ndarray,
              k: np.ndarray, eps_abs, alpha_abs, n_iters: int) -> np.ndarray:
    """Run BIM on a batch ``x`` of shape ``(B, T, D)``; returns adversarial features in ``x``'s dtype.

    ``chain`` holds the reformer blocks prepended to the differentiated
    objective; it is never called when empty.
    """
    dtype = _dtype(asv)
    e = torch.as_tensor(e_enroll, dtype=dtype)
    kk = torch.as_tensor(np.asarray(k), dtype=dtype)
    step = np.asarray(alpha_abs, dtype=np.float64)
    x_adv = np.array(x, copy=True)
    for it in range(n_iters):
        xt = torch.as_tensor(x_adv, dtype=dtype).requires_grad_(True)
        obj = (kk * _objective_scores(asv, chain, e, xt)).sum()
        (grad,) = torch.autograd.grad(obj, xt)
        if not torch.isfinite(grad).all():
            raise AttackError(f"non-finite gradient at BIM iteration {it}")
        delta = step * np.sign(grad.numpy().astype(np.float64))
        x_adv = clip_linf(x_adv.astype(np.float64) + delta, x, eps_abs)
    return x_adv


def _undefended_scores(asv: AsvModel, e_enroll: np.ndarray, x: np.ndarray) -> np.ndarray:
    dtype = _dtype(asv)
    with torch.no_grad():
        return cosine(torch.as_tensor(e_enroll, dtype=dtype), asv(torch.as_tensor(np.array(x), dtype=dtype))).double().numpy()


def _check_chain(chain, config: AttackConfig):
    chain = list(chain or ())
    if len(chain) != config.aware_blocks:
        raise ValueError(f"attack expects {config.aware_blocks} reformer blocks, got {len(chain)}")
    return chain


def bim_attack(asv: AsvModel, reformer_chain, enroll: Utterance, test: Utterance, label: str,
               config: AttackConfig, feature_std=None) -> AdversarialResult:
    chain = _check_chain(reformer_chain, config)
    if test.features.dim != asv.input_dim:
        raise ValueError(f"test features have {test.features.dim} channels, model expects {asv.input_dim}")
    eps, alpha = config.radii(feature_std)
    with torch.no_grad():
        e = asv(torch.as_tensor(np.array(enroll.features.data), dtype=_dtype(asv))).numpy()[None]
    x = test.features.data[None]
    k = np.array([attack_direction(label)])
    x_adv = bim_batch(asv, chain, e, x, k, eps, alpha, config.n_iters)
    before = _undefended_scores(asv, e, x)[0]
    after = _undefended_scores(asv, e, x_adv)[0]
    linf = float(np.max(np.abs(x_adv[0].astype(np.float64) - x[0].astype(np.float64))))
    return AdversarialResult(FeatureMatrix(x_adv[0]), float(before), float(after), linf)


def adversarial_id(index: int, trial: Trial) -> str:
    return f"adv{index:05d}_{trial.test_id}"


def attack_trial_set(asv: AsvModel, reformer_chain, corpus: Corpus, trials: Sequence[Trial],
                     config: AttackConfig, feature_std=None, batch_size: int = 200) -> AdversarialSet:
    """Attack the test side of every trial; one adversarial feature matrix per trial.

    Output trials keep the input order, point at the new adversarial ids and
    are tagged ``adversarial``.
    """
    chain = _check_chain(reformer_chain, config)
    out = AdversarialSet()
    if not trials:
        return out
    for i, t in enumerate(trials):
        for uid in (t.enroll_id, t.test_id):
            if uid not in corpus.utterances:
                raise KeyError(f"trial {i} ({t.enroll_id} {t.test_id}) references unknown utterance {uid!r}")
    eps, alpha = config.radii(feature_std)
    dtype = _dtype(asv)
    emb_cache: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for uid in sorted({t.enroll_id for t in trials}):
            emb_cache[uid] = asv(torch.as_tensor(np.array(corpus[uid].features.data), dtype=dtype)).numpy()
    for start in range(0, len(trials), batch_size):
        batch = trials[start:start + batch_size]
        e = np.stack([emb_cache[t.enroll_id] for t in batch])
        x = np.stack([corpus[t.test_id].features.data for t in batch])
        k = np.array([attack_direction(t.label) for t in batch])
        x_adv = bim_batch(asv, chain, e, x, k, eps, alpha, config.n_iters)
        before = _undefended_scores(asv, e, x)
        after = _undefended_scores(asv, e, x_adv)
        for j, t in enumerate(batch):
            idx = start + j
            adv_id = adversarial_id(idx, t)
            feats = FeatureMatrix(x_adv[j])
            linf = float(np.max(np.abs(x_adv[j].astype(np.float64) - x[j].astype(np.float64))))
            out.features[adv_id] = feats
            out.trials.append(Trial(t.enroll_id, adv_id, t.label, ADVERSARIAL))
            out.results.append(AdversarialResult(feats, float(before[j]), float(after[j]), linf))
    return out
