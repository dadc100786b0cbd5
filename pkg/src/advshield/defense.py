"""Cascaded reformer purification, smoothing-filter baselines and score-moment detection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .asv import AsvModel, cosine, extract_embedding
from .dataio import GENUINE, Utterance
from .reformer import ReformerModel

FILTER_KINDS = ("mean", "median", "gaussian")
ADVERSARIAL_DECISION = "adversarial"
GENUINE_DECISION = "genuine"


@dataclass(frozen=True)
class CascadeConfig:
    reformer_tag: str = "TCM"
    k: int = 9

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("cascade length K must be >= 0")


@dataclass
class ScoreTrace:
    trial_id: str
    scores: np.ndarray
    provenance: str = GENUINE
    label: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or self.scores.size < 1:
            raise ValueError("a score trace holds at least one score")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"trace {self.trial_id!r} has non-finite scores")

    @property
    def k(self) -> int:
        return self.scores.size - 1


@dataclass(frozen=True)
class DetectionScore:
    trial_id: str
    moment_order: int
    s_bar: float
    m_k: float
    t_k: float


def _param_dtype(model):
    return next(model.parameters()).dtype


def purify_steps(reformer: ReformerModel, x, k: int) -> list[np.ndarray]:
    """``[x, R(x), R(R(x)), ...]`` with ``k + 1`` entries, for a matrix or a batch."""
    arr = np.asarray(getattr(x, "data", x))
    if arr.shape[-1] != reformer.input_dim:
        raise ValueError(f"features have {arr.shape[-1]} channels, reformer expects {reformer.input_dim}")
    outs = [arr]
    if k == 0:
        return outs
    with torch.no_grad():
        h = torch.as_tensor(np.array(arr), dtype=_param_dtype(reformer))
        for _ in range(k):
            h = reformer(h)
            outs.append(h.numpy().astype(arr.dtype))
    return outs


def purify(cascade: CascadeConfig, reformer: ReformerModel, x) -> np.ndarray:
    """Pass ``x`` through the same reformer ``cascade.k`` times; ``k = 0`` is the identity."""
    if reformer.tag != cascade.reformer_tag:
        raise ValueError(f"cascade wants reformer {cascade.reformer_tag!r}, got {reformer.tag!r}")
    return purify_steps(reformer, x, cascade.k)[-1]


def gaussian_kernel(kernel: int, sigma: float) -> np.ndarray:
    half = kernel // 2
    if sigma <= 0:
        k1 = np.zeros(kernel)
        k1[half] = 1.0
    else:
        r = np.arange(-half, half + 1, dtype=np.float64)
        k1 = np.exp(-0.5 * (r / sigma) ** 2)
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def filter_baseline(kind: str, x, kernel: int = 3, sigma: float = 1.0) -> np.ndarray:
    """2-D sliding-window smoothing over a ``T x D`` matrix with edge replication."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {kernel}")
    arr = np.asarray(getattr(x, "data", x))
    a64 = arr.astype(np.float64)
    if kind == "mean":
        out = ndimage.uniform_filter(a64, size=kernel, mode="nearest")
    elif kind == "median":
        out = ndimage.median_filter(a64, size=kernel, mode="nearest")
    elif kind == "gaussian":
        out = ndimage.correlate(a64, gaussian_kernel(kernel, sigma), mode="nearest")
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    return out.astype(arr.dtype)


def cascade_scores(asv: AsvModel, reformer: ReformerModel, k: int, enroll: Utterance, test,
                   trial_id: str = "", provenance: str = GENUINE, label: str = "") -> ScoreTrace:
    """Scores after 0..K reformer passes on the test side; enrollment is never purified."""
    x = test.features.data if isinstance(test, Utterance) else np.asarray(getattr(test, "data", test))
    e_enroll = extract_embedding(asv, enroll.features.data)
    steps = purify_steps(reformer, x, k)
    scores = batch_scores(asv, np.repeat(e_enroll[None], len(steps), axis=0), np.stack(steps))
    return ScoreTrace(trial_id, scores, provenance, label)


def batch_scores(asv: AsvModel, e_enroll: np.ndarray, x: np.ndarray) -> np.ndarray:
    dtype = _param_dtype(asv)
    with torch.no_grad():
        return cosine(torch.as_tensor(e_enroll, dtype=dtype), asv(torch.as_tensor(np.array(x), dtype=dtype))).double().numpy()


def batch_traces(asv: AsvModel, reformer: ReformerModel | None, k: int,
                 e_enroll: np.ndarray, x: np.ndarray, batch_size: int = 250) -> np.ndarray:
    """Score traces for many trials at once: ``(B, K + 1)`` scores."""
    rows = []
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        eb = e_enroll[start:start + batch_size]
        steps = [xb] if reformer is None else purify_steps(reformer, xb, k)
        rows.append(np.stack([batch_scores(asv, eb, s) for s in steps], axis=1))
    return np.concatenate(rows) if rows else np.zeros((0, k + 1))


def detection_score(trace: ScoreTrace | Sequence[float], k: int = 5, include_s0: bool = True,
                    trial_id: str | None = None) -> DetectionScore:
    """Absolute ``k``-th central moment of the trace scores."""
    if k < 2:
        raise ValueError("moment order must be >= 2")
    scores = trace.scores if isinstance(trace, ScoreTrace) else np.asarray(trace, dtype=np.float64)
    tid = trial_id if trial_id is not None else getattr(trace, "trial_id", "")
    if not include_s0:
        scores = scores[1:]
    if scores.size < 2:
        raise ValueError("moments need at least two scores in the trace")
    s_bar = float(np.mean(scores))
    m_k = float(np.mean((scores - s_bar) ** k))
    return DetectionScore(tid, k, s_bar, m_k, abs(m_k))


def trace_moments(traces: np.ndarray, k: int, include_s0: bool = True) -> np.ndarray:
    """Vectorized ``t_k`` over the rows of a ``(B, K + 1)`` score array."""
    s = traces if include_s0 else traces[:, 1:]
    if s.shape[1] < 2:
        raise ValueError("moments need at least two scores in the trace")
    centered = s - s.mean(axis=1, keepdims=True)
    return np.abs(np.mean(centered ** k, axis=1))


def detect(d: float, tau_det: float) -> str:
    return ADVERSARIAL_DECISION if d >= tau_det else GENUINE_DECISION


def format_trace(trace: ScoreTrace) -> str:
    return " ".join([trace.trial_id, trace.provenance, trace.label] + [repr(float(s)) for s in trace.scores])


def save_traces(path, traces: Sequence[ScoreTrace]) -> None:
    Path(path).write_text("".join(format_trace(t) + "\n" for t in traces), encoding="utf-8")


def load_traces(path) -> list[ScoreTrace]:
    out = []
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) < 4:
            raise ValueError(f"line {no}: trace needs an id, provenance, label and at least one score")
        out.append(ScoreTrace(parts[0], np.array([float(v) for v in parts[3:]]), parts[1], parts[2]))
    return out


def filter_fn(kind: str, kernel: int = 3, sigma: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: filter_baseline(kind, x, kernel, sigma)
