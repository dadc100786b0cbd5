"""Speaker embedding extractor with cosine scoring, trained with AAM-softmax."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .dataio import Corpus, FeatureMatrix, Trial
from .metrics import OperatingPoint, solve_eer

ROLE_PARAMS = {"r-vector": (0.2, 30.0), "x-vector": (0.3, 32.0)}
_STD_EPS = 1e-5


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    scale: float = 30.0
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    role: str = "r-vector"
    hidden_dim: int = 128
    embed_dim: int = 32

    def __post_init__(self):
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError("AAM margin must satisfy 0 <= m < pi/2")
        if not self.scale > 0:
            raise ValueError("AAM scale must be > 0")
        if self.embed_dim < 2:
            raise ValueError("embedding dim must be >= 2")

    @classmethod
    def for_role(cls, role: str, **kwargs) -> "TrainConfig":
        """Config with the margin and scale used for the given system role."""
        margin, scale = ROLE_PARAMS[role]
        return cls(margin=margin, scale=scale, role=role, **kwargs)


class AsvModel(nn.Module):
    """Mean+std statistics pooling followed by a two-hidden-layer MLP.

    ``stats_mean``/``stats_std`` are fixed buffers that standardize the pooled
    statistics; they are set once from the training corpus.
    """

    def __init__(self, input_dim: int, n_classes: int, hidden_dim: int = 128, embed_dim: int = 32,
                 margin: float = 0.2, scale: float = 30.0, role: str = "r-vector"):
        super().__init__()
        self.input_dim = input_dim
        self.n_classes = n_classes
        self.margin = margin
        self.scale = scale
        self.role = role
        self.tau: float | None = None
        self.register_buffer("stats_mean", torch.zeros(2 * input_dim))
        self.register_buffer("stats_std", torch.ones(2 * input_dim))
        self.embedder = nn.Sequential(
            nn.Linear(2 * input_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, embed_dim),
        )
        w = torch.randn(n_classes, embed_dim)
        self.class_weights = nn.Parameter(w / w.norm(dim=1, keepdim=True))

    @property
    def embed_dim(self) -> int:
        return self.class_weights.shape[1]

    def pool(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=-2)
        var = ((x - mean.unsqueeze(-2)) ** 2).mean(dim=-2)
        return torch.cat([mean, torch.sqrt(var + _STD_EPS)], dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Embeddings for ``x`` of shape ``(..., T, D)``."""
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} feature channels, got {x.shape[-1]}")
        stats = (self.pool(x) - self.stats_mean) / self.stats_std
        return self.embedder(stats)

    @property
    def dtype(self) -> torch.dtype:
        return self.class_weights.dtype


def _as_tensor(x, model: nn.Module) -> torch.Tensor:
    if isinstance(x, FeatureMatrix):
        x = x.data
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.array(x), dtype=dtype)


def extract_embedding(model: AsvModel, x) -> np.ndarray:
    with torch.no_grad():
        return model(_as_tensor(x, model)).double().numpy()


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity without the epsilon clamping of ``F.cosine_similarity``."""
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def score(e_i, e_j) -> float:
    a = np.asarray(e_i, dtype=np.float64)
    b = np.asarray(e_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score is undefined for a zero embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def aam_softmax_loss(embeddings: torch.Tensor, weights: torch.Tensor, labels: torch.Tensor,
                     margin: float, scale: float) -> torch.Tensor:
    """Additive angular margin softmax: the true-class logit is ``s*cos(theta + m)``."""
    if not 0.0 <= margin < math.pi / 2:
        raise ValueError("AAM margin must satisfy 0 <= m < pi/2")
    e = embeddings / embeddings.norm(dim=1, keepdim=True)
    w = weights / weights.norm(dim=1, keepdim=True)
    cos = e @ w.T
    cos_y = cos.gather(1, labels[:, None]).squeeze(1)
    sin_y = torch.sqrt((1.0 - cos_y * cos_y).clamp_min(1e-12))
    target_logit = cos_y * math.cos(margin) - sin_y * math.sin(margin)
    one_hot = torch.zeros_like(cos).scatter_(1, labels[:, None], 1.0)
    logits = scale * (cos * (1 - one_hot) + target_logit[:, None] * one_hot)
    return nn.functional.cross_entropy(logits, labels)


def _renormalize(model: AsvModel):
    with torch.no_grad():
        model.class_weights /= model.class_weights.norm(dim=1, keepdim=True)


def _fit(model: AsvModel, feats: torch.Tensor, labels: torch.Tensor, config: TrainConfig,
         epochs: int, generator: torch.Generator) -> list[float]:
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    n = feats.shape[0]
    losses = []
    for epoch in range(epochs):
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = aam_softmax_loss(model(feats[idx]), model.class_weights, labels[idx], model.margin, model.scale)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"AAM-softmax loss became non-finite in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            _renormalize(model)
            losses.append(loss.item())
    return losses


def _stack(corpus: Corpus, speakers: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
    lookup = {s: i for i, s in enumerate(speakers)}
    ids = sorted(corpus.utterances)
    feats = torch.as_tensor(np.stack([corpus[i].features.data for i in ids]))
    labels = torch.as_tensor([lookup[corpus[i].speaker_id] for i in ids])
    return feats, labels


def train_asv(corpus: Corpus, config: TrainConfig, heldout: Corpus | None = None) -> AsvModel:
    """Train on every utterance of ``corpus`` and calibrate ``tau`` on genuine trials.

    Calibration uses ``heldout.trials`` when given, else ``corpus.trials``.
    """
    speakers = corpus.speakers
    if len(speakers) < 2:
        raise ValueError("ASV training needs at least two speakers")
    lengths = {u.features.n_frames for u in corpus.utterances.values()}
    if len(lengths) != 1:
        raise ValueError("training utterances must share one frame count")
    feats, labels = _stack(corpus, speakers)
    generator = torch.Generator().manual_seed(config.seed)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = AsvModel(corpus.feature_dim, len(speakers), config.hidden_dim, config.embed_dim,
                         config.margin, config.scale, config.role)
    with torch.no_grad():
        stats = model.pool(feats.double())
        model.stats_mean.copy_(stats.mean(0))
        model.stats_std.copy_(stats.std(0).clamp_min(1e-6))
    model.train_losses = _fit(model, feats, labels, config, config.epochs, generator)
    model.eval()
    calib = heldout if heldout is not None else corpus
    calibrate(model, calib, calib.trials)
    return model


def score_trials(model: AsvModel, corpus: Corpus, trials: Sequence[Trial],
                 transform: Callable[[np.ndarray], np.ndarray] | None = None,
                 test_features: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Cosine scores for ``trials``; ``transform`` is applied to the test side only."""
    cache: dict[str, np.ndarray] = {}

    def embed(uid: str, is_test: bool) -> np.ndarray:
        key = ("t:" if is_test else "e:") + uid
        if key not in cache:
            if is_test and test_features is not None and uid in test_features:
                x = test_features[uid]
            else:
                x = corpus[uid].features.data
            if is_test and transform is not None:
                x = transform(x)
            cache[key] = extract_embedding(model, x)
        return cache[key]

    return np.array([score(embed(t.enroll_id, False), embed(t.test_id, True)) for t in trials])


def calibrate(model: AsvModel, corpus: Corpus, trials: Sequence[Trial],
              transform: Callable[[np.ndarray], np.ndarray] | None = None) -> OperatingPoint:
    """Set ``model.tau`` to the genuine EER operating point."""
    scores = score_trials(model, corpus, trials, transform)
    is_tgt = np.array([t.is_target for t in trials])
    if is_tgt.all() or not is_tgt.any():
        raise ValueError("calibration needs both target and non-target trials")
    op = solve_eer(scores[is_tgt], scores[~is_tgt])
    model.tau = op.tau
    return op


def embed_batch(model: AsvModel, x: torch.Tensor) -> torch.Tensor:
    return model(x)


def score_gradient(model: AsvModel, e_enroll, x_test) -> np.ndarray:
    """Gradient of ``cos(e_enroll, g(X_test))`` with respect to ``X_test``."""
    x = _as_tensor(x_test, model)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"test features must be T x {model.input_dim}, got {tuple(x.shape)}")
    e = torch.as_tensor(np.asarray(e_enroll), dtype=x.dtype)
    if e.shape != (model.embed_dim,):
        raise ValueError(f"enrollment embedding must have {model.embed_dim} entries")
    x.requires_grad_(True)
    s = cosine(e, model(x))
    (grad,) = torch.autograd.grad(s, x)
    return grad.numpy().astype(np.float64)


def finetune_asv(model: AsvModel, corpus: Corpus, cascade: Callable[[np.ndarray], np.ndarray],
                 config: TrainConfig, epochs: int, heldout: Corpus | None = None) -> AsvModel:
    """Continue training on the union of ``corpus`` and its cascade-purified copy.

    ``tau`` is recalibrated on the held-out trials with the test side
    passed through ``cascade``.
    """
    tuned = copy.deepcopy(model)
    speakers = corpus.speakers
    if len(speakers) != tuned.n_classes:
        raise ValueError("fine-tuning corpus must contain the training speakers")
    feats, labels = _stack(corpus, speakers)
    purified = []
    for x in feats.numpy():
        y = np.asarray(cascade(x))
        if y.shape != x.shape:
            raise ValueError(f"cascade changed feature shape {x.shape} -> {y.shape}")
        purified.append(y.astype(np.float32))
    union = torch.cat([feats, torch.as_tensor(np.stack(purified))])
    union_labels = torch.cat([labels, labels])
    if epochs > 0:
        tuned.train()
        generator = torch.Generator().manual_seed(config.seed + 1)
        _fit(tuned, union, union_labels, config, epochs, generator)
        tuned.eval()
    calib = heldout if heldout is not None else corpus
    calibrate(tuned, calib, calib.trials, transform=cascade)
    return tuned


def save_asv(model: AsvModel, path) -> None:
    meta = {
        "input_dim": model.input_dim, "n_classes": model.n_classes,
        "hidden_dim": model.embedder[0].out_features, "embed_dim": model.embed_dim,
        "margin": model.margin, "scale": model.scale, "role": model.role, "tau": model.tau,
    }
    tensors = {k: v.detach().float().numpy() for k, v in model.state_dict().items()}
    checkpoint.save(path, "asv", meta, tensors)


def load_asv(path) -> AsvModel:
    _, meta, tensors = checkpoint.load(path, "asv")
    model = AsvModel(meta["input_dim"], meta["n_classes"], meta["hidden_dim"], meta["embed_dim"],
                     meta["margin"], meta["scale"], meta["role"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.tau = meta["tau"]
    model.eval()
    return model
