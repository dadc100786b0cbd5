"""Self-supervised denoising reformer: a bidirectional transformer encoder trained to
reconstruct clean features from masked ones under an L1 objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .dataio import Corpus
from .masking import MaskConfig, compose_masks

ALL_TAGS = ("T", "C", "M", "TC", "TM", "CM", "TCM")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ReformerTrainConfig:
    mask: MaskConfig = field(default_factory=MaskConfig)
    hidden_dim: int = 64
    n_layers: int = 3
    n_heads: int = 4
    ff_dim: int = 256
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")


def sinusoidal_positions(n_frames: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n_frames, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n_frames, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, t, d = h.shape
        q, k, v = self.qkv(h).view(b, t, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.n_heads), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, t, d))


class EncoderLayer(nn.Module):
    """Pre-norm encoder layer: self-attention and a position-wise feed-forward block."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(self, h):
        h = h + self.attn(self.norm1(h))
        return h + self.ff(self.norm2(h))


class ReformerModel(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int = 64, n_layers: int = 3, n_heads: int = 4,
                 ff_dim: int = 256, tag: str = "TCM"):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.n_heads = n_heads
        self.ff_dim = ff_dim
        self.tag = tag
        self.register_buffer("feat_mean", torch.zeros(input_dim))
        self.register_buffer("feat_std", torch.ones(input_dim))
        self.inp = nn.Linear(input_dim, hidden_dim)
        self.layers = nn.ModuleList(EncoderLayer(hidden_dim, n_heads, ff_dim) for _ in range(n_layers))
        self.norm = nn.LayerNorm(hidden_dim)
        self.outp = nn.Linear(hidden_dim, input_dim)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} feature channels, got {x.shape[-1]}")
        squeeze = x.ndim == 2
        if squeeze:
            x = x.unsqueeze(0)
        h = self.inp((x - self.feat_mean) / self.feat_std)
        h = h + sinusoidal_positions(x.shape[1], self.hidden_dim, h.dtype)
        for layer in self.layers:
            h = layer(h)
        y = self.outp(self.norm(h)) * self.feat_std + self.feat_mean
        return y.squeeze(0) if squeeze else y


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def reformer_forward(model: ReformerModel, x) -> np.ndarray:
    """Reconstruct one ``T x D`` matrix (or a ``B x T x D`` batch)."""
    arr = np.asarray(getattr(x, "data", x))
    with torch.no_grad():
        y = model(torch.as_tensor(np.array(arr), dtype=_param_dtype(model)))
    return y.numpy().astype(arr.dtype if arr.dtype.kind == "f" else np.float32)


def l1_loss(x_rec, x_clean):
    """Mean absolute error over all cells; accepts numpy arrays or tensors."""
    if tuple(x_rec.shape) != tuple(x_clean.shape):
        raise ValueError(f"shape mismatch {tuple(x_rec.shape)} vs {tuple(x_clean.shape)}")
    if isinstance(x_rec, torch.Tensor):
        return (x_rec - x_clean).abs().mean()
    return float(np.mean(np.abs(np.asarray(x_rec, dtype=np.float64) - np.asarray(x_clean, dtype=np.float64))))


def _stack_corpus(corpus: Corpus) -> np.ndarray:
    if len(corpus) == 0:
        raise ValueError("reformer training needs a non-empty corpus")
    lengths = {u.features.n_frames for u in corpus.utterances.values()}
    if len(lengths) != 1:
        raise ValueError("training utterances must share one frame count")
    return np.stack([corpus[i].features.data for i in sorted(corpus.utterances)])


def init_reformer(input_dim: int, config: ReformerTrainConfig, tag: str,
                  feat_mean=None, feat_std=None) -> ReformerModel:
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = ReformerModel(input_dim, config.hidden_dim, config.n_layers, config.n_heads, config.ff_dim, tag)
    if feat_mean is not None:
        model.feat_mean.copy_(torch.as_tensor(feat_mean))
        model.feat_std.copy_(torch.as_tensor(feat_std).clamp_min(1e-6))
    return model


def train_reformer(corpus: Corpus, config: ReformerTrainConfig) -> ReformerModel:
    """Adam on the L1 distance between reconstructions of masked inputs and the clean features."""
    feats = _stack_corpus(corpus)
    flat = feats.reshape(-1, feats.shape[-1]).astype(np.float64)
    model = init_reformer(feats.shape[-1], config, config.mask.strategies, flat.mean(0), flat.std(0))
    corrupt = compose_masks(config.mask)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    clean_all = torch.as_tensor(feats)
    model.train_losses = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(feats))
        for start in range(0, len(feats), config.batch_size):
            idx = order[start:start + config.batch_size]
            masked = torch.as_tensor(np.stack([corrupt(feats[i], rng) for i in idx]).astype(np.float32))
            loss = l1_loss(model(masked), clean_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"reformer L1 loss became non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.train_losses.append(loss.item())
            step += 1
    model.eval()
    return model


def masked_l1(model: ReformerModel, corpus: Corpus, mask: MaskConfig, seed: int) -> float:
    """L1 between the model's reconstruction of masked inputs and the clean features."""
    feats = _stack_corpus(corpus)
    corrupt = compose_masks(mask)
    rng = np.random.default_rng(seed)
    masked = np.stack([corrupt(x, rng) for x in feats]).astype(np.float32)
    return l1_loss(reformer_forward(model, masked), feats)


def train_reformer_suite(corpus: Corpus, base_config: ReformerTrainConfig,
                         tags: Iterable[str]) -> dict[str, ReformerModel]:
    tags = list(tags)
    if not tags:
        raise ValueError("at least one reformer tag is required")
    if len(set(tags)) != len(tags):
        raise ValueError(f"duplicate reformer tags in {tags}")
    models = {}
    for tag in tags:
        if tag not in ALL_TAGS:
            raise ValueError(f"unknown reformer tag {tag!r}")
        cfg = replace(base_config, mask=replace(base_config.mask, strategies=tag),
                      seed=base_config.seed + ALL_TAGS.index(tag))
        models[tag] = train_reformer(corpus, cfg)
    return models


def save_reformer(model: ReformerModel, path) -> None:
    meta = {"input_dim": model.input_dim, "hidden_dim": model.hidden_dim, "n_layers": model.n_layers,
            "n_heads": model.n_heads, "ff_dim": model.ff_dim, "tag": model.tag}
    tensors = {k: v.detach().float().numpy() for k, v in model.state_dict().items()}
    checkpoint.save(path, "reformer", meta, tensors)


def load_reformer(path) -> ReformerModel:
    _, meta, tensors = checkpoint.load(path, "reformer")
    model = ReformerModel(meta["input_dim"], meta["hidden_dim"], meta["n_layers"], meta["n_heads"],
                          meta["ff_dim"], meta["tag"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model
