"""Synthetic corpora, MFCC extraction and on-disk formats for features and trials."""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.fft import dct, rfft
from scipy.signal import lfilter

FEATURE_MAGIC = b"ASVF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")

TARGET = "target"
NONTARGET = "nontarget"
GENUINE = "genuine"
ADVERSARIAL = "adversarial"

MFCC_WINDOW_MS = 25.0
MFCC_SHIFT_MS = 10.0
MFCC_N_MELS = 23
MFCC_LOG_FLOOR = 1e-10
PRE_EMPHASIS = 0.97


class FeatureFormatError(ValueError):
    """Raised when a feature file cannot be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrialFormatError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class FeatureMatrix:
    """Frame-level features, ``T`` frames by ``D`` channels, stored as float32."""

    data: np.ndarray
    frame_shift_ms: float = MFCC_SHIFT_MS

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"features must be a non-empty T x D matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("features contain non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return self.frame_shift_ms == other.frame_shift_ms and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker_id: str
    features: FeatureMatrix


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str
    provenance: str = GENUINE

    def __post_init__(self):
        if self.label not in (TARGET, NONTARGET):
            raise ValueError(f"bad trial label {self.label!r}")
        if self.provenance not in (GENUINE, ADVERSARIAL):
            raise ValueError(f"bad trial provenance {self.provenance!r}")

    @property
    def is_target(self) -> bool:
        return self.label == TARGET


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 20
    utts_per_speaker: int = 10
    frames_per_utt: int = 100
    feature_dim: int = 24
    seed: int = 0
    speaker_separation: float = 3.0

    def validate(self):
        for name in ("n_speakers", "utts_per_speaker", "frames_per_utt", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.frames_per_utt < 8:
            raise ValueError("frames_per_utt must be >= 8 to leave room for time masking")
        if not self.speaker_separation > 0:
            raise ValueError("speaker_separation must be > 0")


@dataclass
class Corpus:
    utterances: dict[str, Utterance]
    trials: list[Trial] = field(default_factory=list)

    def __getitem__(self, utt_id: str) -> Utterance:
        return self.utterances[utt_id]

    def __len__(self):
        return len(self.utterances)

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker_id for u in self.utterances.values()})

    @property
    def feature_dim(self) -> int:
        return next(iter(self.utterances.values())).features.dim

    def feature_std(self) -> np.ndarray:
        """Per-channel standard deviation over every frame of the corpus."""
        frames = np.concatenate([u.features.data for u in self.utterances.values()]).astype(np.float64)
        return frames.std(axis=0)

    def subset(self, utt_ids: Iterable[str], trials: Sequence[Trial] = ()) -> "Corpus":
        return Corpus({i: self.utterances[i] for i in utt_ids}, list(trials))


def _smooth_noise(rng: np.random.Generator, n_frames: int, dim: int, pole: float) -> np.ndarray:
    """Unit-variance first-order low-pass noise along time."""
    white = rng.standard_normal((n_frames + 20, dim))
    smooth = lfilter([np.sqrt(1.0 - pole * pole)], [1.0, -pole], white, axis=0)
    return smooth[20:]


def generate_synthetic_corpus(config: CorpusConfig) -> Corpus:
    """Draw a corpus of voiceprint-conditioned feature sequences.

    Each speaker owns a latent voiceprint and a per-channel dynamics scale.
    An utterance is the voiceprint broadcast over time plus a session
    offset, low-pass noise scaled by the speaker dynamics, and white
    per-frame noise. The returned trial list holds every same-speaker pair
    and an equal number of cross-speaker pairs.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dim = config.feature_dim
    voiceprints = config.speaker_separation * rng.standard_normal((config.n_speakers, dim))
    dynamics = rng.uniform(0.5, 1.5, size=(config.n_speakers, dim))

    utterances: dict[str, Utterance] = {}
    for s in range(config.n_speakers):
        spk = f"spk{s:03d}"
        for u in range(config.utts_per_speaker):
            session = 0.5 * rng.standard_normal(dim)
            smooth = _smooth_noise(rng, config.frames_per_utt, dim, pole=0.8) * dynamics[s]
            frames = voiceprints[s] + session + smooth + 0.5 * rng.standard_normal((config.frames_per_utt, dim))
            uid = f"{spk}_u{u:03d}"
            utterances[uid] = Utterance(uid, spk, FeatureMatrix(frames))

    trials = make_balanced_trials(list(utterances.values()), np.random.default_rng(config.seed + 7919))
    return Corpus(utterances, trials)


def make_balanced_trials(
    utterances: Sequence[Utterance],
    rng: np.random.Generator,
    max_trials: int | None = None,
) -> list[Trial]:
    """Build a trial list with equal target and non-target counts.

    Target trials are all unordered same-speaker pairs (subsampled when
    ``max_trials`` requires it); non-target pairs are drawn without
    replacement from all cross-speaker pairs. The result is interleaved in
    a seeded random order.
    """
    targets, nontargets = [], []
    for a, b in itertools.combinations(utterances, 2):
        (targets if a.speaker_id == b.speaker_id else nontargets).append((a.id, b.id))
    n = min(len(targets), len(nontargets))
    if max_trials is not None:
        n = min(n, max_trials // 2)
    if n == 0:
        return []
    tgt_idx = np.sort(rng.choice(len(targets), size=n, replace=False))
    ntg_idx = np.sort(rng.choice(len(nontargets), size=n, replace=False))
    trials = [Trial(*targets[i], TARGET) for i in tgt_idx]
    trials += [Trial(*nontargets[i], NONTARGET) for i in ntg_idx]
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


def split_corpus(corpus: Corpus, n_train_per_speaker: int, max_trials: int | None, seed: int) -> tuple[Corpus, Corpus]:
    """Split each speaker's utterances into a training part and a held-out part.

    The held-out corpus carries a fresh balanced trial list; the training
    corpus carries the trials contained entirely in its utterances.
    """
    train_ids, heldout_ids = [], []
    by_speaker: dict[str, list[str]] = {}
    for uid, utt in corpus.utterances.items():
        by_speaker.setdefault(utt.speaker_id, []).append(uid)
    for spk in sorted(by_speaker):
        ids = sorted(by_speaker[spk])
        train_ids += ids[:n_train_per_speaker]
        heldout_ids += ids[n_train_per_speaker:]
    train_set = set(train_ids)
    train_trials = [t for t in corpus.trials if t.enroll_id in train_set and t.test_id in train_set]
    heldout_utts = [corpus.utterances[i] for i in heldout_ids]
    heldout_trials = make_balanced_trials(heldout_utts, np.random.default_rng(seed), max_trials)
    return corpus.subset(train_ids, train_trials), corpus.subset(heldout_ids, heldout_trials)


# --------------------------------------------------------------------------- MFCC


def _hz_to_mel(hz):
    return 1127.0 * np.log1p(np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * np.expm1(np.asarray(mel, dtype=np.float64) / 1127.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int) -> np.ndarray:
    """Triangular filters on the mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate_hz)
    bank = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bins - lo) / (mid - lo)
        falling = (hi - bins) / (hi - mid)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def _frame_params(sample_rate_hz: int) -> tuple[int, int, int]:
    if sample_rate_hz not in (8000, 16000):
        raise ValueError(f"sample rate must be 8000 or 16000 Hz, got {sample_rate_hz}")
    window = int(round(sample_rate_hz * MFCC_WINDOW_MS / 1000.0))
    shift = int(round(sample_rate_hz * MFCC_SHIFT_MS / 1000.0))
    n_fft = 1 << (window - 1).bit_length()
    return window, shift, n_fft


def log_mel_energies(waveform, sample_rate_hz: int, n_mels: int = MFCC_N_MELS) -> np.ndarray:
    """Log mel-band energies per frame (the pre-DCT stage of :func:`compute_mfcc`)."""
    x = np.asarray(waveform, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty waveform")
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains non-finite samples")
    window, shift, n_fft = _frame_params(sample_rate_hz)
    if x.size < window:
        raise ValueError(f"waveform has {x.size} samples, shorter than one {window}-sample window")
    n_frames = (x.size - window) // shift + 1
    idx = np.arange(window)[None, :] + shift * np.arange(n_frames)[:, None]
    frames = x[idx]
    frames = frames - frames.mean(axis=1, keepdims=True)
    emphasized = np.concatenate([frames[:, :1] * (1.0 - PRE_EMPHASIS), frames[:, 1:] - PRE_EMPHASIS * frames[:, :-1]], axis=1)
    spectrum = np.abs(rfft(emphasized * np.hamming(window), n=n_fft, axis=1)) ** 2
    energies = spectrum @ mel_filterbank(n_mels, n_fft, sample_rate_hz).T
    return np.log(np.maximum(energies, MFCC_LOG_FLOOR))


def compute_mfcc(waveform, sample_rate_hz: int, n_coeffs: int = 24) -> FeatureMatrix:
    """MFCCs with a 25 ms Hamming window and 10 ms shift.

    The mel bank has ``max(23, n_coeffs)`` bands so that ``n_coeffs``
    orthonormal DCT-II coefficients always exist.
    """
    if n_coeffs < 1:
        raise ValueError("n_coeffs must be >= 1")
    log_mel = log_mel_energies(waveform, sample_rate_hz, max(MFCC_N_MELS, n_coeffs))
    ceps = dct(log_mel, type=2, axis=1, norm="ortho")[:, :n_coeffs]
    return FeatureMatrix(ceps, frame_shift_ms=MFCC_SHIFT_MS)


def expected_frame_count(n_samples: int, sample_rate_hz: int) -> int:
    window, shift, _ = _frame_params(sample_rate_hz)
    return (n_samples - window) // shift + 1


# --------------------------------------------------------------------------- files


def save_features(path, feats: FeatureMatrix) -> None:
    t, d = feats.data.shape
    payload = feats.data.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, d) + payload)


def load_features(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"truncated header: {len(raw)} of {_HEADER.size} bytes", len(raw))
    magic, version, t, d = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    expected = _HEADER.size + 4 * t * d
    if len(raw) < expected:
        n_floats = (len(raw) - _HEADER.size) // 4
        raise FeatureFormatError(f"truncated payload: header declares {t}x{d} = {t * d} floats, found {n_floats}", len(raw))
    if len(raw) > expected:
        raise FeatureFormatError(f"{len(raw) - expected} trailing bytes after payload", expected)
    data = np.frombuffer(raw, dtype="<f4", count=t * d, offset=_HEADER.size).reshape(t, d)
    return FeatureMatrix(data.astype(np.float32))


def format_trial(trial: Trial, with_provenance: bool = False) -> str:
    line = f"{1 if trial.is_target else 0} {trial.enroll_id} {trial.test_id}"
    if with_provenance:
        line += f" {trial.provenance}"
    return line


def save_trials(path, trials: Sequence[Trial], with_provenance: bool = False) -> None:
    text = "".join(format_trial(t, with_provenance) + "\n" for t in trials)
    Path(path).write_text(text, encoding="utf-8")


def parse_trials(lines: Iterable[str]) -> list[Trial]:
    """Parse ``<label> <enroll_id> <test_id> [provenance]`` lines; blank lines are skipped."""
    trials = []
    for no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) not in (3, 4) or not all(parts):
            raise TrialFormatError(f"expected '<label> <enroll_id> <test_id>', got {line!r}", no)
        if parts[0] not in ("0", "1"):
            raise TrialFormatError(f"label must be 0 or 1, got {parts[0]!r}", no)
        provenance = parts[3] if len(parts) == 4 else GENUINE
        if provenance not in (GENUINE, ADVERSARIAL):
            raise TrialFormatError(f"unknown provenance {provenance!r}", no)
        trials.append(Trial(parts[1], parts[2], TARGET if parts[0] == "1" else NONTARGET, provenance))
    return trials


def load_trials(path) -> list[Trial]:
    with open(path, encoding="utf-8") as fh:
        return parse_trials(fh)


def save_corpus(corpus: Corpus, directory) -> None:
    """Write ``utt2spk``, ``trials`` and one feature file per utterance."""
    root = Path(directory)
    (root / "feats").mkdir(parents=True, exist_ok=True)
    lines = []
    for uid in sorted(corpus.utterances):
        utt = corpus.utterances[uid]
        save_features(root / "feats" / f"{uid}.asvf", utt.features)
        lines.append(f"{uid} {utt.speaker_id}\n")
    (root / "utt2spk").write_text("".join(lines), encoding="utf-8")
    save_trials(root / "trials", corpus.trials, with_provenance=True)


def load_corpus(directory) -> Corpus:
    root = Path(directory)
    utterances = {}
    for line in (root / "utt2spk").read_text(encoding="utf-8").splitlines():
        uid, spk = line.split()
        utterances[uid] = Utterance(uid, spk, load_features(root / "feats" / f"{uid}.asvf"))
    return Corpus(utterances, load_trials(root / "trials"))
