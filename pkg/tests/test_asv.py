import math

import numpy as np
import pytest
import torch

from advshield.asv import (
    AsvModel,
    TrainConfig,
    aam_softmax_loss,
    extract_embedding,
    finetune_asv,
    load_asv,
    save_asv,
    score,
    score_gradient,
    score_trials,
    train_asv,
)
from advshield.dataio import CorpusConfig, generate_synthetic_corpus, split_corpus
from advshield.metrics import solve_eer

N_PROBES = 24


def np_embed(model, x):
    """Independent float64 numpy forward pass of the embedder."""
    p = {k: v.detach().double().numpy() for k, v in model.state_dict().items()}
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).mean(axis=0) + 1e-5)
    h = (np.concatenate([mean, std]) - p["stats_mean"]) / p["stats_std"]
    for i in (0, 2):
        h = h @ p[f"embedder.{i}.weight"].T + p[f"embedder.{i}.bias"]
        h = h / (1.0 + np.exp(-h))
    return h @ p["embedder.4.weight"].T + p["embedder.4.bias"]


def np_cos(a, b):
    return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def random_model(seed=0, d=6, classes=3):
    torch.manual_seed(seed)
    model = AsvModel(d, classes, hidden_dim=16, embed_dim=8).double()
    with torch.no_grad():
        model.stats_mean.normal_(0, 0.3)
        model.stats_std.uniform_(0.5, 1.5)
    return model.eval()


@pytest.fixture(scope="module")
def small_split():
    corpus = generate_synthetic_corpus(CorpusConfig(n_speakers=4, utts_per_speaker=6, frames_per_utt=30, feature_dim=8, seed=3))
    return split_corpus(corpus, 3, max_trials=60, seed=1)


class TestEmbedding:
    def test_deterministic_and_shaped(self):
        model = random_model()
        x = np.random.default_rng(0).standard_normal((20, 6))
        e1, e2 = extract_embedding(model, x), extract_embedding(model, x)
        assert e1.shape == (8,) and np.all(np.isfinite(e1))
        assert e1.tobytes() == e2.tobytes()

    def test_frame_permutation_invariant(self):
        model = random_model()
        x = np.random.default_rng(1).standard_normal((20, 6))
        perm = np.random.default_rng(2).permutation(20)
        np.testing.assert_allclose(extract_embedding(model, x), extract_embedding(model, x[perm]), rtol=1e-12, atol=1e-12)

    def test_matches_independent_forward(self):
        model = random_model()
        x = np.random.default_rng(3).standard_normal((15, 6))
        np.testing.assert_allclose(extract_embedding(model, x), np_embed(model, x), rtol=1e-10, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            extract_embedding(random_model(), np.zeros((10, 5)))


class TestScore:
    def test_examples(self):
        e = np.array([0.3, -1.2, 2.0])
        assert score(e, e) == pytest.approx(1.0)
        assert score(e, -e) == pytest.approx(-1.0)
        assert score([1.0, 0.0], [0.0, 1.0]) == 0.0
        assert score(e, 7.5 * e) == pytest.approx(1.0)

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            score([0.0, 0.0], [1.0, 0.0])

    def test_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            assert -1.0 <= score(rng.standard_normal(5), rng.standard_normal(5)) <= 1.0


class TestScoreGradient:
    def test_shape(self):
        model = random_model()
        x = np.random.default_rng(0).standard_normal((12, 6))
        assert score_gradient(model, extract_embedding(model, x[:5]), x).shape == x.shape

    def test_shape_mismatch(self):
        model = random_model()
        with pytest.raises(ValueError):
            score_gradient(model, np.ones(8), np.zeros((12, 5)))
        with pytest.raises(ValueError):
            score_gradient(model, np.ones(7), np.zeros((12, 6)))

    def test_finite_differences(self):
        model = random_model(1)
        rng = np.random.default_rng(4)
        errs = []
        for _ in range(N_PROBES):
            x = rng.standard_normal((12, 6))
            e = rng.standard_normal(8)
            g = score_gradient(model, e, x)
            v = rng.standard_normal(x.shape)
            h = 1e-5
            fd = (np_cos(e, np_embed(model, x + h * v)) - np_cos(e, np_embed(model, x - h * v))) / (2 * h)
            errs.append(rel_err(float(np.sum(g * v)), fd))
        assert max(errs) < 1e-4

    def test_coordinate_sign_probe(self):
        model = random_model(2)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((10, 6))
        e = rng.standard_normal(8)
        g = score_gradient(model, e, x)
        i, j = np.unravel_index(np.argmax(np.abs(g)), g.shape)
        step = np.zeros_like(x)
        step[i, j] = 1e-4 * np.sign(g[i, j])
        assert np_cos(e, np_embed(model, x + step)) > np_cos(e, np_embed(model, x))


class TestAamSoftmax:
    def test_zero_margin_is_cross_entropy(self):
        rng = torch.Generator().manual_seed(0)
        emb = torch.randn(5, 4, generator=rng, dtype=torch.float64)
        w = torch.randn(3, 4, generator=rng, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 1, 0])
        cos = (emb / emb.norm(dim=1, keepdim=True)) @ (w / w.norm(dim=1, keepdim=True)).T
        expected = torch.nn.functional.cross_entropy(30.0 * cos, labels)
        torch.testing.assert_close(aam_softmax_loss(emb, w, labels, 0.0, 30.0), expected, rtol=1e-12, atol=1e-12)

    def test_single_class_loss_is_zero(self):
        emb = torch.randn(4, 3, dtype=torch.float64)
        assert aam_softmax_loss(emb, torch.randn(1, 3, dtype=torch.float64), torch.zeros(4, dtype=torch.long), 0.2, 30.0).item() == 0.0

    def test_margin_too_large(self):
        with pytest.raises(ValueError):
            aam_softmax_loss(torch.randn(2, 3), torch.randn(2, 3), torch.tensor([0, 1]), math.pi / 2, 30.0)

    def test_matches_numpy_formula(self):
        rng = np.random.default_rng(1)
        emb, w = rng.standard_normal((6, 4)), rng.standard_normal((3, 4))
        labels = rng.integers(0, 3, size=6)
        m, s = 0.3, 32.0
        en = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        wn = w / np.linalg.norm(w, axis=1, keepdims=True)
        cos = en @ wn.T
        logits = s * cos
        for r, y in enumerate(labels):
            logits[r, y] = s * np.cos(np.arccos(cos[r, y]) + m)
        ref = np.mean(np.log(np.exp(logits).sum(1)) - logits[np.arange(6), labels])
        got = aam_softmax_loss(torch.as_tensor(emb), torch.as_tensor(w), torch.as_tensor(labels), m, s).item()
        assert got == pytest.approx(ref, rel=1e-12)

    def test_parameter_gradients_match_finite_differences(self):
        model = random_model(3)
        rng = np.random.default_rng(6)
        x = torch.as_tensor(rng.standard_normal((6, 10, 6)))
        labels = torch.as_tensor(rng.integers(0, 3, size=6))

        def loss():
            return aam_softmax_loss(model(x), model.class_weights, labels, 0.2, 30.0)

        params = [p for p in model.parameters()]
        grads = torch.autograd.grad(loss(), params)
        errs = []
        for _ in range(N_PROBES):
            dirs = [torch.as_tensor(rng.standard_normal(p.shape)) for p in params]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            h = 1e-6
            with torch.no_grad():
                for p, d in zip(params, dirs):
                    p.add_(h * d)
                up = loss().item()
                for p, d in zip(params, dirs):
                    p.sub_(2 * h * d)
                down = loss().item()
                for p, d in zip(params, dirs):
                    p.add_(h * d)
            errs.append(rel_err(analytic, (up - down) / (2 * h)))
        assert max(errs) < 1e-4


class TestTraining:
    def test_two_speakers_well_separated(self):
        corpus = generate_synthetic_corpus(CorpusConfig(n_speakers=2, utts_per_speaker=10, frames_per_utt=50, speaker_separation=5.0, seed=0))
        train, heldout = split_corpus(corpus, 4, max_trials=None, seed=0)
        model = train_asv(train, TrainConfig(epochs=20, seed=0), heldout)
        scores = score_trials(model, heldout, heldout.trials)
        labels = np.array([t.is_target for t in heldout.trials])
        assert solve_eer(scores[labels], scores[~labels]).eer < 0.10
        assert model.tau is not None

    def test_one_speaker_is_rejected(self):
        corpus = generate_synthetic_corpus(CorpusConfig(n_speakers=1, utts_per_speaker=3, frames_per_utt=20))
        with pytest.raises(ValueError):
            train_asv(corpus, TrainConfig(epochs=1))

    def test_same_seed_same_parameters(self, small_split):
        train, heldout = small_split
        a = train_asv(train, TrainConfig(epochs=2, seed=4), heldout)
        b = train_asv(train, TrainConfig(epochs=2, seed=4), heldout)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)
        assert a.tau == b.tau

    def test_diverged_training_raises(self, small_split):
        train, _ = small_split
        from advshield.asv import TrainingDiverged

        with pytest.raises(TrainingDiverged):
            train_asv(train, TrainConfig(epochs=3, learning_rate=1e36))

    @pytest.mark.parametrize("role,margin,scale", [("r-vector", 0.2, 30.0), ("x-vector", 0.3, 32.0)])
    def test_roles(self, role, margin, scale):
        cfg = TrainConfig.for_role(role)
        assert (cfg.margin, cfg.scale, cfg.role) == (margin, scale, role)

    def test_checkpoint_round_trip(self, small_split, tmp_path):
        train, heldout = small_split
        model = train_asv(train, TrainConfig(epochs=1, seed=1), heldout)
        save_asv(model, tmp_path / "m.ckpt")
        loaded = load_asv(tmp_path / "m.ckpt")
        assert loaded.tau == model.tau
        x = train[sorted(train.utterances)[0]].features.data
        assert extract_embedding(loaded, x).tobytes() == extract_embedding(model, x).tobytes()


class TestFinetune:
    def test_zero_epochs_keeps_parameters(self, small_split):
        train, heldout = small_split
        model = train_asv(train, TrainConfig(epochs=1, seed=1), heldout)
        tuned = finetune_asv(model, train, lambda x: x * 0.9, TrainConfig(seed=1), 0, heldout)
        for a, b in zip(model.state_dict().values(), tuned.state_dict().values()):
            assert torch.equal(a, b)

    def test_identity_cascade_equals_continued_training_on_doubled_data(self, small_split):
        train, heldout = small_split
        model = train_asv(train, TrainConfig(epochs=1, seed=1), heldout)
        a = finetune_asv(model, train, lambda x: x, TrainConfig(seed=2), 1, heldout)
        b = finetune_asv(model, train, lambda x: x.copy(), TrainConfig(seed=2), 1, heldout)
        for va, vb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(va, vb)

    def test_shape_changing_cascade(self, small_split):
        train, heldout = small_split
        model = train_asv(train, TrainConfig(epochs=1, seed=1), heldout)
        with pytest.raises(ValueError):
            finetune_asv(model, train, lambda x: x[:-1], TrainConfig(), 1, heldout)
