from dataclasses import replace

import numpy as np
import pytest
import torch

from advshield.dataio import CorpusConfig, generate_synthetic_corpus, split_corpus
from advshield.masking import MaskConfig
from advshield.reformer import (
    ALL_TAGS,
    ReformerModel,
    ReformerTrainConfig,
    init_reformer,
    l1_loss,
    load_reformer,
    masked_l1,
    reformer_forward,
    save_reformer,
    sinusoidal_positions,
    train_reformer,
    train_reformer_suite,
)

FAST = ReformerTrainConfig(hidden_dim=32, n_layers=1, n_heads=4, ff_dim=64, learning_rate=3e-3, epochs=30, batch_size=16, seed=0)


@pytest.fixture(scope="module")
def split():
    corpus = generate_synthetic_corpus(CorpusConfig(n_speakers=10, utts_per_speaker=6, frames_per_utt=50, seed=0))
    return split_corpus(corpus, 3, 10, 0)


def feature_stats(corpus):
    flat = np.concatenate([u.features.data for u in corpus.utterances.values()]).astype(np.float64)
    return flat.mean(0), flat.std(0)


class TestForward:
    @pytest.mark.parametrize("t", [1, 8, 100])
    def test_shape_preserved(self, t):
        torch.manual_seed(0)
        model = ReformerModel(24, 16, 2, 4, 32).eval()
        x = np.random.default_rng(t).uniform(-10, 10, size=(t, 24)).astype(np.float32)
        y = reformer_forward(model, x)
        assert y.shape == x.shape and np.all(np.isfinite(y))

    def test_batch_matches_single(self):
        torch.manual_seed(1)
        model = ReformerModel(6, 8, 1, 2, 16).eval()
        x = np.random.default_rng(0).standard_normal((3, 10, 6)).astype(np.float32)
        batch = reformer_forward(model, x)
        for i in range(3):
            np.testing.assert_allclose(batch[i], reformer_forward(model, x[i]), rtol=1e-5, atol=1e-5)

    def test_deterministic(self):
        torch.manual_seed(2)
        model = ReformerModel(6, 8, 1, 2, 16).eval()
        x = np.random.default_rng(1).standard_normal((12, 6)).astype(np.float32)
        assert reformer_forward(model, x).tobytes() == reformer_forward(model, x).tobytes()

    def test_attention_is_bidirectional(self):
        torch.manual_seed(3)
        model = ReformerModel(6, 8, 1, 2, 16).eval()
        x = np.random.default_rng(2).standard_normal((12, 6)).astype(np.float32)
        y = x.copy()
        y[-1] += 5.0
        # a change in the last frame reaches the first frame's output
        assert not np.allclose(reformer_forward(model, x)[0], reformer_forward(model, y)[0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            reformer_forward(ReformerModel(6, 8, 1, 2, 16), np.zeros((4, 5), dtype=np.float32))

    def test_positions(self):
        pe = sinusoidal_positions(5, 6, torch.float64)
        assert pe.shape == (5, 6)
        np.testing.assert_allclose(pe[0].numpy(), [0, 1, 0, 1, 0, 1])
        np.testing.assert_allclose(pe[3, 0].item(), np.sin(3.0))


class TestL1:
    def test_examples(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        assert l1_loss(x, x) == 0.0
        assert l1_loss(x + 1.0, x) == pytest.approx(1.0)
        assert l1_loss(np.array([[0.0, 2.0]]), np.array([[1.0, 1.0]])) == 1.0

    def test_torch_and_numpy_agree(self):
        a = np.random.default_rng(1).standard_normal((2, 5, 3))
        b = np.random.default_rng(2).standard_normal((2, 5, 3))
        assert l1_loss(torch.as_tensor(a), torch.as_tensor(b)).item() == pytest.approx(l1_loss(a, b), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_parameter_gradients_match_finite_differences(self):
        torch.manual_seed(4)
        model = ReformerModel(5, 8, 1, 2, 16).double()
        rng = np.random.default_rng(3)
        x = torch.as_tensor(rng.standard_normal((2, 7, 5)))
        target = torch.as_tensor(rng.standard_normal((2, 7, 5)))
        params = list(model.parameters())
        grads = torch.autograd.grad(l1_loss(model(x), target), params)
        errs = []
        for _ in range(24):
            dirs = [torch.as_tensor(rng.standard_normal(p.shape)) for p in params]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            h = 1e-6
            with torch.no_grad():
                for p, d in zip(params, dirs):
                    p.add_(h * d)
                up = l1_loss(model(x), target).item()
                for p, d in zip(params, dirs):
                    p.sub_(2 * h * d)
                down = l1_loss(model(x), target).item()
                for p, d in zip(params, dirs):
                    p.add_(h * d)
            fd = (up - down) / (2 * h)
            errs.append(abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-12))
        assert max(errs) < 1e-3


class TestTraining:
    def test_zero_epochs_returns_initialization(self, split):
        train, _ = split
        cfg = replace(FAST, epochs=0)
        model = train_reformer(train, cfg)
        mean, std = feature_stats(train)
        ref = init_reformer(train.feature_dim, cfg, "TCM", mean, std)
        for (ka, va), (kb, vb) in zip(model.state_dict().items(), ref.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_same_seed_same_parameters(self, split):
        train, _ = split
        cfg = replace(FAST, epochs=2)
        a, b = train_reformer(train, cfg), train_reformer(train, cfg)
        for va, vb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(va, vb)

    def test_smoothed_loss_decreases(self, split):
        train, _ = split
        model = train_reformer(train, replace(FAST, epochs=60))
        losses = np.array(model.train_losses)
        assert losses.size >= 100 and np.all(np.isfinite(losses))
        assert losses[-50:].mean() < losses[:50].mean()

    def test_tag_recorded(self, split):
        train, _ = split
        model = train_reformer(train, replace(FAST, epochs=1, mask=MaskConfig(strategies="TM")))
        assert model.tag == "TM"

    def test_checkpoint_round_trip(self, split, tmp_path):
        train, heldout = split
        model = train_reformer(train, replace(FAST, epochs=1))
        save_reformer(model, tmp_path / "r.ckpt")
        loaded = load_reformer(tmp_path / "r.ckpt")
        x = heldout[sorted(heldout.utterances)[0]].features
        assert loaded.tag == model.tag
        assert reformer_forward(loaded, x).tobytes() == reformer_forward(model, x).tobytes()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ReformerTrainConfig(hidden_dim=10, n_heads=4)
        with pytest.raises(ValueError):
            ReformerTrainConfig(n_layers=0)


class TestSuite:
    def test_duplicate_tags_rejected(self, split):
        with pytest.raises(ValueError):
            train_reformer_suite(split[0], FAST, ["TC", "TC"])

    def test_unknown_tag_rejected(self, split):
        with pytest.raises(ValueError):
            train_reformer_suite(split[0], FAST, ["X"])

    def test_tag_counts(self, split):
        models = train_reformer_suite(split[0], replace(FAST, epochs=1), ["TC", "TCM"])
        assert list(models) == ["TC", "TCM"] and [m.tag for m in models.values()] == ["TC", "TCM"]
        assert len(train_reformer_suite(split[0], replace(FAST, epochs=1), ["TCM"])) == 1

    def test_all_tags_halve_masked_l1(self, split):
        train, heldout = split
        models = train_reformer_suite(train, FAST, ALL_TAGS)
        mean, std = feature_stats(train)
        assert sorted(models) == sorted(ALL_TAGS)
        for tag, model in models.items():
            mask = replace(FAST.mask, strategies=tag)
            untrained = init_reformer(train.feature_dim, replace(FAST, seed=99), tag, mean, std)
            ratio = masked_l1(model, heldout, mask, 5) / masked_l1(untrained, heldout, mask, 5)
            assert ratio <= 0.5, tag
