import pytest

from advshield.config import (
    SEED_ENV,
    ConfigError,
    ExperimentConfig,
    dump_config,
    load_config,
    parse_overrides,
    read_pairs,
)
from advshield.reformer import ALL_TAGS


class TestOverrides:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.attack.epsilon == 0.3 and cfg.cascade.k == 9 and cfg.detection.moment_order == 5
        assert cfg.mask.wc == 5 and cfg.mask.pt == 0.15 and cfg.mask.wt == 7

    def test_dotted_keys(self):
        cfg = parse_overrides({"attack.epsilon": "0.5", "cascade.k": "4", "eval.recalibrate": "false", "global_seed": "7"})
        assert cfg.attack.epsilon == 0.5 and cfg.cascade.k == 4 and cfg.eval.recalibrate is False
        assert cfg.global_seed == 7

    def test_tuples(self):
        cfg = parse_overrides({"eval.pooling_ratios": "0.5, 2", "detection.orders": "2 3"})
        assert cfg.eval.pooling_ratios == (0.5, 2.0) and cfg.detection.orders == (2, 3)

    def test_all_tags(self):
        assert parse_overrides({"reformer.tags": "all"}).reformer.tags == ALL_TAGS

    def test_role_sets_margin_and_scale(self):
        cfg = parse_overrides({"asv.role": "x-vector"})
        assert (cfg.asv.margin, cfg.asv.scale) == (0.3, 32.0)
        cfg = parse_overrides({"asv.role": "x-vector", "asv.margin": "0.1"})
        assert (cfg.asv.margin, cfg.asv.scale) == (0.1, 32.0)

    @pytest.mark.parametrize("pairs", [
        {"attack.nope": "1"}, {"nope.k": "1"}, {"nope": "1"}, {"attack": "1"},
        {"cascade.k": "many"}, {"eval.recalibrate": "maybe"}, {"asv.role": "i-vector"},
        {"cascade.k": "-1"}, {"reformer.tags": "TC,XX"}, {"cascade.reformer_tag": "M"},
        {"aware.tags": "CM"}, {"eval.pooling_ratios": "-1"}, {"reformer.tags": "TC,TC"},
    ])
    def test_rejects(self, pairs):
        with pytest.raises(ConfigError):
            parse_overrides(pairs)


class TestFiles:
    def test_read_pairs_strips_comments(self):
        assert read_pairs("# header\nattack.epsilon = 0.2  # radius\n\ncascade.k=3\n") == {"attack.epsilon": "0.2", "cascade.k": "3"}

    def test_line_without_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            read_pairs("a.b=1\nbroken\n")

    def test_dump_load_round_trip(self, tmp_path):
        cfg = parse_overrides({"attack.epsilon": "0.25", "reformer.tags": "T,TC,TCM", "output_dir": "x/y"})
        path = tmp_path / "c.txt"
        path.write_text(dump_config(cfg))
        assert load_config(path, environ={}) == cfg

    def test_overrides_beat_file_and_env_beats_both(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("global_seed=3\ncascade.k=2\n")
        cfg = load_config(path, {"cascade.k": "5"}, environ={SEED_ENV: "11"})
        assert cfg.cascade.k == 5 and cfg.global_seed == 11
        assert load_config(path, environ={}).global_seed == 3
