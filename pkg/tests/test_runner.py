import numpy as np
import pytest

from advshield.cli import main
from advshield.config import parse_overrides
from advshield.dataio import load_features, load_trials, save_trials
from advshield.report import ReportError, emit_report, format_value, summary_text
from advshield.runner import STAGES, Pipeline, ReportBundle, StageError, Table, run_experiment

TINY = {
    "corpus.n_speakers": "4", "corpus.utts_per_speaker": "6", "corpus.frames_per_utt": "30",
    "split.train_utts": "3", "split.n_trials": "40", "asv.epochs": "3", "reformer.epochs": "2",
    "reformer.hidden_dim": "16", "reformer.ff_dim": "32", "reformer.n_layers": "1",
    "cascade.k": "3", "finetune.epochs": "1",
}


def tiny(tmp_path, **extra):
    return parse_overrides({**TINY, "output_dir": str(tmp_path), **extra})


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = tiny(root)
    return cfg, run_experiment(cfg)


class TestPipeline:
    def test_all_stages_run_once(self, run):
        _, bundle = run
        assert bundle.executed == list(STAGES)

    def test_tables_present(self, run):
        _, bundle = run
        for name in ("table1_asv", "table2_purification", "table4_joint_purification", "table5_detection",
                     "table6_joint_detection", "purification_sweep", "pooling_ratio", "finetune", "reformer_l1",
                     "attack_stats"):
            assert name in bundle.tables, name

    def test_sweep_covers_k_and_scenarios(self, run):
        cfg, bundle = run
        sweep = bundle.tables["purification_sweep"]
        rows = [r for r in sweep.rows if r[0] == "TCM"]
        assert {r[1] for r in rows} == {"NA", "aware-TC", "aware-TCM"}
        assert sorted({r[2] for r in rows}) == list(range(cfg.cascade.k + 1))

    def test_rates_are_rates(self, run):
        _, bundle = run
        for key, value in bundle.summary.items():
            if key.startswith("report.") and key not in ("report.system", "report.pooling_ratio"):
                assert 0.0 <= value <= 1.0, key
        assert bundle.report.pooling_ratio == 1.0

    def test_attack_respects_ball(self, run):
        _, bundle = run
        for row in bundle.tables["attack_stats"].rows:
            assert row[2] <= 1.0 + 1e-9

    def test_traces_have_k_plus_one_scores(self, run):
        cfg, bundle = run
        assert all(t.scores.size == cfg.cascade.k + 1 for traces in bundle.traces.values() for t in traces)

    def test_rerun_uses_cache(self, run):
        cfg, first = run
        again = run_experiment(cfg)
        assert again.executed == []
        assert again.summary == first.summary

    def test_changed_attack_reruns_only_downstream(self, run):
        cfg, _ = run
        changed = parse_overrides({"attack.epsilon": "0.1"}, cfg)
        bundle = run_experiment(changed, emit=False)
        assert bundle.executed == ["attack", "purify", "detect", "finetune"]

    def test_stage_failure_names_stage(self, tmp_path):
        cfg = tiny(tmp_path, **{"split.train_utts": "6"})
        with pytest.raises(StageError, match="stage 'data'"):
            run_experiment(cfg)
        assert not any(p.name.endswith("DONE") for p in tmp_path.rglob("*"))

    def test_seed_changes_results(self, tmp_path):
        a = Pipeline(tiny(tmp_path / "a"))
        b = Pipeline(tiny(tmp_path / "b", global_seed="1"))
        assert a.stage_hash("data") != b.stage_hash("data")


class TestReport:
    def test_report_files(self, run):
        cfg, bundle = run
        out = cfg.output_dir + "/report"
        import pathlib

        root = pathlib.Path(out)
        assert (root / "summary.txt").read_text() == summary_text(bundle.summary)
        assert len(list((root / "tables").glob("*.tsv"))) == len(bundle.tables)
        assert {p.name for p in (root / "figures").glob("*.png")} == {
            "purification_sweep.png", "purification_systems.png", "detection_eer.png", "pooling_ratio.png", "score_traces.png"}
        header = (root / "tables" / "table2_purification.tsv").read_text().splitlines()[0]
        assert header.split("\t") == ["system", "AdvFAR", "AdvFRR", "GenEER", "tau"]

    def test_empty_bundle(self, tmp_path):
        with pytest.raises(ReportError, match="nothing to report"):
            emit_report(ReportBundle(), tmp_path)

    def test_figures_only_for_present_tables(self, tmp_path):
        bundle = ReportBundle(tables={"table5_detection": Table(["moment_order", "EER_det"], [[5, 0.2]])})
        written = emit_report(bundle, tmp_path)
        assert sorted(p.name for p in written) == ["detection_eer.png", "table5_detection.tsv"]

    def test_value_formatting(self):
        assert format_value(0.1) == "0.100000"
        assert format_value(float("inf")) == "inf"
        assert format_value(np.float32(0.5)) == "0.500000"
        assert format_value(True) == "true" and format_value(3) == "3"
        assert summary_text({"b": 1, "a": 0.25}) == "a=0.250000\nb=1\n"


class TestCli:
    def test_stage_command(self, tmp_path, capsys):
        args = ["gen-data", "--output-dir", str(tmp_path)] + [a for k, v in TINY.items() for a in ("--set", f"{k}={v}")]
        assert main(args) == 0
        out = capsys.readouterr().out.strip()
        assert "data-" in out and (tmp_path / "cache").exists()

    def test_attack_export(self, run, tmp_path, capsys):
        cfg, _ = run
        pipe = Pipeline(cfg)
        _, heldout, std = pipe.corpora()
        save_trials(tmp_path / "trials_in", heldout.trials[:5])
        args = ["attack", "--output-dir", cfg.output_dir, "--epsilon", "0.2", "--iters", "3", "--aware-blocks", "1",
                "--trials", str(tmp_path / "trials_in"), "--out", str(tmp_path / "adv")]
        args += [a for k, v in TINY.items() for a in ("--set", f"{k}={v}")]
        assert main(args) == 0
        trials = load_trials(tmp_path / "adv" / "trials")
        assert len(trials) == 5 and all(t.provenance == "adversarial" for t in trials)
        for orig, t in zip(heldout.trials[:5], trials):
            x = load_features(tmp_path / "adv" / "feats" / f"{t.test_id}.asvf").data.astype(np.float64)
            assert np.all(np.abs(x - heldout[orig.test_id].features.data) <= 0.2 * std + 1e-9)

    def test_bad_override_is_reported(self, tmp_path, capsys):
        assert main(["gen-data", "--output-dir", str(tmp_path), "--set", "attack.nope=1"]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_report_command(self, run, tmp_path, capsys):
        cfg, _ = run
        args = ["report", "--output-dir", cfg.output_dir, "--out", str(tmp_path / "rep")]
        args += [a for k, v in TINY.items() for a in ("--set", f"{k}={v}")]
        assert main(args) == 0
        assert (tmp_path / "rep" / "summary.txt").exists()
