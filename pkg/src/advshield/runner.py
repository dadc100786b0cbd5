"""Staged experiment pipeline: data -> ASV -> reformers -> attacks -> purification -> detection -> fine-tuning.

Every stage writes its artifacts to ``<output_dir>/cache/<stage>-<hash>``,
where the hash covers the stage's config sections and its upstream hashes.
A finished stage directory is reused as-is on later runs. Downstream stages
only read upstream artifacts from disk.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .asv import extract_embedding, finetune_asv, load_asv, save_asv, train_asv
from .attack import attack_trial_set
from .config import ExperimentConfig, dump_config, section_json
from .dataio import (
    Corpus,
    generate_synthetic_corpus,
    load_corpus,
    load_features,
    load_trials,
    save_corpus,
    save_features,
    save_trials,
    split_corpus,
)
from .defense import (
    FILTER_KINDS,
    CascadeConfig,
    ScoreTrace,
    batch_scores,
    batch_traces,
    filter_baseline,
    load_traces,
    purify,
    purify_steps,
    save_traces,
    trace_moments,
)
from .metrics import (
    MetricsReport,
    ScoredTrial,
    TrialPartition,
    detection_eer,
    far,
    frr,
    joint_detection,
    joint_purification,
    min_dcf,
    solve_eer,
)
from .reformer import init_reformer, load_reformer, masked_l1, save_reformer, train_reformer_suite

log = logging.getLogger(__name__)

STAGES = ("data", "asv", "reformers", "attack", "purify", "detect", "finetune")
_SECTIONS = {
    "data": ("corpus", "split"),
    "asv": ("asv",),
    "reformers": ("mask", "reformer"),
    "attack": ("attack", "aware"),
    "purify": ("cascade", "filters", "eval"),
    "detect": ("detection", "eval"),
    "finetune": ("finetune", "cascade", "eval"),
}
_DEPS = {
    "data": (),
    "asv": ("data",),
    "reformers": ("data",),
    "attack": ("data", "asv", "reformers"),
    "purify": ("data", "asv", "reformers", "attack"),
    "detect": ("purify",),
    "finetune": ("data", "asv", "reformers", "attack", "purify"),
}
NA = "NA"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class Table:
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def to_json(self):
        return {"columns": self.columns, "rows": self.rows}

    @classmethod
    def from_json(cls, obj):
        return cls(list(obj["columns"]), [list(r) for r in obj["rows"]])


@dataclass
class ReportBundle:
    tables: dict[str, Table] = field(default_factory=dict)
    summary: dict[str, object] = field(default_factory=dict)
    traces: dict[str, list[ScoreTrace]] = field(default_factory=dict)
    report: MetricsReport | None = None
    executed: list[str] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not self.tables and not self.summary and not self.traces


def stage_seed(config: ExperimentConfig, stage: str) -> int:
    return config.global_seed + STAGES.index(stage)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


class Pipeline:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = Path(config.output_dir)
        self.cache = self.root / "cache"
        self._hashes: dict[str, str] = {}
        self.executed: list[str] = []

    def stage_hash(self, stage: str) -> str:
        if stage not in self._hashes:
            h = hashlib.sha256()
            h.update(f"{__version__}|{stage}|{stage_seed(self.config, stage)}".encode())
            for sec in _SECTIONS[stage]:
                h.update(section_json(self.config.section(sec)).encode())
            for dep in _DEPS[stage]:
                h.update(self.stage_hash(dep).encode())
            self._hashes[stage] = h.hexdigest()[:16]
        return self._hashes[stage]

    def stage_dir(self, stage: str) -> Path:
        return self.cache / f"{stage}-{self.stage_hash(stage)}"

    def ensure(self, stage: str) -> Path:
        out = self.stage_dir(stage)
        if (out / "DONE").exists():
            return out
        for dep in _DEPS[stage]:
            self.ensure(dep)
        tmp = out.with_name(out.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        start = time.perf_counter()
        log.info("running stage %s -> %s", stage, out.name)
        try:
            getattr(self, f"_run_{stage}")(tmp)
        except Exception as exc:
            raise StageError(stage, exc) from exc
        (tmp / "DONE").write_text("", encoding="utf-8")
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
        self.executed.append(stage)
        log.info("stage %s finished in %.1fs", stage, time.perf_counter() - start)
        return out

    # ------------------------------------------------------------------ loaders

    def corpora(self) -> tuple[Corpus, Corpus, np.ndarray]:
        d = self.stage_dir("data")
        return load_corpus(d / "train"), load_corpus(d / "heldout"), np.load(d / "feature_std.npy")

    def asv(self):
        return load_asv(self.stage_dir("asv") / "asv.ckpt")

    def reformer(self, tag: str):
        return load_reformer(self.stage_dir("reformers") / f"reformer_{tag}.ckpt")

    def scenarios(self) -> list[str]:
        return [NA] + [f"aware-{t}" for t in self.config.aware.tags]

    def adversarial(self, scenario: str) -> tuple[list, dict[str, np.ndarray]]:
        d = self.stage_dir("attack") / scenario
        trials = load_trials(d / "trials")
        feats = {t.test_id: load_features(d / "feats" / f"{t.test_id}.asvf").data for t in trials}
        return trials, feats

    # ------------------------------------------------------------------ stages

    def _run_data(self, out: Path):
        cfg = replace(self.config.corpus, seed=stage_seed(self.config, "data"))
        corpus = generate_synthetic_corpus(cfg)
        train, heldout = split_corpus(corpus, self.config.split.train_utts, self.config.split.n_trials, cfg.seed + 1)
        if not heldout.trials:
            raise ValueError("held-out split produced no trials; increase corpus.utts_per_speaker")
        save_corpus(train, out / "train")
        save_corpus(heldout, out / "heldout")
        np.save(out / "feature_std.npy", train.feature_std())

    def _run_asv(self, out: Path):
        train, heldout, _ = self.corpora()
        model = train_asv(train, replace(self.config.asv, seed=stage_seed(self.config, "asv")), heldout)
        save_asv(model, out / "asv.ckpt")

    def _run_reformers(self, out: Path):
        train, heldout, _ = self.corpora()
        seed = stage_seed(self.config, "reformers")
        base = self.config.reformer_train_config(seed)
        models = train_reformer_suite(train, base, self.config.reformer.tags)
        table = Table(["tag", "untrained_l1", "trained_l1", "ratio", "final_train_loss"])
        flat = np.concatenate([u.features.data for u in train.utterances.values()]).astype(np.float64)
        for tag, model in models.items():
            save_reformer(model, out / f"reformer_{tag}.ckpt")
            mask = replace(self.config.mask, strategies=tag)
            # reload so the evaluation sees exactly the float32 checkpoint
            trained = load_reformer(out / f"reformer_{tag}.ckpt")
            untrained = init_reformer(train.feature_dim, replace(base, seed=seed + 1000), tag, flat.mean(0), flat.std(0))
            before = masked_l1(untrained, heldout, mask, seed + 2000)
            after = masked_l1(trained, heldout, mask, seed + 2000)
            final = float(np.mean(model.train_losses[-50:])) if model.train_losses else float("nan")
            table.rows.append([tag, before, after, after / before, final])
        _write_json(out / "tables.json", {"reformer_l1": table.to_json()})

    def _run_attack(self, out: Path):
        _, heldout, std = self.corpora()
        asv = self.asv()
        base = self.config.attack
        plans = [(NA, replace(base, aware_blocks=0), [])]
        for tag in self.config.aware.tags:
            blocks = self.config.aware.blocks
            plans.append((f"aware-{tag}", replace(base, aware_blocks=blocks), [self.reformer(tag)] * blocks))
        stats = Table(["scenario", "n_trials", "max_linf_over_eps", "mean_score_shift"])
        eps_abs, _ = base.radii(std)
        for name, cfg, chain in plans:
            adv = attack_trial_set(asv, chain, heldout, heldout.trials, cfg, std)
            d = out / name
            (d / "feats").mkdir(parents=True)
            for uid, feats in adv.features.items():
                save_features(d / "feats" / f"{uid}.asvf", feats)
            save_trials(d / "trials", adv.trials, with_provenance=True)
            ratio = max((np.max(np.abs(r.x_adv.data.astype(np.float64) - heldout[t.test_id].features.data) / np.maximum(eps_abs, 1e-300))
                         for r, t in zip(adv.results, heldout.trials)), default=0.0)
            shift = float(np.mean([r.score_after - r.score_before for r in adv.results])) if adv.results else 0.0
            stats.rows.append([name, len(adv.trials), float(ratio), shift])
        _write_json(out / "tables.json", {"attack_stats": stats.to_json()})

    def _trial_arrays(self, asv, heldout: Corpus):
        trials = heldout.trials
        enroll = np.stack([extract_embedding(asv, heldout[t.enroll_id].features.data) for t in trials])
        labels = np.array([t.is_target for t in trials])
        return trials, enroll, labels

    def _genuine_traces(self, asv, reformer, k, heldout, trials, enroll, transform=None):
        """Traces for the genuine test side; every unique test utterance is purified once."""
        test_ids = sorted({t.test_id for t in trials})
        x = np.stack([heldout[u].features.data for u in test_ids])
        if transform is not None:
            x = np.stack([transform(v) for v in x])
        steps = purify_steps(reformer, x, k) if reformer is not None else [x]
        row = {u: i for i, u in enumerate(test_ids)}
        idx = np.array([row[t.test_id] for t in trials])
        return np.stack([batch_scores(asv, enroll, s[idx]) for s in steps], axis=1)

    def _adv_traces(self, asv, reformer, k, adv_trials, adv_feats, enroll, transform=None):
        x = np.stack([adv_feats[t.test_id] for t in adv_trials])
        if transform is not None:
            x = np.stack([transform(v) for v in x])
        return batch_traces(asv, reformer, k, enroll, x)

    def _run_purify(self, out: Path):
        cfg = self.config
        _, heldout, _ = self.corpora()
        asv = self.asv()
        trials, enroll, labels = self._trial_arrays(asv, heldout)
        kmax = cfg.cascade.k
        adv = {sc: self.adversarial(sc) for sc in self.scenarios()}
        (out / "traces").mkdir()
        scores: dict[str, dict[str, np.ndarray]] = {}
        for tag in cfg.reformer.tags:
            rf = self.reformer(tag)
            scores[tag] = {"genuine": self._genuine_traces(asv, rf, kmax, heldout, trials, enroll)}
            names = self.scenarios() if tag == cfg.cascade.reformer_tag else [NA]
            for sc in names:
                scores[tag][sc] = self._adv_traces(asv, rf, kmax, adv[sc][0], adv[sc][1], enroll)
            for key, arr in scores[tag].items():
                prov = "genuine" if key == "genuine" else "adversarial"
                save_traces(out / "traces" / f"{tag}_{key}.txt", _traces(arr, trials, prov))
        filt = {}
        for kind in FILTER_KINDS:
            fn = _filter(kind, cfg.filters.kernel, cfg.filters.sigma)
            filt[kind] = {"genuine": self._genuine_traces(asv, None, 0, heldout, trials, enroll, fn)[:, 0]}
            for sc in self.scenarios():
                filt[kind][sc] = self._adv_traces(asv, None, 0, adv[sc][0], adv[sc][1], enroll, fn)[:, 0]
        tables, summary = purification_tables(cfg, asv.tau, labels, scores, filt, self.scenarios())
        _write_json(out / "tables.json", {k: v.to_json() for k, v in tables.items()})
        _write_json(out / "summary.json", summary)

    def _run_detect(self, out: Path):
        cfg = self.config
        src = self.stage_dir("purify") / "traces"
        tag = cfg.cascade.reformer_tag
        gen = load_traces(src / f"{tag}_genuine.txt")
        adv = load_traces(src / f"{tag}_{NA}.txt")
        tau_asv = self.asv().tau
        tables, summary = detection_tables(cfg, tau_asv, gen, adv)
        _write_json(out / "tables.json", {k: v.to_json() for k, v in tables.items()})
        _write_json(out / "summary.json", summary)

    def _run_finetune(self, out: Path):
        cfg = self.config
        train, heldout, _ = self.corpora()
        asv = self.asv()
        tag = cfg.cascade.reformer_tag
        rf = self.reformer(tag)
        cascade = CascadeConfig(tag, cfg.cascade.k)
        seed = stage_seed(cfg, "finetune")
        tuned = finetune_asv(asv, train, lambda x: purify(cascade, rf, x),
                             replace(cfg.asv, seed=seed), cfg.finetune.epochs, heldout)
        save_asv(tuned, out / "asv_finetuned.ckpt")
        tuned = load_asv(out / "asv_finetuned.ckpt")
        adv_trials, adv_feats = self.adversarial(NA)
        table = Table(["system", "GenEER", "AdvFAR", "AdvFRR", "tau"])
        summary = {}
        for name, model in (("before", asv), ("after", tuned)):
            trials, enroll, labels = self._trial_arrays(model, heldout)
            g = self._genuine_traces(model, rf, cascade.k, heldout, trials, enroll)[:, -1]
            a = self._adv_traces(model, rf, cascade.k, adv_trials, adv_feats, enroll)[:, -1]
            op = solve_eer(g[labels], g[~labels])
            tau = op.tau if cfg.eval.recalibrate else model.tau
            row = [f"{cascade.k}*SSLR-{tag} {name} fine-tuning", op.eer, far(a[~labels], tau), frr(a[labels], tau), tau]
            table.rows.append(row)
            summary[f"finetune.{name}.gen_eer"] = op.eer
            summary[f"finetune.{name}.adv_far"] = row[2]
            summary[f"finetune.{name}.adv_frr"] = row[3]
        _write_json(out / "tables.json", {"finetune": table.to_json()})
        _write_json(out / "summary.json", summary)

    # ------------------------------------------------------------------ bundle

    def bundle(self) -> ReportBundle:
        b = ReportBundle()
        for stage in STAGES:
            d = self.stage_dir(stage)
            if (d / "tables.json").exists():
                for name, obj in _read_json(d / "tables.json").items():
                    b.tables[name] = Table.from_json(obj)
            if (d / "summary.json").exists():
                b.summary.update(_read_json(d / "summary.json"))
        traces = self.stage_dir("purify") / "traces"
        for path in sorted(traces.glob("*.txt")):
            b.traces[path.stem] = load_traces(path)
        b.report = MetricsReport(**{k: b.summary[f"report.{k}"] for k in
                                    ("gen_eer", "adv_far", "adv_frr", "eer_det", "j_far", "j_frr", "min_dcf", "pooling_ratio")})
        return b


def _filter(kind, kernel, sigma):
    return lambda x: filter_baseline(kind, x, kernel, sigma)


def _traces(arr: np.ndarray, trials, provenance: str) -> list[ScoreTrace]:
    prefix = "g" if provenance == "genuine" else "a"
    return [ScoreTrace(f"{prefix}{i:05d}", row, provenance, t.label) for i, (row, t) in enumerate(zip(arr, trials))]


def partition_from_scores(labels: np.ndarray, gen: np.ndarray, adv: np.ndarray,
                          d_gen: np.ndarray | None = None, d_adv: np.ndarray | None = None) -> TrialPartition:
    def items(prefix, scores, det, mask):
        return [ScoredTrial(f"{prefix}{i:05d}", float(scores[i]), None if det is None else float(det[i]))
                for i in np.flatnonzero(mask)]

    return TrialPartition(
        gen_tgt=items("g", gen, d_gen, labels), gen_ntgt=items("g", gen, d_gen, ~labels),
        adv_tgt=items("a", adv, d_adv, labels), adv_ntgt=items("a", adv, d_adv, ~labels),
    )


def _system_row(gen, adv, labels, tau_fixed, recalibrate, ratio_seed):
    op = solve_eer(gen[labels], gen[~labels])
    tau = op.tau if recalibrate else tau_fixed
    part = partition_from_scores(labels, gen, adv)
    j_far, j_frr = joint_purification(part, tau, 1.0, np.random.default_rng(ratio_seed))
    return {
        "gen_eer": op.eer, "tau": tau,
        "adv_far": far(adv[~labels], tau), "adv_frr": frr(adv[labels], tau),
        "adv_far_fixed": far(adv[~labels], tau_fixed), "adv_frr_fixed": frr(adv[labels], tau_fixed),
        "j_far": j_far, "j_frr": j_frr,
    }


def purification_tables(cfg: ExperimentConfig, tau_asv: float, labels: np.ndarray,
                        scores: dict, filt: dict, scenarios: list[str]):
    rec = cfg.eval.recalibrate
    seed = cfg.global_seed + STAGES.index("purify")
    tables: dict[str, Table] = {}
    summary: dict[str, object] = {}
    tag = cfg.cascade.reformer_tag
    kmax = cfg.cascade.k

    g0 = scores[tag]["genuine"][:, 0]
    a0 = scores[tag][NA][:, 0]
    t1 = Table(["input", "EER", "minDCF"])
    for name, s in (("genuine input", g0), ("adversarial input", a0)):
        op = solve_eer(s[labels], s[~labels])
        t1.rows.append([name, op.eer, min_dcf(s[labels], s[~labels], cfg.eval.p_target)])
    tables["table1_asv"] = t1
    summary.update({"asv.tau": tau_asv, "undefended.gen_eer": t1.rows[0][1], "undefended.gen_min_dcf": t1.rows[0][2],
                    "undefended.adv_eer": t1.rows[1][1], "undefended.adv_min_dcf": t1.rows[1][2]})

    sweep = Table(["reformer", "scenario", "K", "GenEER", "tau", "AdvFAR", "AdvFRR", "AdvFAR_fixed_tau", "AdvFRR_fixed_tau", "jFAR", "jFRR"])
    for rtag, per in scores.items():
        for sc in [s for s in scenarios if s in per]:
            for k in range(kmax + 1):
                r = _system_row(per["genuine"][:, k], per[sc][:, k], labels, tau_asv, rec, seed)
                sweep.rows.append([rtag, sc, k, r["gen_eer"], r["tau"], r["adv_far"], r["adv_frr"],
                                   r["adv_far_fixed"], r["adv_frr_fixed"], r["j_far"], r["j_frr"]])
    tables["purification_sweep"] = sweep

    systems = {"NA": (scores[tag]["genuine"][:, 0], {sc: scores[tag][sc][:, 0] for sc in scenarios})}
    for kind in FILTER_KINDS:
        systems[kind] = (filt[kind]["genuine"], {sc: filt[kind][sc] for sc in scenarios})
    for rtag, per in scores.items():
        ks = sorted({1, kmax}) if kmax >= 1 else []
        for k in ks:
            systems[f"{k}*SSLR-{rtag}"] = (per["genuine"][:, k], {sc: per[sc][:, k] for sc in scenarios if sc in per})

    t2 = Table(["system", "AdvFAR", "AdvFRR", "GenEER", "tau"])
    t4 = Table(["system"] + [f"{sc}:{m}" for sc in scenarios for m in ("jFAR", "jFRR")])
    results = {}
    for name, (gen, advs) in systems.items():
        r = _system_row(gen, advs[NA], labels, tau_asv, rec, seed)
        results[name] = r
        t2.rows.append([name, r["adv_far"], r["adv_frr"], r["gen_eer"], r["tau"]])
        if all(sc in advs for sc in scenarios):
            row = [name]
            for sc in scenarios:
                rs = _system_row(gen, advs[sc], labels, tau_asv, rec, seed)
                row += [rs["j_far"], rs["j_frr"]]
            t4.rows.append(row)
    tables["table2_purification"] = t2
    tables["table4_joint_purification"] = t4

    ratio_table = Table(["system", "ratio", "jFAR", "jFRR"])
    for name in ["NA", *FILTER_KINDS] + ([f"{kmax}*SSLR-{tag}"] if kmax >= 1 else []):
        gen, advs = systems[name]
        op = solve_eer(gen[labels], gen[~labels])
        tau = op.tau if rec else tau_asv
        part = partition_from_scores(labels, gen, advs[NA])
        for ratio in cfg.eval.pooling_ratios:
            j_far, j_frr = joint_purification(part, tau, ratio, np.random.default_rng(seed))
            ratio_table.rows.append([name, ratio, j_far, j_frr])
    tables["pooling_ratio"] = ratio_table

    head = f"{kmax}*SSLR-{tag}" if kmax >= 1 else "NA"
    hr = results[head]
    for name, r in results.items():
        for key in ("gen_eer", "adv_far", "adv_frr", "j_far", "j_frr"):
            summary[f"system.{name}.{key}"] = r[key]
    defended_gen = systems[head][0]
    summary.update({
        "report.gen_eer": hr["gen_eer"], "report.adv_far": hr["adv_far"], "report.adv_frr": hr["adv_frr"],
        "report.j_far": hr["j_far"], "report.j_frr": hr["j_frr"], "report.pooling_ratio": 1.0,
        "report.min_dcf": min_dcf(defended_gen[labels], defended_gen[~labels], cfg.eval.p_target),
        "report.system": head,
    })
    return tables, summary


def detection_tables(cfg: ExperimentConfig, tau_asv: float, gen: list[ScoreTrace], adv: list[ScoreTrace]):
    g = np.stack([t.scores for t in gen])
    a = np.stack([t.scores for t in adv])
    labels = np.array([t.label == "target" for t in gen])
    inc = cfg.detection.include_s0
    t5 = Table(["moment_order", "EER_det", "tau_det", "mean_t_genuine", "mean_t_adversarial"])
    summary: dict[str, object] = {}
    orders = sorted(set(cfg.detection.orders) | {cfg.detection.moment_order})
    ops = {}
    for k in orders:
        dg, da = trace_moments(g, k, inc), trace_moments(a, k, inc)
        op = detection_eer(dg, da)
        ops[k] = (op, dg, da)
        t5.rows.append([k, op.eer, op.tau, float(dg.mean()), float(da.mean())])
        summary[f"detection.moment{k}.eer_det"] = op.eer
        summary[f"detection.moment{k}.mean_t_genuine"] = float(dg.mean())
        summary[f"detection.moment{k}.mean_t_adversarial"] = float(da.mean())
    op, dg, da = ops[cfg.detection.moment_order]
    part = partition_from_scores(labels, g[:, 0], a[:, 0], dg, da)
    t6 = Table(["system", "jFAR", "jFRR"])
    for name, tau_det in (("NA+ASV", float("inf")), ("det+ASV", op.tau)):
        j_far, j_frr = joint_detection(part, tau_det, tau_asv)
        t6.rows.append([name, j_far, j_frr])
        summary[f"detection.{name}.j_far"] = j_far
        summary[f"detection.{name}.j_frr"] = j_frr
    summary["report.eer_det"] = op.eer
    summary["detection.tau_det"] = op.tau
    return {"table5_detection": t5, "table6_joint_detection": t6}, summary


def run_experiment(config: ExperimentConfig, emit: bool = True) -> ReportBundle:
    """Run (or reuse) every stage and optionally write the report under ``output_dir/report``."""
    pipe = Pipeline(config)
    pipe.root.mkdir(parents=True, exist_ok=True)
    (pipe.root / "config.txt").write_text(dump_config(config), encoding="utf-8")
    for stage in STAGES:
        pipe.ensure(stage)
    bundle = pipe.bundle()
    bundle.executed = list(pipe.executed)
    if emit:
        from .report import emit_report

        try:
            emit_report(bundle, pipe.root / "report")
        except Exception as exc:
            raise StageError("report", exc) from exc
    return bundle
