"""Command-line pipeline.

    pipeline <synth|cohort|report|pretrain|finetune|baseline|evaluate|explain|all>
             --config <path> [--workers N] [--paper-epochs]

Every subcommand checks its prerequisite artifacts and exits with code 2
naming anything missing. Exit codes: 0 success, 1 data/validation
failure, 2 missing prerequisite, 3 configuration error. All outputs are
byte-deterministic given the config; wall-clock timestamps are confined
to run.log.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path

import numpy as np

from . import attribution as A
from . import baseline as B
from . import cohort as C
from . import ehr as E
from . import metrics as MX
from . import model as M
from . import report as R
from . import synth as S
from . import trainer as T
from .config import ConfigError, PipelineConfig, load_config


class MissingArtifact(Exception):
    pass


def _require(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(f"missing {path} (run `pipeline {producer}` first)")
    return path


def _log(cfg: PipelineConfig, message: str) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.artifact("run.log"), "a", encoding="utf-8") as fh:
        fh.write(f"{datetime.now().isoformat()} {message}\n")
    print(message)


def _load_tables(cfg: PipelineConfig, producer: str = "synth"):
    dictionary = E.load_features(_require(cfg.features_path(), producer))
    stays, rep_s = E.ingest_stays(_require(cfg.table_path("stays"), producer))
    profiles, rep_p = E.ingest_profiles(_require(cfg.table_path("static"), producer))
    obs, rep_o = E.ingest_events(_require(cfg.table_path("observations"), producer),
                                 "observation", dictionary)
    meds, rep_m = E.ingest_events(_require(cfg.table_path("medications"), producer),
                                  "medication", dictionary)
    assess, rep_a = E.ingest_events(_require(cfg.table_path("assessments"), producer),
                                    "assessment", dictionary)
    report = rep_s.merged(rep_p).merged(rep_o).merged(rep_m).merged(rep_a)
    return dictionary, stays, profiles, obs, meds, assess, report


def _events_by_stay(events) -> dict:
    out = {}
    for ev in events:
        out.setdefault(ev.stay_id, []).append(ev)
    return out


def _included_stay_ids(cfg: PipelineConfig) -> list:
    path = _require(cfg.artifact("cohort_decisions.csv"), "cohort")
    import csv
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return [row["stay_id"] for row in csv.DictReader(fh) if row["included"] == "1"]


def _partition_of_stays(cfg: PipelineConfig, stays) -> dict:
    split = C.read_split_csv(_require(cfg.artifact("split.csv"), "cohort"))
    return {s.stay_id: split.get(s.patient_id) for s in stays}


def cmd_synth(cfg: PipelineConfig) -> None:
    _log(cfg, f"synth: generating {cfg.synth.n_stays} stays (seed {cfg.master_seed})")
    scfg = S.SynthConfig(
        n_stays=cfg.synth.n_stays,
        seed=cfg.seed_for("synth"),
        delirium_rate_target=cfg.synth.delirium_rate,
        signal_features=tuple(sorted(cfg.synth.signal_features.items())),
        noise_scale=cfg.synth.noise_scale,
        missing_rate=cfg.synth.missing_rate,
        exclusion_plant=dict(cfg.synth.exclusion_plant),
    )
    data = S.generate_cohort(scfg)
    tables = cfg.tables_dir()
    tables.mkdir(parents=True, exist_ok=True)
    E.write_stays_csv(cfg.table_path("stays"), data.stays)
    E.write_profiles_csv(cfg.table_path("static"), data.profiles)
    E.write_observations_csv(cfg.table_path("observations"), data.observations)
    E.write_medications_csv(cfg.table_path("medications"), data.medications)
    E.write_assessments_csv(cfg.table_path("assessments"), data.assessments)
    E.write_features_csv(cfg.features_path(), data.dictionary)
    S.write_truth_csv(tables / "truth.csv", data.truth)
    S.write_planted_importance_csv(tables / "planted_importance.csv",
                                   data.truth.planted_importance)
    n_pos = sum(data.truth.label.values())
    _log(cfg, f"synth: wrote tables ({len(data.stays)} stays, {n_pos} delirium labels)")


def cmd_cohort(cfg: PipelineConfig) -> None:
    dictionary, stays, profiles, obs, meds, assess, report = _load_tables(cfg)
    if report.rejected_rows:
        _log(cfg, f"cohort: {len(report.rejected_rows)} rejected rows during ingestion")
    findings = E.validate_dataset(stays, obs + meds + assess, profiles)
    if findings.findings:
        _log(cfg, f"cohort: {len(findings.findings)} cross-table findings")
    assess_by_stay = _events_by_stay(assess)
    labels = {s.stay_id: C.label_stay(s, assess_by_stay.get(s.stay_id, []))
              for s in stays}
    presence = C.ehr_presence_index(obs, meds, assess)
    profile_map = {p.stay_id: p for p in profiles}
    decisions = C.select_cohort(stays, labels, presence, profile_map)
    included_patients = {s.patient_id for s, d in zip(stays, decisions) if d.included}
    split = C.split_dataset(included_patients, cfg.seed_for("split"))
    C.write_decisions_csv(cfg.artifact("cohort_decisions.csv"), decisions)
    C.write_labels_csv(cfg.artifact("labels.csv"),
                       [labels[s.stay_id] for s in stays])
    C.write_split_csv(cfg.artifact("split.csv"), split)
    n_inc = sum(d.included for d in decisions)
    _log(cfg, f"cohort: {n_inc}/{len(stays)} stays included; "
              f"split {len(split.train_ids)}/{len(split.tune_ids)}/"
              f"{len(split.internal_validation_ids)}")


def cmd_report(cfg: PipelineConfig) -> None:
    dictionary, stays, profiles, obs, meds, assess, _ = _load_tables(cfg)
    included = set(_included_stay_ids(cfg))
    partition = _partition_of_stays(cfg, stays)
    profile_map = {p.stay_id: p for p in profiles}
    obs_by, med_by, ass_by = map(_events_by_stay, (obs, meds, assess))
    reports = []
    for stay in stays:
        if stay.stay_id not in included:
            continue
        summary = R.summarize_features(obs_by.get(stay.stay_id, []),
                                       med_by.get(stay.stay_id, []),
                                       ass_by.get(stay.stay_id, []),
                                       dictionary, stay.stay_id)
        reports.append(R.render_report(profile_map[stay.stay_id], summary, dictionary))
    reports.sort(key=lambda r: r.stay_id)
    R.write_reports_jsonl(cfg.artifact("reports.jsonl"), reports)
    train_corpus = [r.serialized for r in reports if partition.get(r.stay_id) == "train"]
    vocab = R.build_vocab(train_corpus, cfg.report.min_frequency)
    R.write_vocab_csv(cfg.artifact("vocab.csv"), vocab)
    _log(cfg, f"report: {len(reports)} reports, vocabulary {len(vocab)} tokens "
              f"(from {len(train_corpus)} training reports)")


def _load_tokenized(cfg: PipelineConfig):
    dictionary = E.load_features(_require(cfg.features_path(), "synth"))
    reports = R.read_reports_jsonl(_require(cfg.artifact("reports.jsonl"), "report"))
    vocab = R.read_vocab_csv(_require(cfg.artifact("vocab.csv"), "report"))
    stays, _ = E.ingest_stays(_require(cfg.table_path("stays"), "synth"))
    partition = _partition_of_stays(cfg, stays)
    tokenized = {r.stay_id: R.tokenize(r, vocab, cfg.report.max_seq_len, dictionary)
                 for r in reports}
    return dictionary, reports, vocab, stays, partition, tokenized


def _model_config(cfg: PipelineConfig, vocab_size: int) -> M.ModelConfig:
    return M.ModelConfig(vocab_size=vocab_size,
                         max_seq_len=cfg.report.max_seq_len,
                         num_layers=cfg.model.num_layers,
                         hidden_dim=cfg.model.hidden_dim,
                         num_heads=cfg.model.num_heads,
                         ffn_dim=cfg.model.ffn_dim,
                         dropout_rate=cfg.model.dropout_rate)


def _sequences_for(partition, tokenized, part: str) -> list:
    ids = sorted(sid for sid, p in partition.items() if p == part and sid in tokenized)
    return ids, [np.asarray(tokenized[sid].token_ids, dtype=np.int64) for sid in ids]


def cmd_pretrain(cfg: PipelineConfig) -> None:
    _, _, vocab, _, partition, tokenized = _load_tokenized(cfg)
    _, train_seqs = _sequences_for(partition, tokenized, "train")
    _, tune_seqs = _sequences_for(partition, tokenized, "tune")
    model_cfg = _model_config(cfg, len(vocab))
    space = T.SearchSpace.for_model(model_cfg.num_layers, cfg.pretrain.lr_low,
                                    cfg.pretrain.lr_high, cfg.pretrain.batch_sizes)
    _log(cfg, f"pretrain: {cfg.pretrain.n_trials} trials x {cfg.pretrain.max_epochs} epochs "
              f"on {len(train_seqs)} reports")
    outcome = T.run_pretraining_search(train_seqs, tune_seqs, model_cfg, space,
                                       n_trials=cfg.pretrain.n_trials,
                                       max_epochs=cfg.pretrain.max_epochs,
                                       seed=cfg.seed_for("pretrain"),
                                       mask_rate=cfg.pretrain.mask_rate)
    cfg.checkpoint("pretrained").parent.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(cfg.checkpoint("pretrained"), outcome.model)
    outcome.winner.checkpoint_path = str(cfg.checkpoint("pretrained"))
    T.write_trials_csv(cfg.artifact("trials_pretrain.csv"), outcome.results)
    _log(cfg, f"pretrain: winner trial {outcome.winner.trial.trial_id} "
              f"tuning loss {outcome.winner.best_metric:.4f} "
              f"(initial {outcome.winner.initial_metric:.4f})")


def cmd_finetune(cfg: PipelineConfig) -> None:
    pretrained, _ = M.load_checkpoint(_require(cfg.checkpoint("pretrained"), "pretrain"))
    _, _, vocab, _, partition, tokenized = _load_tokenized(cfg)
    labels = C.read_labels_csv(_require(cfg.artifact("labels.csv"), "cohort"))
    train_ids, train_seqs = _sequences_for(partition, tokenized, "train")
    tune_ids, tune_seqs = _sequences_for(partition, tokenized, "tune")
    train_labels = [int(labels[sid].delirium) for sid in train_ids]
    tune_labels = [int(labels[sid].delirium) for sid in tune_ids]
    space = T.SearchSpace.for_model(pretrained.config.num_layers, cfg.finetune.lr_low,
                                    cfg.finetune.lr_high, cfg.finetune.batch_sizes)
    _log(cfg, f"finetune: {cfg.finetune.n_trials} trials x {cfg.finetune.max_epochs} epochs "
              f"on {len(train_seqs)} reports ({sum(train_labels)} positive)")
    outcome = T.run_finetune_search(pretrained, train_seqs, train_labels,
                                    tune_seqs, tune_labels, space,
                                    n_trials=cfg.finetune.n_trials,
                                    max_epochs=cfg.finetune.max_epochs,
                                    seed=cfg.seed_for("finetune"))
    M.save_checkpoint(cfg.checkpoint("final"), outcome.model)
    outcome.winner.checkpoint_path = str(cfg.checkpoint("final"))
    T.write_trials_csv(cfg.artifact("trials_finetune.csv"), outcome.results)
    _log(cfg, f"finetune: winner trial {outcome.winner.trial.trial_id} "
              f"tuning AUROC {outcome.winner.best_metric:.4f}")


def cmd_baseline(cfg: PipelineConfig) -> None:
    dictionary, stays, profiles, obs, meds, assess, _ = _load_tables(cfg)
    labels = C.read_labels_csv(_require(cfg.artifact("labels.csv"), "cohort"))
    included = set(_included_stay_ids(cfg))
    partition = _partition_of_stays(cfg, stays)
    profile_map = {p.stay_id: p for p in profiles}
    obs_by, med_by, ass_by = map(_events_by_stay, (obs, meds, assess))
    vectors = {}
    for stay in stays:
        if stay.stay_id not in included:
            continue
        vectors[stay.stay_id] = B.extract_stat_features(
            obs_by.get(stay.stay_id, []), med_by.get(stay.stay_id, []),
            ass_by.get(stay.stay_id, []), profile_map[stay.stay_id],
            dictionary, stay.stay_id)
    ordered = sorted(vectors)
    B.write_stat_features_csv(cfg.artifact("stat_features.csv"),
                              [vectors[sid] for sid in ordered], dictionary)
    train_ids = [sid for sid in ordered if partition.get(sid) == "train"]
    train_vecs = [vectors[sid] for sid in train_ids]
    train_labels = [int(labels[sid].delirium) for sid in train_ids]
    _log(cfg, f"baseline: training on {len(train_vecs)} stays "
              f"({sum(train_labels)} positive), {cfg.baseline.epochs} epochs")
    model = B.train_baseline(train_vecs, train_labels, hidden=cfg.baseline.hidden,
                             learning_rate=cfg.baseline.learning_rate,
                             epochs=cfg.baseline.epochs,
                             seed=cfg.seed_for("baseline"),
                             batch_size=cfg.baseline.batch_size)
    cfg.checkpoint("baseline").parent.mkdir(parents=True, exist_ok=True)
    B.save_baseline(cfg.checkpoint("baseline"), model)
    _log(cfg, "baseline: checkpoint written")


def _validation_cohorts(cfg: PipelineConfig):
    """Scored validation cohorts for the text model and the NN baseline."""
    dictionary, stays, profiles, obs, meds, assess, _ = _load_tables(cfg)
    labels = C.read_labels_csv(_require(cfg.artifact("labels.csv"), "cohort"))
    partition = _partition_of_stays(cfg, stays)
    included = set(_included_stay_ids(cfg))
    val_stays = sorted((s for s in stays if partition.get(s.stay_id) == "validation"
                        and s.stay_id in included), key=lambda s: s.stay_id)

    final, _ = M.load_checkpoint(_require(cfg.checkpoint("final"), "finetune"))
    reports = {r.stay_id: r for r in R.read_reports_jsonl(
        _require(cfg.artifact("reports.jsonl"), "report"))}
    vocab = R.read_vocab_csv(_require(cfg.artifact("vocab.csv"), "report"))
    seqs = [np.asarray(R.tokenize(reports[s.stay_id], vocab, cfg.report.max_seq_len,
                                  dictionary).token_ids, dtype=np.int64)
            for s in val_stays]
    text_scores = T.classify_scores(final, seqs)

    nn_model = B.load_baseline(_require(cfg.checkpoint("baseline"), "baseline"))
    profile_map = {p.stay_id: p for p in profiles}
    obs_by, med_by, ass_by = map(_events_by_stay, (obs, meds, assess))
    vecs = [B.extract_stat_features(obs_by.get(s.stay_id, []), med_by.get(s.stay_id, []),
                                    ass_by.get(s.stay_id, []), profile_map[s.stay_id],
                                    dictionary, s.stay_id)
            for s in val_stays]
    nn_scores = B.score_baseline_many(nn_model, vecs)

    def cohort_for(scores):
        entries = []
        for stay, score in zip(val_stays, scores):
            rec = labels[stay.stay_id]
            entries.append(MX.ScoredStay(stay_id=stay.stay_id, score=float(score),
                                         label=int(rec.delirium),
                                         onset_interval=rec.onset_interval,
                                         los_hours=stay.los_hours))
        return MX.ScoredCohort(tuple(entries))

    return cohort_for(text_scores), cohort_for(nn_scores)


def cmd_evaluate(cfg: PipelineConfig) -> None:
    text_cohort, nn_cohort = _validation_cohorts(cfg)
    _log(cfg, f"evaluate: {len(text_cohort.entries)} validation stays, "
              f"{int(text_cohort.labels.sum())} positive")
    rows, per_day_rows, roc_rows = [], [], []
    reports = {}
    for name, cohort in (("text_encoder", text_cohort), ("nn_baseline", nn_cohort)):
        rep = MX.bootstrap_auroc(cohort, iterations=cfg.eval.iterations,
                                 seed=cfg.seed_for(f"bootstrap:{name}"))
        rep.per_day = MX.per_day_auroc(cohort, days=cfg.eval.days)
        reports[name] = rep
        rows.append((name, rep))
        per_day_rows.append((name, rep.per_day))
        roc_rows.append((name, MX.roc_points(cohort.scores, cohort.labels)))
        _log(cfg, f"evaluate: {name} AUROC {rep.auroc_median:.4f} "
                  f"[{rep.ci_low:.4f}, {rep.ci_high:.4f}]")
    comparison = MX.wilcoxon_rank_sum(reports["text_encoder"].bootstrap_samples,
                                      reports["nn_baseline"].bootstrap_samples,
                                      "text_encoder", "nn_baseline")
    MX.write_metrics_csv(cfg.artifact("metrics.csv"), rows)
    MX.write_per_day_csv(cfg.artifact("per_day.csv"), per_day_rows)
    MX.write_roc_csv(cfg.artifact("roc.csv"), roc_rows)
    MX.write_comparisons_csv(cfg.artifact("comparisons.csv"), [comparison])
    import csv
    with open(cfg.artifact("scores.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id", "model", "score", "label"])
        for name, cohort in (("text_encoder", text_cohort), ("nn_baseline", nn_cohort)):
            for e in cohort.entries:
                w.writerow([e.stay_id, name, repr(e.score), e.label])
    _log(cfg, f"evaluate: comparison p={comparison.p_value:.4g}")


def cmd_explain(cfg: PipelineConfig) -> None:
    dictionary, reports, vocab, stays, partition, tokenized = _load_tokenized(cfg)
    final, _ = M.load_checkpoint(_require(cfg.checkpoint("final"), "finetune"))
    val_ids = sorted(sid for sid, p in partition.items()
                     if p == "validation" and sid in tokenized)
    val_ids = val_ids[:cfg.attribution.sample_cap]
    _log(cfg, f"explain: attributing {len(val_ids)} validation reports "
              f"(mode {cfg.attribution.mode}, m={cfg.attribution.permutations})")
    report_map = {r.stay_id: r for r in reports}

    def attribute(sid):
        tok = tokenized[sid]
        return A.shapley_sections(tok, A.model_value_fn(final, tok),
                                  mode=cfg.attribution.mode,
                                  permutations=cfg.attribution.permutations,
                                  seed=cfg.seed_for(f"shap:{sid}"))

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            attributions = list(pool.map(attribute, val_ids))
    else:
        attributions = [attribute(sid) for sid in val_ids]

    A.write_attribution_csv(cfg.artifact("attribution.csv"), attributions)
    importance = A.aggregate_importance(attributions, dictionary)
    A.write_importance_csv(cfg.artifact("importance.csv"), importance)
    plots = cfg.output_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    import csv
    for sid, attr in zip(val_ids, attributions):
        markup, phi_rows = A.export_text_plot(report_map[sid], attr)
        (plots / f"{sid}.html").write_text(markup, encoding="utf-8")
        with open(plots / f"{sid}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["section", "phi"])
            for label, phi in phi_rows:
                w.writerow([label, repr(phi)])
    top = [label for label, _, _, _ in importance.rows[:5]]
    _log(cfg, f"explain: top features {top}")


COMMANDS = {
    "synth": cmd_synth,
    "cohort": cmd_cohort,
    "report": cmd_report,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
}


def cmd_all(cfg: PipelineConfig) -> None:
    for name in ("synth", "cohort", "report", "pretrain", "finetune",
                 "baseline", "evaluate", "explain"):
        COMMANDS[name](cfg)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pipeline",
        description="ICU delirium risk pipeline over structured EHR text reports")
    parser.add_argument("command", choices=list(COMMANDS) + ["all"])
    parser.add_argument("--config", required=True, help="YAML pipeline configuration")
    parser.add_argument("--workers", type=int, default=None,
                        help="override worker count for parallel stages")
    parser.add_argument("--paper-epochs", action="store_true",
                        help="use 100 pretraining / 30 fine-tuning epochs")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.workers is not None:
            cfg.workers = args.workers
        if args.paper_epochs:
            cfg.pretrain.max_epochs = 100
            cfg.finetune.max_epochs = 30
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "all":
            cmd_all(cfg)
        else:
            COMMANDS[args.command](cfg)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, R.ReportError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    except (E.SchemaError, E.DataError, MX.UndefinedMetricError,
            M.TrainingAbort, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
