"""Command-line pipeline: generate data, train teacher, extract rationales,
train student, evaluate, and run the analyses.

Every command resolves its configuration from built-in defaults, an
optional YAML file (``--config``) and flag overrides (flags win), writes
the resolved config and a manifest of input digests next to its outputs,
and overwrites its own outputs atomically. A fixed top-level seed makes
reruns byte-identical.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric failure (training divergence).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .attribution import top_k_tokens, write_attribution_dump, ATTRIBUTORS
from .data import GENERATORS, load_dataset, save_dataset
from .distill import (TrainConfig, as_rationale_examples,
                      build_rationale_dataset, load_rationale_dataset,
                      save_rationale_dataset, train)
from .errors import ConfigError, DataError, GradDistillError, \
    TrainingDivergedError
from .evaluation import (control_comparison, evaluate, k_sweep,
                         overlap_with_truth, prediction_similarity,
                         write_metric_report, write_sweep_curve, EvalReport)
from .io_utils import (atomic_write_text, config_fingerprint, sha256_file,
                       write_jsonl)
from .model import ModelConfig, Seq2SeqModel

OUTPUT_ROOT_ENV = "GRADDISTILL_OUT"

DEFAULT_CONFIG = {
    "seed": 0,
    "task": "marker_classification",
    "data": {
        "n_examples": 2500,
        "n_labels": 3,
        "n_choices": 5,
        "seq_len": 16,
        "vocab_size": 256,
    },
    "teacher": {
        "d_model": 64, "n_heads": 4, "n_layers_enc": 2, "n_layers_dec": 2,
        "d_ff": 256, "max_seq_len": 64,
    },
    "student": {
        "d_model": 32, "n_heads": 4, "n_layers_enc": 1, "n_layers_dec": 1,
        "d_ff": 128, "max_seq_len": 64,
    },
    "teacher_train": {
        "learning_rate": 0.3, "epochs": 8, "batch_size": 16,
        "lambda": 0.0, "k": 5, "target_mode": "dual",
    },
    "student_train": {
        "learning_rate": 0.3, "epochs": 6, "batch_size": 16,
        "lambda": 0.5, "k": 5, "target_mode": "dual",
    },
    "attribution": {
        "method": "saliency", "k": 5, "ig_steps": 64,
        "ig_baseline": "zero_embedding",
    },
}


# ---------------------------------------------------------------------------
# configuration plumbing


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {where} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def resolve_config(config_path: str | None, seed: int | None = None) -> dict:
    """Defaults, then the YAML file, then flag overrides; flags win."""
    resolved = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"missing config file: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        resolved = _merge(resolved, loaded)
    if seed is not None:
        resolved["seed"] = int(seed)
    if resolved["task"] not in GENERATORS:
        raise ConfigError(f"unknown configuration value task="
                          f"{resolved['task']!r}")
    return resolved


def _derived_seed(config: dict, offset: int) -> int:
    return int(config["seed"]) + offset

# Seed offsets per pipeline stage, so one top-level seed drives everything.
SEED_DATA, SEED_TEACHER, SEED_STUDENT = 0, 1, 2
SEED_TEACHER_TRAIN, SEED_STUDENT_TRAIN, SEED_ATTRIBUTION = 3, 4, 5


def _model_config(section: dict, vocab_size: int, seed: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, seed=seed,
                       **{k: int(v) for k, v in section.items()})


def _train_config(section: dict, seed: int) -> TrainConfig:
    payload = dict(section)
    payload["seed"] = seed
    return TrainConfig.from_dict(payload)


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / command


def _write_run_metadata(out_dir: Path, config: dict, inputs: dict) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = config_fingerprint(config)
    atomic_write_text(out_dir / "resolved_config.yaml",
                      yaml.safe_dump(config, sort_keys=True))
    manifest = {"config_fingerprint": fingerprint,
                "inputs": {str(k): sha256_file(v) for k, v in inputs.items()}}
    atomic_write_text(out_dir / "manifest.json",
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return fingerprint


def _read_fingerprint(artifact_dir: Path) -> str | None:
    manifest = Path(artifact_dir) / "manifest.json"
    if not manifest.exists():
        return None
    return json.loads(manifest.read_text()).get("config_fingerprint")


def _check_fingerprint(expected: str, artifact_dir: Path, force: bool) -> None:
    found = _read_fingerprint(artifact_dir)
    if found is not None and found != expected and not force:
        raise DataError(
            f"config fingerprint mismatch for {artifact_dir} "
            f"(expected {expected}, found {found}); pass --force to override")


def _require(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing {what}: {path}")
    return path


def _generate_dataset(config: dict):
    data_cfg = config["data"]
    seed = _derived_seed(config, SEED_DATA)
    if config["task"] == "marker_classification":
        return GENERATORS[config["task"]](
            n_examples=int(data_cfg["n_examples"]),
            n_labels=int(data_cfg["n_labels"]),
            seq_len=int(data_cfg["seq_len"]),
            vocab_size=int(data_cfg["vocab_size"]), seed=seed)
    return GENERATORS[config["task"]](
        n_examples=int(data_cfg["n_examples"]),
        n_choices=int(data_cfg["n_choices"]),
        seq_len=int(data_cfg["seq_len"]),
        vocab_size=int(data_cfg["vocab_size"]), seed=seed)


def _student_eval_mode(config: dict) -> str:
    if config["attribution"]["method"] == "none":
        return "plain"
    return "dual" if config["student_train"]["target_mode"] == "dual" \
        else "concatenated"


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    config = resolve_config(args.config, args.seed)
    out_dir = _out_dir(args, "gen")
    dataset = _generate_dataset(config)
    save_dataset(dataset, out_dir / "dataset")
    _write_run_metadata(out_dir, config, {})
    print(f"wrote dataset ({len(dataset.train)}/{len(dataset.validation)}/"
          f"{len(dataset.test)} examples) to {out_dir / 'dataset'}")
    return 0


def cmd_train_teacher(args) -> int:
    config = resolve_config(args.config, args.seed)
    out_dir = _out_dir(args, "teacher")
    data_dir = _require(args.data, "dataset directory")
    dataset = load_dataset(data_dir)
    model = Seq2SeqModel(_model_config(config["teacher"], len(dataset.vocab),
                                       _derived_seed(config, SEED_TEACHER)))
    train_cfg = _train_config(config["teacher_train"],
                              _derived_seed(config, SEED_TEACHER_TRAIN))
    history = train(model, as_rationale_examples(dataset.train), train_cfg,
                    val_examples=dataset.validation)
    fingerprint = _write_run_metadata(out_dir, config,
                                      {"dataset": data_dir / "meta.json"})
    model.save(out_dir / "teacher.ckpt")
    write_jsonl(out_dir / "teacher_history.jsonl", history)
    report = evaluate(model, dataset.validation, dataset.vocab, mode="plain",
                      dataset_id=dataset.task, model_id="teacher")
    report.save(out_dir / "teacher_eval.jsonl", fingerprint=fingerprint)
    print(f"teacher validation accuracy: {report.accuracy:.4f} "
          f"(checkpoint at {out_dir / 'teacher.ckpt'})")
    return 0


def cmd_extract(args) -> int:
    config = resolve_config(args.config, args.seed)
    out_dir = _out_dir(args, "extract")
    dataset = load_dataset(_require(args.data, "dataset directory"))
    teacher = Seq2SeqModel.load(_require(args.teacher, "teacher checkpoint"))
    attr_cfg = config["attribution"]
    method = attr_cfg["method"]
    seed = _derived_seed(config, SEED_ATTRIBUTION)
    rationales = build_rationale_dataset(
        teacher, dataset.train, int(attr_cfg["k"]), method, seed=seed,
        vocab=dataset.vocab, ig_baseline=attr_cfg["ig_baseline"],
        ig_steps=int(attr_cfg["ig_steps"]))
    fingerprint = _write_run_metadata(out_dir, config,
                                      {"teacher": args.teacher})
    save_rationale_dataset(out_dir / "rationales.jsonl", rationales,
                           dataset.vocab)
    if method in ATTRIBUTORS:
        dump = []
        for ex in dataset.train:
            attr = ATTRIBUTORS[method](teacher, ex) if method == "saliency" \
                else ATTRIBUTORS[method](teacher, ex,
                                         baseline=attr_cfg["ig_baseline"],
                                         steps=int(attr_cfg["ig_steps"]))
            dump.append((attr, top_k_tokens(attr, int(attr_cfg["k"]))))
        write_attribution_dump(out_dir / "attribution_dump.jsonl", dump,
                               dataset.vocab)
    print(f"wrote {len(rationales)} rationale records to "
          f"{out_dir / 'rationales.jsonl'} (fingerprint {fingerprint})")
    return 0


def cmd_train_student(args) -> int:
    config = resolve_config(args.config, args.seed)
    out_dir = _out_dir(args, "student")
    dataset = load_dataset(_require(args.data, "dataset directory"))
    rationale_path = _require(args.rationales, "rationale dataset")
    rationales = load_rationale_dataset(rationale_path, dataset.vocab)
    model = Seq2SeqModel(_model_config(config["student"], len(dataset.vocab),
                                       _derived_seed(config, SEED_STUDENT)))
    train_cfg = _train_config(config["student_train"],
                              _derived_seed(config, SEED_STUDENT_TRAIN))
    history = train(model, rationales, train_cfg,
                    val_examples=dataset.validation)
    fingerprint = _write_run_metadata(out_dir, config,
                                      {"rationales": rationale_path})
    model.save(out_dir / "student.ckpt")
    write_jsonl(out_dir / "student_history.jsonl", history)
    report = evaluate(model, dataset.test, dataset.vocab,
                      mode=_student_eval_mode(config),
                      dataset_id=dataset.task, model_id="student")
    report.save(out_dir / "student_eval.jsonl", fingerprint=fingerprint)
    print(f"student test accuracy: {report.accuracy:.4f} "
          f"(checkpoint at {out_dir / 'student.ckpt'})")
    return 0


def cmd_evaluate(args) -> int:
    config = resolve_config(args.config, args.seed)
    out_dir = _out_dir(args, "evaluate")
    dataset = load_dataset(_require(args.data, "dataset directory"))
    model = Seq2SeqModel.load(_require(args.checkpoint, "model checkpoint"))
    mode = args.mode if args.mode != "auto" else _student_eval_mode(config)
    report = evaluate(model, dataset.split(args.split), dataset.vocab,
                      mode=mode, dataset_id=dataset.task,
                      model_id=Path(args.checkpoint).stem,
                      record_rationales=args.record_rationales)
    fingerprint = _write_run_metadata(out_dir, config,
                                      {"checkpoint": args.checkpoint})
    report.save(out_dir / f"eval_{args.split}.jsonl", fingerprint=fingerprint)
    print(f"{args.split} accuracy: {report.accuracy:.4f}")
    return 0


def _parse_k_range(spec: str) -> list[int]:
    try:
        if ".." in spec:
            lo, hi = spec.split("..", 1)
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [int(v) for v in spec.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --k-range value: {spec!r}") from exc
    if not values or any(v < 0 for v in values):
        raise ConfigError(f"bad --k-range value: {spec!r}")
    return values


def _require_flag(value, flag: str):
    if value is None:
        raise ConfigError(f"analyze kind requires the {flag} flag")
    return value


def cmd_analyze(args) -> int:
    config = resolve_config(args.config, args.seed)
    out_dir = _out_dir(args, f"analyze_{args.kind}")
    fingerprint = config_fingerprint(config)
    seeds = list(range(int(args.seeds)))

    if args.kind in ("ksweep", "control"):
        dataset = load_dataset(_require(_require_flag(args.data, "--data"),
                                        "dataset directory"))
        teacher_path = _require(_require_flag(args.teacher, "--teacher"),
                                "teacher checkpoint")
        _check_fingerprint(fingerprint, teacher_path.parent, args.force)
        teacher = Seq2SeqModel.load(teacher_path)
        student_cfg = _model_config(config["student"], len(dataset.vocab),
                                    _derived_seed(config, SEED_STUDENT))
        train_cfg = _train_config(config["student_train"],
                                  _derived_seed(config, SEED_STUDENT_TRAIN))
        method = config["attribution"]["method"]
        if args.kind == "ksweep":
            k_values = _parse_k_range(args.k_range)
            results = k_sweep(teacher, dataset, student_cfg, train_cfg,
                              k_values, seeds, method=method)
            _write_run_metadata(out_dir, config, {"teacher": teacher_path})
            write_jsonl(out_dir / "ksweep_report.jsonl",
                        [{**row, "config_fingerprint": fingerprint}
                         for row in results])
            write_sweep_curve(out_dir / "ksweep_curve.tsv", results)
            print(f"wrote sweep over k={k_values} to {out_dir}")
            return 0
        result = control_comparison(teacher, dataset, student_cfg, train_cfg,
                                    seeds, method=method)
        _write_run_metadata(out_dir, config, {"teacher": teacher_path})
        metrics = [{"metric": f"accuracy_{cond}",
                    "value": result["conditions"][cond]["mean_accuracy"],
                    "numerator": None, "denominator": None,
                    "seeds": seeds}
                   for cond in result["conditions"]]
        write_metric_report(out_dir / "control_report.jsonl", metrics,
                            fingerprint, seeds)
        write_jsonl(out_dir / "control_detail.jsonl",
                    [{"condition": c, **result["conditions"][c]}
                     for c in result["conditions"]])
        print(f"condition ordering: {' >= '.join(result['ordering'])}")
        return 0

    if args.kind == "overlap":
        dataset = load_dataset(_require(_require_flag(args.data, "--data"),
                                        "dataset directory"))
        rationale_path = _require(_require_flag(args.rationales, "--rationales"),
                                  "rationale dataset")
        _check_fingerprint(fingerprint, rationale_path.parent, args.force)
        rationales = load_rationale_dataset(rationale_path, dataset.vocab)
        report = overlap_with_truth(rationales)
        _write_run_metadata(out_dir, config, {"rationales": rationale_path})
        metrics = []
        for name, rate, counts in (
                ("answer_overlap_rate", report.answer_overlap_rate,
                 report.answer_counts),
                ("planted_overlap_rate", report.planted_overlap_rate,
                 report.planted_counts)):
            metrics.append({"metric": name, "value": rate,
                            "numerator": counts[0], "denominator": counts[1]})
        write_metric_report(out_dir / "overlap_report.jsonl", metrics,
                            fingerprint)
        print(f"planted overlap: {report.planted_overlap_rate}, "
              f"answer overlap: {report.answer_overlap_rate}")
        return 0

    # similarity
    report_a = EvalReport.load(_require(_require_flag(args.report_a,
                                                      "--report-a"),
                                        "first eval report"))
    report_b = EvalReport.load(_require(_require_flag(args.report_b,
                                                      "--report-b"),
                                        "second eval report"))
    sim = prediction_similarity(report_a, report_b)
    _write_run_metadata(out_dir, config, {"report_a": args.report_a,
                                          "report_b": args.report_b})
    metrics = [
        {"metric": "correct_overlap", "value": sim.correct_overlap,
         "numerator": sim.correct_counts[0],
         "denominator": sim.correct_counts[1]},
        {"metric": "incorrect_overlap", "value": sim.incorrect_overlap,
         "numerator": sim.incorrect_counts[0],
         "denominator": sim.incorrect_counts[1]},
    ]
    write_metric_report(out_dir / "similarity_report.jsonl", metrics,
                        fingerprint)
    print(f"correct overlap: {sim.correct_overlap}, "
          f"incorrect overlap: {sim.incorrect_overlap}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(parser):
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, help="top-level seed override")
    parser.add_argument("--out", help=f"output directory (default "
                                      f"${OUTPUT_ROOT_ENV}/<command>)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graddistill",
                     description="Attribution-guided knowledge distillation "
                                 "pipeline for tiny seq2seq models.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-teacher", help="train the teacher model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("extract", help="extract teacher rationales")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-student", help="train the student model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--rationales", required=True, help="rationale dataset file")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--split", default="test",
                   choices=["train", "validation", "test"])
    p.add_argument("--mode", default="auto",
                   choices=["auto", "plain", "dual", "concatenated"])
    p.add_argument("--record-rationales", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="run an analysis")
    _add_common(p)
    p.add_argument("--kind", required=True,
                   choices=["ksweep", "control", "overlap", "similarity"])
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--rationales", help="rationale dataset file")
    p.add_argument("--report-a", help="first eval report (similarity)")
    p.add_argument("--report-b", help="second eval report (similarity)")
    p.add_argument("--k-range", default="0..10",
                   help="sweep range A..B or comma list")
    p.add_argument("--seeds", type=int, default=5,
                   help="number of seeds per condition")
    p.add_argument("--force", action="store_true",
                   help="ignore config fingerprint mismatches")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except GradDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
