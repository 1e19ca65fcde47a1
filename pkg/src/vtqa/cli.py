"""Command-line entry points for the full pipeline.

Exit codes: 0 on success, 2 on configuration or data errors, 3 on a
numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .association import AssociationConfig, aggregate_reports, associate, score_tracking
from .corpus import CorpusConfig, CorpusFormatError, generate_corpus, load_corpus_config, read_corpus, write_corpus
from .harness import (
    NumericalError,
    PipelineContext,
    RunConfig,
    ablate,
    evaluate_trace,
    load_gather_checkpoint,
    load_run_config,
    load_trace_checkpoint,
    read_report,
    run_pipeline,
    save_checkpoint,
    train_trace_model,
    write_report,
)
from .kvconfig import ConfigError, write_kv_file
from .metrics import EvalRecord, score_records

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_run_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig().normalized()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed).normalized()
    config.validate()
    return config


def cmd_gen_data(args) -> int:
    config = load_corpus_config(args.config) if args.config else CorpusConfig()
    config.validate()
    seed = args.seed if args.seed is not None else config.seed
    samples = generate_corpus(config, args.num, base_seed=seed)
    write_corpus(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_track(args) -> int:
    samples = read_corpus(args.corpus)
    config = AssociationConfig(iou_threshold=args.iou_threshold, max_frame_gap=args.max_frame_gap)
    config.validate()
    reports = []
    for sample in samples:
        tracks = associate(sample.entities_by_frame(), config)
        reports.append(score_tracking(tracks, sample.instances, config))
    pooled = aggregate_reports(reports)
    out = {k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in pooled.to_dict().items()}
    write_kv_file(args.report, out)
    for key, value in out.items():
        print(f"{key} = {value}")
    return EXIT_OK


def cmd_train_gather(args) -> int:
    config = _load_run_config(args)
    samples = read_corpus(args.corpus)
    context = PipelineContext(config, samples)
    model = context.gather_model()
    exact = context.gather_exact_match("learned")
    save_checkpoint(args.out, "gather", model.config.to_dict(), model, extra={"exact_match_test": exact})
    print(f"gather checkpoint written to {args.out} (test exact match {exact:.4f})")
    return EXIT_OK


def cmd_eval_gather(args) -> int:
    model = load_gather_checkpoint(args.ckpt)
    samples = read_corpus(args.corpus)
    # The corpus itself comes from the file; the nominal corpus config only
    # has to be consistent with the checkpoint to pass validation.
    corpus_cfg = replace(
        CorpusConfig(),
        visual_dim=model.config.visual_dim,
        text_len_min=1,
        text_len_max=min(CorpusConfig().text_len_max, model.config.max_text_len),
    )
    config = RunConfig(gather=model.config, corpus=corpus_cfg).normalized()
    context = PipelineContext(config, samples)
    context.set_gather_model(model)
    texts = context.texts("learned")
    with open(args.out, "w", encoding="utf-8") as fh:
        for sample in samples:
            for slot, text in enumerate(texts[sample.id]):
                record = {
                    "sample_id": sample.id,
                    "slot": slot,
                    "prediction": text,
                    "canonical": context.canonicals[sample.id][slot],
                }
                fh.write(json.dumps(record) + "\n")
    exact = context.gather_exact_match("learned")
    print(f"wrote per-instance predictions to {args.out} (test exact match {exact:.4f})")
    return EXIT_OK


def _resolve_gather_source(args, config: RunConfig, context: PipelineContext) -> str:
    spec = args.gather_ckpt
    if spec in ("oracle", "random", "max"):
        return spec
    context.set_gather_model(load_gather_checkpoint(spec))
    return "learned"


def cmd_train_trace(args) -> int:
    config = _load_run_config(args)
    samples = read_corpus(args.corpus)
    context = PipelineContext(config, samples)
    source = _resolve_gather_source(args, config, context)
    config = replace(config, gather_source=source).normalized()
    model, _ = train_trace_model(context, config)
    save_checkpoint(args.out, "trace", model.config.to_dict(), model, extra={"gather_source": source})
    print(f"trace checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval_trace(args) -> int:
    model, extra = load_trace_checkpoint(args.ckpt)
    samples = read_corpus(args.corpus)
    config = RunConfig(trace=model.config, trace_bias=model.config.bias_mode)
    source = extra.get("gather_source", "oracle")
    config = replace(config, gather_source=source).normalized()
    context = PipelineContext(config, samples)
    if source == "learned":
        if not args.gather_ckpt:
            raise ConfigError("checkpoint was trained with learned gathering; pass --gather-ckpt")
        context.set_gather_model(load_gather_checkpoint(args.gather_ckpt))
    _, _, rows = evaluate_trace(context, model, config)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {len(rows)} predictions to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(wanted) - {"acc", "anls"}
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}; available: acc, anls")
    samples = read_corpus(args.corpus)
    references = {}
    for sample in samples:
        for qi, qa in enumerate(sample.qa):
            references[f"{sample.id}:{qi}"] = list(qa.answers)
    records = []
    with open(args.pred, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                qid = str(row["question_id"])
                prediction = str(row["prediction"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise CorpusFormatError(f"line {lineno}: bad prediction record: {exc}") from exc
            if qid not in references:
                raise ConfigError(f"prediction for unknown question id {qid!r}")
            records.append(EvalRecord(question_id=qid, prediction=prediction, references=references[qid]))
    if not records:
        raise ConfigError("no predictions to score")
    scores = score_records(records)
    out = {}
    if "acc" in wanted:
        out["accuracy"] = f"{scores['accuracy']:.4f}"
    if "anls" in wanted:
        out["anls"] = f"{scores['anls']:.4f}"
    for key, value in out.items():
        print(f"{key} = {value}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load_run_config(args)
    report = run_pipeline(config)
    kv = report.to_kv()
    if args.out:
        write_report(kv, args.out)
    for key, value in kv.items():
        print(f"{key} = {value}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_run_config(args)
    result = ablate(config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for label, report in result.rows:
        write_report(report.to_kv(), out_dir / f"row_{label}.txt")
    table = result.table()
    (out_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_report(args) -> int:
    reports = [read_report(path) for path in args.run]
    hashes = {r.get("config_hash", "?") for r in reports}
    if len(hashes) > 1:
        raise ConfigError(
            f"refusing to compare reports with different config hashes: {sorted(hashes)}"
        )
    for path, report in zip(args.run, reports):
        print(f"# {path}")
        for key, value in report.items():
            print(f"{key} = {value}")
        print()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", type=Path, default=None, help="corpus config (flat key-value)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("track", help="run the tracker and score it against ground truth")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--max-frame-gap", type=int, default=1)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train-gather", help="train the instance-gathering model")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None, help="run config (flat key-value)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_gather)

    p = sub.add_parser("eval-gather", help="emit per-instance transcriptions")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval_gather)

    p = sub.add_parser("train-trace", help="train the question-answering model")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--gather-ckpt", required=True,
                   help="gathering checkpoint path, or one of: oracle, random, max")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_trace)

    p = sub.add_parser("eval-trace", help="emit per-question predictions")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--gather-ckpt", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval_trace)

    p = sub.add_parser("score", help="score a prediction file against a corpus")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--metrics", default="acc,anls")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("run", help="run the full pipeline once")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the five-row ablation")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="print (and compare) run reports")
    p.add_argument("--run", type=Path, nargs="+", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s [%(levelname)s] %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
