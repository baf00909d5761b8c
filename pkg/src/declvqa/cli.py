"""Command line entry points for dataset building, training and evaluation."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import declaration as decl
from .dpt import FinetuneConfig, Paradigm, finetune
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .harness import (
    ExperimentConfig,
    Report,
    breakdown,
    evaluate,
    exact_accuracy,
    load_records,
    make_samples,
    render_report,
    run_experiment,
)
from .pretrain import PretrainConfig, pretrain
from .world import WorldConfig, build_dataset, load_dataset, save_dataset


def _cmd_build_dataset(args) -> int:
    cfg = WorldConfig.from_dict(json.load(open(args.world))) if args.world else WorldConfig(seed=args.seed)
    sizes = {"train": args.train, "val": args.val, "test": args.test}
    ds = build_dataset(cfg, sizes)
    save_dataset(ds, args.out)
    print(f"wrote {sum(len(v) for v in ds.records.values())} records to {args.out}")
    return 0


def _cmd_build_declarations(args) -> int:
    triples = []
    with open(args.annotations, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            triples.append(decl.AnnotationTriple(row["question"], row["answer"], row["full_answer"]))
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, triple in enumerate(triples):
            pair = decl.mask_full_answer(triple)
            fh.write(
                json.dumps(
                    {"question_id": f"{i:06d}", "question": pair.question, "declaration": pair.declaration},
                    sort_keys=True,
                )
                + "\n"
            )
    print(f"wrote {len(triples)} declaration pairs to {args.out}")
    return 0


def _cmd_fit_converter(args) -> int:
    pairs = []
    with open(args.pairs, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                pairs.append(decl.DeclarationPair(row["question"], row["declaration"]))
    model = decl.fit_converter(pairs)
    model.save(args.out)
    print(f"induced {len(model.rules)} rules from {len(pairs)} pairs -> {args.out}")
    return 0


def _cmd_convert(args) -> int:
    model = decl.ConverterModel.load(args.converter)
    print(decl.convert(args.question, model))
    return 0


def _cmd_bleu(args) -> int:
    def read(path):
        with open(path, encoding="utf-8") as fh:
            return [line.rstrip("\n") for line in fh if line.strip()]

    score = decl.corpus_bleu(read(args.candidates), read(args.references))
    print(f"{score:.6f}")
    return 0


def _cmd_pretrain(args) -> int:
    ds = load_dataset(args.data)
    pre_cfg = PretrainConfig.from_dict(json.load(open(args.config))) if args.config else PretrainConfig()
    enc_cfg = EncoderConfig.from_dict(json.load(open(args.encoder))) if args.encoder else EncoderConfig()
    log_path = Path(args.out).with_suffix(".log.jsonl")
    pretrain(ds, enc_cfg, pre_cfg, out_path=args.out, log_path=log_path)
    print(f"checkpoint -> {args.out}, loss log -> {log_path}")
    return 0


def _cmd_finetune(args) -> int:
    ds = load_dataset(args.data)
    model = load_checkpoint(args.ckpt)
    paradigm = Paradigm(args.paradigm)
    records = ds.records["train"]
    shots = args.shots
    if shots is not None and shots > 0:
        records = [r for r in records if not (args.exclude_yes_no and r.answer in ("yes", "no"))][:shots]
    samples = make_samples(records, ds.regions, declaration_source="gold")
    cfg = FinetuneConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed, shots=shots, k=args.k)
    tuned, log = finetune(model, samples, paradigm, cfg)
    save_checkpoint(tuned, args.out)
    print(f"fine-tuned {paradigm.value} -> {args.out} ({len(log)} log entries)")
    return 0


def _cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    model = load_checkpoint(args.ckpt)
    converter = decl.ConverterModel.load(args.converter) if args.converter else None
    paradigm = Paradigm(args.paradigm)
    records = ds.records[args.split]
    sink = [] if args.predictions else None
    results = evaluate(model, records, ds.regions, paradigm, converter, k=args.k, prediction_sink=sink)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for rec in results:
                fh.write(rec.to_json() + "\n")
    if args.predictions:
        with open(args.predictions, "w", encoding="utf-8") as fh:
            for row in sink:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"accuracy {exact_accuracy(results):.4f} on {len(results)} {args.split} records")
    return 0


def _cmd_report(args) -> int:
    records = load_records(args.records)
    report = Report()
    paradigms = sorted({r.paradigm for r in records})
    for name in paradigms:
        rows = [r for r in records if r.paradigm == name]
        report.supervised.append(
            {"paradigm": name, "mean": exact_accuracy(rows), "std": 0.0, "per_seed": [exact_accuracy(rows)]}
        )
        for entry in breakdown(rows, "qtype"):
            report.qtype_table.append({"paradigm": name, **entry})
        for entry in breakdown(rows, "length_bucket"):
            report.length_table.append({"paradigm": name, **entry})
    paths = render_report(report, args.out)
    print("\n".join(str(p) for p in paths))
    return 0


def _cmd_run_experiment(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        cfg = ExperimentConfig.from_dict(json.load(fh))
    result = run_experiment(cfg, args.out)
    print(f"run complete -> {result.out_dir}")
    for row in result.report.supervised:
        print(f"  {row['paradigm']}: {row['mean']:.4f} +- {row['std']:.4f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="declvqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--world", help="world config JSON (optional)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=3000)
    p.add_argument("--val", type=int, default=300)
    p.add_argument("--test", type=int, default=500)
    p.set_defaults(fn=_cmd_build_dataset)

    p = sub.add_parser("build-declarations", help="mask answers out of annotation triples")
    p.add_argument("--annotations", required=True, help="JSONL with question/answer/full_answer")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_build_declarations)

    p = sub.add_parser("fit-converter", help="induce question->declaration rules")
    p.add_argument("--pairs", required=True, help="JSONL with question/declaration")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_fit_converter)

    p = sub.add_parser("convert", help="convert one question to a declaration")
    p.add_argument("--converter", required=True)
    p.add_argument("question")
    p.set_defaults(fn=_cmd_convert)

    p = sub.add_parser("bleu", help="corpus BLEU between two line files")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.set_defaults(fn=_cmd_bleu)

    p = sub.add_parser("pretrain", help="pre-train the encoder on scene captions")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="pretrain config JSON")
    p.add_argument("--encoder", help="encoder config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint under one paradigm")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--paradigm", required=True, choices=[m.value for m in Paradigm])
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--exclude-yes-no", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--paradigm", required=True, choices=[m.value for m in Paradigm])
    p.add_argument("--converter")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--out", help="result records JSONL")
    p.add_argument("--predictions", help="raw prediction JSONL (answer, p1, p2, fused)")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("report", help="rebuild report tables from stored records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("run-experiment", help="run a full experiment from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_run_experiment)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
