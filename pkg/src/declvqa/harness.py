"""Evaluation, experiment protocols and reporting.

A run directory is fully reproducible from its ``config.json``: dataset
generation, pre-training, every fine-tuning run and every evaluation are
seeded, and all reported tables are derivable from ``records.jsonl`` alone.
The few-shot protocol mirrors the usual drill: for each shot count, several
seeded draws of training samples (yes/no answers excluded when configured),
one fine-tuning run per paradigm per draw, mean and standard deviation over
the draws.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import declaration as decl
from .dpt import (
    FinetuneConfig,
    Paradigm,
    Prediction,
    VQASample,
    finetune,
    predict_batch,
)
from .encoder import EncoderConfig, VLEncoder, load_checkpoint
from .pretrain import (
    PretrainConfig,
    build_caption_records,
    itm_holdout_accuracy,
    masked_recovery,
    pretrain,
)
from .text import tokenize_text
from .world import (
    DatasetSplits,
    QARecord,
    WorldConfig,
    build_dataset,
    save_dataset,
    subrng,
)

FULL_SUPERVISION = -1  # sentinel for ResultRecord.shots outside the few-shot protocol


def soft_accuracy(predicted: str, human_counts: dict[str, int]) -> float:
    """min(votes for the predicted answer / 3, 1); missing answers count zero."""
    return min(human_counts.get(predicted, 0) / 3.0, 1.0)


@dataclass
class ResultRecord:
    question_id: str
    qtype: str
    question_length: int
    gold: str
    predicted: str
    correct: bool
    soft_acc: float
    paradigm: str
    shots: int
    split_index: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ResultRecord":
        return cls(**json.loads(line))


def exact_accuracy(records: Sequence[ResultRecord]) -> float:
    return sum(r.correct for r in records) / len(records)


def mean_soft_accuracy(records: Sequence[ResultRecord]) -> float:
    return sum(r.soft_acc for r in records) / len(records)


def make_samples(
    records: Sequence[QARecord],
    regions: dict[str, np.ndarray],
    converter: decl.ConverterModel | None = None,
    declaration_source: str = "converted",
) -> list[VQASample]:
    """Attach declarations and region features to QA records.

    ``declaration_source`` is "converted" (question through the converter,
    the test-time path) or "gold" (masked full answer, the training path).
    """
    samples = []
    for rec in records:
        if declaration_source == "gold":
            d = decl.mask_full_answer(decl.AnnotationTriple(rec.question, rec.answer, rec.full_answer)).declaration
        elif converter is not None:
            d = decl.convert(rec.question, converter)
        else:
            d = None
        samples.append(VQASample(record=rec, declaration=d, regions=regions[rec.scene_id]))
    return samples


def records_from_predictions(
    records: Sequence[QARecord],
    predictions: Sequence[Prediction],
    paradigm: str,
    shots: int = FULL_SUPERVISION,
    split_index: int = 0,
) -> list[ResultRecord]:
    out = []
    for rec, pred in zip(records, predictions):
        out.append(
            ResultRecord(
                question_id=rec.question_id,
                qtype=rec.qtype,
                question_length=len(tokenize_text(rec.question)),
                gold=rec.answer,
                predicted=pred.answer,
                correct=pred.answer == rec.answer,
                soft_acc=soft_accuracy(pred.answer, rec.human_counts),
                paradigm=paradigm,
                shots=shots,
                split_index=split_index,
            )
        )
    return out


def evaluate(
    model: VLEncoder,
    records: Sequence[QARecord],
    regions: dict[str, np.ndarray],
    paradigm: Paradigm,
    converter: decl.ConverterModel | None = None,
    k: int = 8,
    shots: int = FULL_SUPERVISION,
    split_index: int = 0,
    batch_size: int = 64,
    paradigm_label: str | None = None,
    prediction_sink: list | None = None,
) -> list[ResultRecord]:
    """One ResultRecord per question, deterministic given model and split.

    ``prediction_sink``, when given, receives one {question_id, answer, p1,
    p2, fused} dict per question for raw-prediction dumps.
    """
    gold_answers = {r.answer for r in records}
    unknown = gold_answers - set(model.vocab.answers)
    if unknown:
        raise RuntimeError(f"answer vocabulary mismatch between model and split: {sorted(unknown)}")
    samples = make_samples(records, regions, converter)
    preds = predict_batch(model, samples, paradigm, k=k, batch_size=batch_size)
    if prediction_sink is not None:
        for rec, pred in zip(records, preds):
            prediction_sink.append(
                {
                    "question_id": rec.question_id,
                    "answer": pred.answer,
                    "p1": pred.p1,
                    "p2": pred.p2,
                    "fused": pred.fused,
                }
            )
    return records_from_predictions(records, preds, paradigm_label or paradigm.value, shots, split_index)


def breakdown(records: Sequence[ResultRecord], axis: str = "qtype", bucket_width: int = 3) -> list[dict]:
    """Accuracy per group along 'qtype' or 'length_bucket', with group sizes."""
    if not records:
        raise ValueError("breakdown needs at least one record")
    groups: dict[str, list[ResultRecord]] = {}
    for r in records:
        if axis == "qtype":
            key = r.qtype
        elif axis == "length_bucket":
            lo = (r.question_length // bucket_width) * bucket_width
            key = f"{lo}-{lo + bucket_width - 1}"
        else:
            raise ValueError(f"unknown breakdown axis: {axis}")
        groups.setdefault(key, []).append(r)
    return [
        {"group": key, "n": len(rows), "accuracy": exact_accuracy(rows)}
        for key, rows in sorted(groups.items())
    ]


# -- experiment configuration ---------------------------------------------------


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sizes: dict = field(default_factory=lambda: {"train": 3000, "val": 300, "test": 500})
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    paradigms: list[str] = field(
        default_factory=lambda: ["baseline", "mask", "dynamic", "dpt-mlm", "dpt-full"]
    )
    supervised_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    supervised: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(steps=300, batch_size=32))
    supervised_train_size: int | None = None

    shot_schedule: list[int] = field(default_factory=lambda: [0, 1, 4, 16, 32, 64, 128])
    n_splits: int = 5
    exclude_yes_no: bool = True
    fewshot_paradigms: list[str] = field(default_factory=lambda: ["baseline", "dpt-full"])
    fewshot: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(steps=60, batch_size=16, lr=1e-4))
    fewshot_eval_size: int | None = 300

    k: int = 8
    k_schedule: list[int] = field(default_factory=lambda: [0, 1, 2, 4, 8, 16])
    eval_batch_size: int = 64
    torch_threads: int = 1

    run_supervised: bool = True
    run_few_shot: bool = True
    run_k_sweep: bool = True

    def validate(self) -> None:
        self.world.validate()
        if sorted(self.shot_schedule) != list(self.shot_schedule):
            raise ValueError("shot_schedule must be sorted ascending")
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "sizes": dict(self.sizes),
            "encoder": self.encoder.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "paradigms": list(self.paradigms),
            "supervised_seeds": list(self.supervised_seeds),
            "supervised": self.supervised.to_dict(),
            "supervised_train_size": self.supervised_train_size,
            "shot_schedule": list(self.shot_schedule),
            "n_splits": self.n_splits,
            "exclude_yes_no": self.exclude_yes_no,
            "fewshot_paradigms": list(self.fewshot_paradigms),
            "fewshot": self.fewshot.to_dict(),
            "fewshot_eval_size": self.fewshot_eval_size,
            "k": self.k,
            "k_schedule": list(self.k_schedule),
            "eval_batch_size": self.eval_batch_size,
            "torch_threads": self.torch_threads,
            "run_supervised": self.run_supervised,
            "run_few_shot": self.run_few_shot,
            "run_k_sweep": self.run_k_sweep,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["world"] = WorldConfig.from_dict(d["world"])
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        d["pretrain"] = PretrainConfig.from_dict(d["pretrain"])
        d["supervised"] = FinetuneConfig.from_dict(d["supervised"])
        d["fewshot"] = FinetuneConfig.from_dict(d["fewshot"])
        return cls(**d)


@dataclass
class Report:
    bleu: float = 0.0
    pretrain_health: dict = field(default_factory=dict)
    supervised: list[dict] = field(default_factory=list)      # paradigm, mean, std, per_seed
    qtype_table: list[dict] = field(default_factory=list)     # paradigm, group, n, accuracy
    length_table: list[dict] = field(default_factory=list)
    few_shot: list[dict] = field(default_factory=list)        # paradigm, shots, mean, std, delta_vs_baseline
    k_sweep: list[dict] = field(default_factory=list)         # k, accuracy
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "pretrain_health": self.pretrain_health,
            "supervised": self.supervised,
            "qtype_table": self.qtype_table,
            "length_table": self.length_table,
            "few_shot": self.few_shot,
            "k_sweep": self.k_sweep,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(**d)


# -- protocols ------------------------------------------------------------------


def _non_yes_no(records: Sequence[QARecord]) -> list[QARecord]:
    return [r for r in records if r.answer not in ("yes", "no")]


def few_shot_protocol(
    checkpoint: VLEncoder,
    ds: DatasetSplits,
    converter: decl.ConverterModel,
    cfg: ExperimentConfig,
) -> tuple[list[ResultRecord], list[dict]]:
    """Fine-tune and evaluate every (paradigm, shot count, split) cell."""
    pool = ds.records["train"]
    eval_records = ds.records["test"]
    if cfg.exclude_yes_no:
        pool = _non_yes_no(pool)
        eval_records = _non_yes_no(eval_records)
    if cfg.fewshot_eval_size is not None and len(eval_records) > cfg.fewshot_eval_size:
        keep = subrng(cfg.world.seed, 901).choice(len(eval_records), cfg.fewshot_eval_size, replace=False)
        eval_records = [eval_records[i] for i in sorted(keep)]

    all_records: list[ResultRecord] = []
    rows: list[dict] = []
    accs: dict[tuple[str, int], list[float]] = {}
    for n in cfg.shot_schedule:
        if n > len(pool):
            raise ValueError(f"shot count {n} exceeds the available pool of {len(pool)} samples")
        for split_index in range(cfg.n_splits):
            draw = subrng(cfg.world.seed, 902, n, split_index)
            idx = sorted(draw.choice(len(pool), size=n, replace=False)) if n > 0 else []
            shot_records = [pool[i] for i in idx]
            assert all(r.answer not in ("yes", "no") for r in shot_records) or not cfg.exclude_yes_no
            train_samples = make_samples(shot_records, ds.regions, declaration_source="gold")
            # Few samples warrant few steps: cheaper, and gentler on the
            # zero-shot initialization than a full optimization budget.
            steps = min(cfg.fewshot.steps, max(10, 4 * n))
            for name in cfg.fewshot_paradigms:
                paradigm = Paradigm(name)
                ft_cfg = replace(cfg.fewshot, shots=n, seed=split_index, k=cfg.k, steps=steps)
                model, _ = finetune(checkpoint, train_samples, paradigm, ft_cfg)
                recs = evaluate(
                    model,
                    eval_records,
                    ds.regions,
                    paradigm,
                    converter,
                    k=cfg.k,
                    shots=n,
                    split_index=split_index,
                    batch_size=cfg.eval_batch_size,
                )
                all_records.extend(recs)
                accs.setdefault((name, n), []).append(exact_accuracy(recs))

    baseline_means = {
        n: float(np.mean(accs[("baseline", n)]))
        for n in cfg.shot_schedule
        if ("baseline", n) in accs
    }
    for name in cfg.fewshot_paradigms:
        for n in cfg.shot_schedule:
            values = accs[(name, n)]
            mean = float(np.mean(values))
            rows.append(
                {
                    "paradigm": name,
                    "shots": n,
                    "mean": mean,
                    "std": float(np.std(values)),
                    "delta_vs_baseline": mean - baseline_means.get(n, 0.0),
                }
            )
    return all_records, rows


def k_sweep(
    model: VLEncoder,
    records: Sequence[QARecord],
    regions: dict[str, np.ndarray],
    converter: decl.ConverterModel,
    ks: Sequence[int] = (0, 1, 2, 4, 8, 16),
    batch_size: int = 64,
) -> tuple[list[ResultRecord], list[dict]]:
    """Accuracy per candidate count on a dpt-full fine-tuned model; k=0 is cloze-only."""
    all_records: list[ResultRecord] = []
    rows = []
    for k in ks:
        recs = evaluate(
            model,
            records,
            regions,
            Paradigm.DPT_MLM_ITM,
            converter,
            k=k,
            batch_size=batch_size,
            paradigm_label=f"dpt-full[k={k}]",
        )
        all_records.extend(recs)
        rows.append({"k": int(k), "accuracy": exact_accuracy(recs)})
    return all_records, rows


# -- reporting --------------------------------------------------------------------


def _md_table(headers: list[str], rows: list[list]) -> str:
    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join(["---"] * len(headers)) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(str(v) for v in row) + " |")
    return "\n".join(lines)


def render_report(report: Report, out_dir: str | Path, formats: Sequence[str] = ("markdown", "json", "png-plots")) -> list[Path]:
    """Write the report as markdown, JSON and/or plots; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if "json" in formats:
        path = out / "report.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        written.append(path)

    if "markdown" in formats:
        parts = ["# Experiment report", ""]
        parts.append(f"Converter held-out BLEU: {report.bleu:.4f}")
        if report.pretrain_health:
            parts.append(
                "Pre-training health: itm_acc="
                f"{report.pretrain_health.get('itm_holdout_acc', float('nan')):.4f}, "
                f"masked_recovery={report.pretrain_health.get('masked_recovery', float('nan')):.4f}"
            )
        if report.supervised:
            parts += ["", "## Supervised accuracy", ""]
            parts.append(
                _md_table(
                    ["paradigm", "mean", "std"],
                    [[r["paradigm"], f"{r['mean']:.4f}", f"{r['std']:.4f}"] for r in report.supervised],
                )
            )
        if report.qtype_table:
            parts += ["", "## Accuracy by question type", ""]
            parts.append(
                _md_table(
                    ["paradigm", "group", "n", "accuracy"],
                    [[r["paradigm"], r["group"], r["n"], f"{r['accuracy']:.4f}"] for r in report.qtype_table],
                )
            )
        if report.length_table:
            parts += ["", "## Accuracy by question length", ""]
            parts.append(
                _md_table(
                    ["paradigm", "group", "n", "accuracy"],
                    [[r["paradigm"], r["group"], r["n"], f"{r['accuracy']:.4f}"] for r in report.length_table],
                )
            )
        if report.few_shot:
            parts += ["", "## Few-shot accuracy (mean over splits)", ""]
            parts.append(
                _md_table(
                    ["paradigm", "shots", "mean", "std", "delta_vs_baseline"],
                    [
                        [r["paradigm"], r["shots"], f"{r['mean']:.4f}", f"{r['std']:.4f}", f"{r['delta_vs_baseline']:+.4f}"]
                        for r in report.few_shot
                    ],
                )
            )
        if report.k_sweep:
            parts += ["", "## Candidate-count sweep", ""]
            parts.append(_md_table(["k", "accuracy"], [[r["k"], f"{r['accuracy']:.4f}"] for r in report.k_sweep]))
        if report.notes:
            parts += ["", "## Notes", ""] + [f"- {n}" for n in report.notes]
        path = out / "report.md"
        path.write_text("\n".join(parts) + "\n", encoding="utf-8")
        written.append(path)

    if "png-plots" in formats:
        written.extend(_render_plots(report, out / "plots"))
    return written


def _render_plots(report: Report, plot_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if report.few_shot:
        fig, ax = plt.subplots(figsize=(6, 4))
        paradigms = sorted({r["paradigm"] for r in report.few_shot})
        for name in paradigms:
            rows = sorted((r for r in report.few_shot if r["paradigm"] == name), key=lambda r: r["shots"])
            xs = [r["shots"] for r in rows]
            ys = [r["mean"] for r in rows]
            err = [r["std"] for r in rows]
            ax.errorbar(xs, ys, yerr=err, marker="o", capsize=3, label=name)
        ax.set_xlabel("training samples")
        ax.set_ylabel("accuracy")
        ax.set_xscale("symlog", linthresh=1)
        ax.legend()
        ax.set_title("Zero/few-shot accuracy")
        fig.tight_layout()
        path = plot_dir / "few_shot_accuracy.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    for table, fname, title in (
        (report.qtype_table, "qtype_breakdown.png", "Accuracy by question type"),
        (report.length_table, "length_breakdown.png", "Accuracy by question length"),
    ):
        if not table:
            continue
        fig, ax = plt.subplots(figsize=(7, 4))
        paradigms = sorted({r["paradigm"] for r in table})
        groups = sorted({r["group"] for r in table})
        width = 0.8 / max(1, len(paradigms))
        for i, name in enumerate(paradigms):
            acc = {r["group"]: r["accuracy"] for r in table if r["paradigm"] == name}
            xs = [j + i * width for j in range(len(groups))]
            ax.bar(xs, [acc.get(g, 0.0) for g in groups], width=width, label=name)
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(groups))])
        ax.set_xticklabels(groups, rotation=20)
        ax.set_ylabel("accuracy")
        ax.set_title(title)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = plot_dir / fname
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    if report.k_sweep:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        rows = sorted(report.k_sweep, key=lambda r: r["k"])
        ax.plot([r["k"] for r in rows], [r["accuracy"] for r in rows], marker="s")
        ax.set_xlabel("candidate count k")
        ax.set_ylabel("accuracy")
        ax.set_title("Candidate-count sweep")
        fig.tight_layout()
        path = plot_dir / "k_sweep.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


# -- the full experiment ----------------------------------------------------------


@dataclass
class RunResult:
    config: ExperimentConfig
    report: Report
    records: list[ResultRecord]
    out_dir: Path
    checkpoint_path: Path
    supervised_models: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> RunResult:
    """Execute the configured experiment and persist all artifacts."""
    cfg.validate()
    torch.set_num_threads(cfg.torch_threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")

    ds = build_dataset(cfg.world, cfg.sizes)
    save_dataset(ds, out / "data")

    # Converter: fit on train annotations, score on held-out declarations.
    train_pairs = decl.build_declaration_pairs(decl.triples_from_records(ds.records["train"]))
    converter = decl.fit_converter(train_pairs)
    converter.save(out / "converter.json")
    val_triples = decl.triples_from_records(ds.records["val"])
    val_refs = [decl.mask_full_answer(t).declaration for t in val_triples]
    val_hyps = [decl.convert(t.question, converter) for t in val_triples]
    bleu = decl.corpus_bleu(val_hyps, val_refs)

    model, _ = pretrain(
        ds, cfg.encoder, cfg.pretrain, out_path=out / "pretrain.ckpt.bin", log_path=out / "pretrain_log.jsonl"
    )
    val_captions = build_caption_records(
        ds, "val", cfg.pretrain.statements_per_caption, cfg.encoder.max_text_len, seed=cfg.pretrain.seed
    )
    health = {
        "itm_holdout_acc": itm_holdout_accuracy(model, val_captions, ds.regions, seed=cfg.pretrain.seed),
        "masked_recovery": masked_recovery(model, val_captions, ds.regions, seed=cfg.pretrain.seed),
    }

    report = Report(bleu=bleu, pretrain_health=health)
    report.notes.append(
        "Question-type breakdown uses the five synthetic templates; there is no analogue "
        "of a global/holistic semantic type in this world."
    )
    all_records: list[ResultRecord] = []
    supervised_models: dict[tuple[str, int], VLEncoder] = {}

    if cfg.run_supervised:
        train_records = ds.records["train"]
        if cfg.supervised_train_size is not None and len(train_records) > cfg.supervised_train_size:
            keep = subrng(cfg.world.seed, 903).choice(
                len(train_records), cfg.supervised_train_size, replace=False
            )
            train_records = [train_records[i] for i in sorted(keep)]
        train_samples = make_samples(train_records, ds.regions, declaration_source="gold")
        acc_by_paradigm: dict[str, list[float]] = {}
        for seed in cfg.supervised_seeds:
            for name in cfg.paradigms:
                paradigm = Paradigm(name)
                ft_cfg = replace(cfg.supervised, seed=seed, shots=None, k=cfg.k)
                tuned, _ = finetune(model, train_samples, paradigm, ft_cfg)
                recs = evaluate(
                    tuned,
                    ds.records["test"],
                    ds.regions,
                    paradigm,
                    converter,
                    k=cfg.k,
                    shots=FULL_SUPERVISION,
                    split_index=seed,
                    batch_size=cfg.eval_batch_size,
                )
                all_records.extend(recs)
                acc_by_paradigm.setdefault(name, []).append(exact_accuracy(recs))
                supervised_models[(name, seed)] = tuned
        for name in cfg.paradigms:
            values = acc_by_paradigm[name]
            report.supervised.append(
                {
                    "paradigm": name,
                    "mean": float(np.mean(values)),
                    "std": float(np.std(values)),
                    "per_seed": [float(v) for v in values],
                }
            )
        supervised_records = [r for r in all_records if r.shots == FULL_SUPERVISION]
        for name in cfg.paradigms:
            rows = [r for r in supervised_records if r.paradigm == name]
            for entry in breakdown(rows, "qtype"):
                report.qtype_table.append({"paradigm": name, **entry})
            for entry in breakdown(rows, "length_bucket"):
                report.length_table.append({"paradigm": name, **entry})

    if cfg.run_few_shot:
        fs_records, fs_rows = few_shot_protocol(model, ds, converter, cfg)
        all_records.extend(fs_records)
        report.few_shot = fs_rows

    if cfg.run_k_sweep:
        sweep_model = supervised_models.get(("dpt-full", cfg.supervised_seeds[0] if cfg.supervised_seeds else 0))
        if sweep_model is None:
            train_samples = make_samples(ds.records["train"], ds.regions, declaration_source="gold")
            sweep_model, _ = finetune(
                model, train_samples, Paradigm.DPT_MLM_ITM, replace(cfg.supervised, seed=0, shots=None, k=cfg.k)
            )
        sweep_records, sweep_rows = k_sweep(
            sweep_model, ds.records["test"], ds.regions, converter, cfg.k_schedule, cfg.eval_batch_size
        )
        all_records.extend(sweep_records)
        report.k_sweep = sweep_rows

    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        for rec in all_records:
            fh.write(rec.to_json() + "\n")
    render_report(report, out)
    return RunResult(
        config=cfg,
        report=report,
        records=all_records,
        out_dir=out,
        checkpoint_path=out / "pretrain.ckpt.bin",
        supervised_models=supervised_models,
    )


def load_records(path: str | Path) -> list[ResultRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ResultRecord.from_json(line) for line in fh if line.strip()]


def reference_config() -> ExperimentConfig:
    """The pinned reference configuration used by the acceptance suite."""
    return ExperimentConfig()
