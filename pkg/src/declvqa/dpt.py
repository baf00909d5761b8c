"""Answer prediction as cloze filling plus candidate verification.

The five fine-tuning paradigms differ only in how the textual input is
formatted and which heads score it:

* baseline: bare question, fresh classifier over [CLS].
* mask: question + "answer : [MASK]", concat head over [CLS]+[MASK].
* dynamic: question + "answer :" + 16 learnable prompt tokens + [MASK].
* dpt-mlm: question + "answer :" + declaration (one [MASK] inside).
* dpt-full: dpt-mlm plus verification of the top-K candidate answers
  substituted into the declaration, fused at prediction time by summing the
  cloze probability and the match probability per candidate.

Zero/few-shot mode rewires scoring through the pre-training heads: answer
scores are the pre-trained vocabulary logits at [MASK] restricted to answer
words, and the match score is the pre-trained matching head on [CLS].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import torch

from .declaration import substitute_answer
from .encoder import (
    MASK_ID,
    BatchInput,
    EncoderConfig,
    VLEncoder,
    Vocabulary,
    collate,
    pack_input,
)
from .pretrain import lr_scale, make_optimizer
from .world import QARecord, subrng

PROB_FLOOR = 1e-12


class Paradigm(str, Enum):
    BASELINE = "baseline"
    MASK_PROMPT = "mask"
    DYNAMIC_PROMPT = "dynamic"
    DPT_MLM = "dpt-mlm"
    DPT_MLM_ITM = "dpt-full"

    @property
    def needs_declaration(self) -> bool:
        return self in (Paradigm.DPT_MLM, Paradigm.DPT_MLM_ITM)

    @property
    def uses_mask(self) -> bool:
        return self is not Paradigm.BASELINE


@dataclass
class VQASample:
    record: QARecord
    declaration: str | None
    regions: np.ndarray


@dataclass(frozen=True)
class PromptMeta:
    """Positions inside the packed sequence: the [MASK], or the answer span."""

    mask_pos: int
    answer_span: tuple[int, int] | None = None


@dataclass
class CandidateSet:
    answers: list[str]
    answer_indices: list[int]
    declarations: list[str]
    p1: list[float]
    k: int


@dataclass
class Prediction:
    answer: str
    p1: dict[str, float]
    p2: dict[str, float] = field(default_factory=dict)
    fused: dict[str, float] = field(default_factory=dict)


def _prompt_text_ids(
    sample: VQASample, paradigm: Paradigm, vocab: Vocabulary, answer: str | None
) -> tuple[list[int], PromptMeta]:
    q_ids = vocab.encode(sample.record.question)
    if paradigm is Paradigm.BASELINE:
        return q_ids, PromptMeta(mask_pos=-1)

    prefix = q_ids + vocab.encode("answer :")
    if paradigm is Paradigm.MASK_PROMPT:
        ids = prefix + [MASK_ID]
        return ids, PromptMeta(mask_pos=1 + len(ids) - 1)
    if paradigm is Paradigm.DYNAMIC_PROMPT:
        from .encoder import DYN_FIRST_ID, N_DYNAMIC

        ids = prefix + list(range(DYN_FIRST_ID, DYN_FIRST_ID + N_DYNAMIC)) + [MASK_ID]
        return ids, PromptMeta(mask_pos=1 + len(ids) - 1)

    declaration = sample.declaration
    if declaration is None:
        raise ValueError(f"paradigm {paradigm.value} requires a declaration for {sample.record.question_id}")
    if declaration.count("[MASK]") != 1:
        raise ValueError(f"declaration must contain exactly one [MASK]: {declaration!r}")
    decl_ids = vocab.encode(declaration)
    mask_idx = decl_ids.index(MASK_ID)
    if answer is None:
        ids = prefix + decl_ids
        return ids, PromptMeta(mask_pos=1 + len(prefix) + mask_idx)
    ans_ids = vocab.encode(answer)
    ids = prefix + decl_ids[:mask_idx] + ans_ids + decl_ids[mask_idx + 1 :]
    start = 1 + len(prefix) + mask_idx
    return ids, PromptMeta(mask_pos=-1, answer_span=(start, start + len(ans_ids)))


def format_prompt(
    sample: VQASample,
    paradigm: Paradigm,
    vocab: Vocabulary,
    cfg: EncoderConfig,
    answer: str | None = None,
) -> tuple[BatchInput, PromptMeta]:
    """Pack one sample for the given paradigm.

    With ``answer`` set (verification inputs), the declaration's [MASK] is
    replaced by the answer tokens and the metadata carries their span.
    """
    ids, meta = _prompt_text_ids(sample, paradigm, vocab, answer)
    return pack_input(ids, sample.regions, cfg), meta


def prompt_text(sample: VQASample, paradigm: Paradigm, answer: str | None = None) -> str:
    """The raw textual input for a paradigm, before tokenization."""
    q = sample.record.question
    if paradigm is Paradigm.BASELINE:
        return q
    if paradigm is Paradigm.MASK_PROMPT:
        return f"{q} answer : [MASK]"
    if paradigm is Paradigm.DYNAMIC_PROMPT:
        from .encoder import dynamic_prompt_tokens

        return f"{q} answer : " + " ".join(dynamic_prompt_tokens()) + " [MASK]"
    declaration = sample.declaration
    if declaration is None:
        raise ValueError("declaration required")
    if answer is not None:
        declaration = substitute_answer(declaration, answer)
    return f"{q} answer : {declaration}"


# -- scoring ------------------------------------------------------------------


def answer_scores(
    hidden: torch.Tensor, mask_pos: torch.Tensor, model: VLEncoder, paradigm: Paradigm
) -> tuple[torch.Tensor, torch.Tensor]:
    """Answer logits and probabilities over the answer set, [B, |C|]."""
    h_cls = hidden[:, 0]
    if paradigm is Paradigm.BASELINE:
        s = model.baseline_cls_head(h_cls)
    else:
        if bool((mask_pos < 0).any()):
            raise RuntimeError(f"paradigm {paradigm.value} requires a [MASK] position in every sample")
        rows = torch.arange(hidden.shape[0], device=hidden.device)
        h_mask = hidden[rows, mask_pos]
        if model.scoring_mode == "pretrained":
            answer_ids = torch.tensor(model.vocab.answer_ids, device=hidden.device)
            s = model.pt_mlm_head(h_mask)[:, answer_ids]
        else:
            s = model.answer_mlm_head(torch.cat([h_cls, h_mask], dim=-1))
    return s, torch.softmax(s, dim=-1)


def match_score(
    hidden: torch.Tensor, spans: Sequence[tuple[int, int]], model: VLEncoder
) -> tuple[torch.Tensor, torch.Tensor]:
    """Match logit and probability per sample from [CLS] plus the answer span."""
    h_cls = hidden[:, 0]
    if model.scoring_mode == "pretrained":
        s = model.pt_itm_head(h_cls).squeeze(-1)
        return s, torch.sigmoid(s)
    pooled = []
    for i, span in enumerate(spans):
        if span is None or span[1] <= span[0]:
            raise RuntimeError("match_score requires a non-empty answer span")
        pooled.append(hidden[i, span[0] : span[1]].mean(dim=0))
    h_ans = torch.stack(pooled)
    s = model.answer_itm_head(torch.cat([h_cls, h_ans], dim=-1)).squeeze(-1)
    return s, torch.sigmoid(s)


def mlm_vqa_loss(p1: torch.Tensor, gt_index: torch.Tensor) -> torch.Tensor:
    """Mean negative log probability of the gold answer."""
    picked = p1.gather(1, gt_index.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def itm_vqa_loss(p2: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy over candidate match probabilities, [B, K].

    Clamped in float64: the 1e-12 floor near 1 is not representable in
    float32 and would turn saturated probabilities into NaN losses.
    """
    p = p2.double().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def dpt_total_loss(mlm_loss: torch.Tensor, itm_loss: torch.Tensor | None = None) -> torch.Tensor:
    return mlm_loss if itm_loss is None else mlm_loss + itm_loss


def top_k(p1: np.ndarray, answers: Sequence[str], k: int, declaration: str) -> CandidateSet:
    """Top-k answers by p1, descending; ties go to the lower vocabulary index."""
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(answers):
        raise ValueError(f"k={k} exceeds the answer set size {len(answers)}")
    p1 = np.asarray(p1, dtype=np.float64)
    order = np.lexsort((np.arange(len(answers)), -p1))[:k]
    chosen = [answers[i] for i in order]
    return CandidateSet(
        answers=chosen,
        answer_indices=[int(i) for i in order],
        declarations=[substitute_answer(declaration, a) for a in chosen],
        p1=[float(p1[i]) for i in order],
        k=k,
    )


def candidate_labels(candidates: CandidateSet, gt_answer: str) -> list[int]:
    return [int(a == gt_answer) for a in candidates.answers]


def predict(
    candidate_set: CandidateSet | None,
    p2: Sequence[float] | None,
    p1_full: dict[str, float],
    answers: Sequence[str],
    renormalize_p1: bool = False,
) -> Prediction:
    """Fuse cloze and match probabilities; without candidates, argmax of p1.

    Ties always resolve to the lower answer-vocabulary index, so the result
    is independent of candidate order.
    """
    if candidate_set is None or p2 is None:
        best = min(range(len(answers)), key=lambda i: (-p1_full[answers[i]], i))
        return Prediction(answer=answers[best], p1=dict(p1_full))
    if not candidate_set.answers:
        raise RuntimeError("empty candidate set")
    if len(p2) != len(candidate_set.answers):
        raise ValueError("p2 not aligned with candidates")
    p1_cand = list(candidate_set.p1)
    if renormalize_p1:
        z = sum(p1_cand)
        p1_cand = [v / z if z > 0 else 1.0 / len(p1_cand) for v in p1_cand]
    fused = [a + b for a, b in zip(p1_cand, p2)]
    order = sorted(
        range(len(fused)), key=lambda j: (-fused[j], candidate_set.answer_indices[j])
    )
    best = order[0]
    return Prediction(
        answer=candidate_set.answers[best],
        p1=dict(p1_full),
        p2={a: float(v) for a, v in zip(candidate_set.answers, p2)},
        fused={a: float(v) for a, v in zip(candidate_set.answers, fused)},
    )


def zero_shot_init(pretrained: VLEncoder, answers: Sequence[str] | None = None) -> VLEncoder:
    """Copy the checkpoint and route scoring through the pre-training heads."""
    vocab = pretrained.vocab
    answers = list(answers) if answers is not None else vocab.answers
    missing = [a for a in answers if a not in vocab.token_to_id]
    if missing:
        raise ValueError(f"answers without a vocabulary token: {missing}")
    model = pretrained.clone()
    model.scoring_mode = "pretrained"
    return model


# -- inference ----------------------------------------------------------------


def _forward_collated(model: VLEncoder, packed: list[BatchInput]) -> torch.Tensor:
    return model(collate(packed), train_mode=False)


def predict_batch(
    model: VLEncoder,
    samples: Sequence[VQASample],
    paradigm: Paradigm,
    k: int = 8,
    batch_size: int = 64,
    renormalize_p1: bool = False,
) -> list[Prediction]:
    """Deterministic predictions for a list of samples.

    ``k=0`` forces cloze-only prediction even under the full paradigm, which
    is what the candidate-count sweep uses.
    """
    answers = model.vocab.answers
    out: list[Prediction] = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = list(samples[start : start + batch_size])
            packed, metas = zip(*(format_prompt(s, paradigm, model.vocab, model.cfg) for s in chunk))
            hidden = _forward_collated(model, list(packed))
            mask_pos = torch.tensor([m.mask_pos for m in metas])
            _, p1 = answer_scores(hidden, mask_pos, model, paradigm)
            p1_np = p1.numpy()

            if paradigm is not Paradigm.DPT_MLM_ITM or k == 0:
                for row in p1_np:
                    p1_full = {a: float(v) for a, v in zip(answers, row)}
                    out.append(predict(None, None, p1_full, answers))
                continue

            cand_sets = [top_k(row, answers, k, s.declaration) for row, s in zip(p1_np, chunk)]
            itm_packed, spans = [], []
            for s, cs in zip(chunk, cand_sets):
                for a in cs.answers:
                    b, m = format_prompt(s, paradigm, model.vocab, model.cfg, answer=a)
                    itm_packed.append(b)
                    spans.append(m.answer_span)
            hidden_itm = _forward_collated(model, itm_packed)
            _, p2 = match_score(hidden_itm, spans, model)
            p2_np = p2.numpy().reshape(len(chunk), k)
            for row, cs, p2_row in zip(p1_np, cand_sets, p2_np):
                p1_full = {a: float(v) for a, v in zip(answers, row)}
                out.append(predict(cs, [float(v) for v in p2_row], p1_full, answers, renormalize_p1))
    return out


# -- fine-tuning ----------------------------------------------------------------


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 32
    lr: float = 3e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    k: int = 8
    seed: int = 0
    shots: int | None = None  # None = fully supervised; 0 skips optimization
    freeze_backbone: bool = False
    # Fraction of steps trained cloze-only before candidate verification joins
    # in: candidates drawn from an untrained answer head are pure noise.
    itm_warmup_frac: float = 0.2
    log_every: int = 50

    def to_dict(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(**d)


_FRESH_HEADS_BY_PARADIGM = {
    Paradigm.BASELINE: ("baseline_cls_head",),
    Paradigm.MASK_PROMPT: ("answer_mlm_head",),
    Paradigm.DYNAMIC_PROMPT: ("answer_mlm_head", "dynamic_prompt"),
    Paradigm.DPT_MLM: ("answer_mlm_head",),
    Paradigm.DPT_MLM_ITM: ("answer_mlm_head", "answer_itm_head"),
}


def _trainable_parameters(model: VLEncoder, paradigm: Paradigm, cfg: FinetuneConfig) -> list:
    if model.scoring_mode == "pretrained":
        heads = ("pt_mlm_head", "pt_itm_head")
    else:
        heads = _FRESH_HEADS_BY_PARADIGM[paradigm]
    params = []
    for name, p in model.named_parameters():
        is_head = any(name == h or name.startswith(h + ".") for h in _all_head_names())
        active_head = any(name == h or name.startswith(h + ".") for h in heads)
        if active_head or (not is_head and not cfg.freeze_backbone):
            params.append(p)
    return params


def _all_head_names() -> tuple[str, ...]:
    return (
        "pt_mlm_head",
        "pt_itm_head",
        "baseline_cls_head",
        "answer_mlm_head",
        "answer_itm_head",
        "dynamic_prompt",
    )


def finetune(
    checkpoint: VLEncoder,
    samples: Sequence[VQASample],
    paradigm: Paradigm,
    cfg: FinetuneConfig,
) -> tuple[VLEncoder, list[dict]]:
    """Fine-tune a copy of the checkpoint under one paradigm.

    Few-shot mode (``shots`` set) routes dpt paradigms through the
    pre-training heads via zero-shot initialization; all other paradigms get
    freshly re-drawn heads. ``shots=0`` returns the initialized model with no
    optimization.
    """
    few_shot = cfg.shots is not None
    if few_shot and paradigm.needs_declaration:
        model = zero_shot_init(checkpoint)
    else:
        model = checkpoint.clone()
        model.reinit_heads(_FRESH_HEADS_BY_PARADIGM[paradigm], seed=cfg.seed)
    if cfg.shots == 0:
        return model, []
    if not samples:
        raise ValueError("no training samples")

    answers = model.vocab.answers
    answer_index = {a: i for i, a in enumerate(answers)}
    for s in samples:
        if s.record.answer not in answer_index:
            raise ValueError(f"gold answer not in answer set: {s.record.answer!r}")

    params = _trainable_parameters(model, paradigm, cfg)
    opt = make_optimizer(params, cfg.lr, cfg.weight_decay)
    rng = subrng(cfg.seed, 7)
    gen = torch.Generator().manual_seed(cfg.seed)
    log: list[dict] = []

    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = cfg.lr * lr_scale(step, cfg.steps, cfg.warmup_frac)
        idx = rng.integers(0, len(samples), size=min(cfg.batch_size, len(samples)))
        chunk = [samples[i] for i in idx]
        packed, metas = zip(*(format_prompt(s, paradigm, model.vocab, model.cfg) for s in chunk))
        try:
            hidden = model(collate(list(packed)), train_mode=True, rng=gen)
        except RuntimeError as exc:
            raise RuntimeError(f"fine-tuning diverged at step {step}: {exc}") from exc
        mask_pos = torch.tensor([m.mask_pos for m in metas])
        _, p1 = answer_scores(hidden, mask_pos, model, paradigm)
        gt = torch.tensor([answer_index[s.record.answer] for s in chunk])
        loss_mlm = mlm_vqa_loss(p1, gt)

        loss_itm = None
        if paradigm is Paradigm.DPT_MLM_ITM and step >= int(cfg.steps * cfg.itm_warmup_frac):
            p1_np = p1.detach().numpy()
            cand_sets = [top_k(row, answers, cfg.k, s.declaration) for row, s in zip(p1_np, chunk)]
            itm_packed, spans, labels = [], [], []
            for s, cs in zip(chunk, cand_sets):
                for a, y in zip(cs.answers, candidate_labels(cs, s.record.answer)):
                    b, m = format_prompt(s, paradigm, model.vocab, model.cfg, answer=a)
                    itm_packed.append(b)
                    spans.append(m.answer_span)
                    labels.append(y)
            hidden_itm = model(collate(itm_packed), train_mode=True, rng=gen)
            _, p2 = match_score(hidden_itm, spans, model)
            loss_itm = itm_vqa_loss(
                p2.view(len(chunk), cfg.k), torch.tensor(labels).view(len(chunk), cfg.k)
            )

        loss = dpt_total_loss(loss_mlm, loss_itm)
        if not torch.isfinite(loss):
            raise RuntimeError(f"fine-tuning diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            entry = {"step": step, "loss": float(loss.detach()), "mlm_loss": float(loss_mlm.detach())}
            if loss_itm is not None:
                entry["itm_loss"] = float(loss_itm.detach())
            log.append(entry)
    return model, log
