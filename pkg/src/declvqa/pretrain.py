"""Self-supervised pre-training: masked token recovery plus scene-text matching.

Each scene's caption is a concatenation of true declaratives about it. Every
step draws two sub-batches: a matched, token-corrupted batch for the MLM
term and an unmasked batch with random scene swaps for the ITM term. Only
backbone parameters and the two pre-training heads are optimized; the fresh
fine-tuning heads keep their initialization so that later zero-shot
initialization from the pre-training heads is meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .encoder import (
    FIRST_REGULAR_ID,
    MASK_ID,
    IGNORE_INDEX,
    EncoderConfig,
    VLEncoder,
    Vocabulary,
    build_vocabulary,
    collate,
    pack_input,
    save_checkpoint,
)
from .world import DatasetSplits, scene_statements, subrng

FRESH_HEAD_NAMES = ("baseline_cls_head", "answer_mlm_head", "answer_itm_head", "dynamic_prompt")


@dataclass
class PretrainConfig:
    mask_prob: float = 0.15
    mask_split: tuple[float, float, float] = (0.8, 0.1, 0.1)  # mask / random / keep
    itm_negative_prob: float = 0.5
    steps: int = 5000
    batch_size: int = 64
    loss_weight_mlm: float = 1.0
    loss_weight_itm: float = 1.0
    seed: int = 0
    lr: float = 3e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    log_every: int = 50
    statements_per_caption: int = 3

    def validate(self) -> None:
        if not 0.0 <= self.mask_prob <= 1.0 or not 0.0 <= self.itm_negative_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(sum(self.mask_split) - 1.0) > 1e-9:
            raise ValueError("mask_split must sum to 1")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["mask_split"] = list(self.mask_split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        d["mask_split"] = tuple(d.get("mask_split", (0.8, 0.1, 0.1)))
        return cls(**d)


@dataclass
class CaptionRecord:
    scene_id: str
    caption: str


def build_caption_records(
    ds: DatasetSplits, split: str = "train", statements_per_caption: int = 3, max_tokens: int = 32, seed: int = 0
) -> list[CaptionRecord]:
    """One caption per scene: its record's declarative plus extra true statements."""
    records = []
    for i, rec in enumerate(ds.records[split]):
        scene = ds.scenes[rec.scene_id]
        rng = subrng(seed, 100, i)
        pool = [s for s in scene_statements(scene, ds.cfg) if s != rec.full_answer]
        order = rng.permutation(len(pool))
        chosen = [rec.full_answer] + [pool[j] for j in order[: max(0, statements_per_caption - 1)]]
        chosen = [chosen[j] for j in rng.permutation(len(chosen))]
        caption, used = "", 0
        for stmt in chosen:
            n_tok = stmt.count(" ") + 2  # words + split-off final period
            if used + n_tok > max_tokens:
                continue
            caption = f"{caption} {stmt}".strip()
            used += n_tok
        records.append(CaptionRecord(scene_id=rec.scene_id, caption=caption))
    return records


def mask_tokens(
    token_ids: Sequence[int], vocab: Vocabulary, cfg: PretrainConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt maskable positions and return (corrupted_ids, labels).

    Only regular (non-special, non-prompt) tokens are candidates. Labels hold
    the original id at selected positions and IGNORE_INDEX elsewhere.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    n = len(ids)
    maskable = ids >= FIRST_REGULAR_ID
    selected = maskable & (rng.random(n) < cfg.mask_prob)
    action = rng.random(n)
    replacement = rng.integers(FIRST_REGULAR_ID, len(vocab), size=n)

    p_mask, p_random, _ = cfg.mask_split
    corrupted = ids.copy()
    corrupted[selected & (action < p_mask)] = MASK_ID
    use_random = selected & (action >= p_mask) & (action < p_mask + p_random)
    corrupted[use_random] = replacement[use_random]
    labels = np.where(selected, ids, IGNORE_INDEX)
    return corrupted, labels


def itm_sample(
    captions: Sequence[CaptionRecord],
    regions_by_scene: dict[str, np.ndarray],
    rng: np.random.Generator,
    cfg: PretrainConfig,
    index: int | None = None,
) -> tuple[CaptionRecord, np.ndarray, int]:
    """Draw one (caption, regions, label) pair; label 0 means swapped scene."""
    scene_ids = sorted({c.scene_id for c in captions})
    if len(scene_ids) < 2:
        raise ValueError("image-text matching needs at least two distinct scenes")
    if index is None:
        index = int(rng.integers(len(captions)))
    record = captions[index]
    if rng.random() < cfg.itm_negative_prob:
        others = [s for s in scene_ids if s != record.scene_id]
        other = others[int(rng.integers(len(others)))]
        return record, regions_by_scene[other], 0
    return record, regions_by_scene[record.scene_id], 1


def make_optimizer(params, lr: float, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def lr_scale(step: int, total_steps: int, warmup_frac: float, floor: float = 0.1) -> float:
    """Linear warmup, then linear decay to ``floor`` of the peak rate."""
    warmup = max(1, int(total_steps * warmup_frac))
    if step < warmup:
        return (step + 1) / warmup
    if total_steps <= warmup:
        return 1.0
    progress = (step - warmup) / (total_steps - warmup)
    return 1.0 - (1.0 - floor) * progress


def pretrainable_parameters(model: VLEncoder) -> list[torch.nn.Parameter]:
    """Backbone plus pre-training heads; fine-tuning heads stay untouched."""
    params = []
    for name, p in model.named_parameters():
        if not any(name == h or name.startswith(h + ".") for h in FRESH_HEAD_NAMES):
            params.append(p)
    return params


def _mlm_loss(model: VLEncoder, batch, labels: torch.Tensor, train: bool, gen) -> torch.Tensor:
    hidden = model(batch, train_mode=train, rng=gen)
    flat = labels[:, : hidden.shape[1]].reshape(-1)
    chosen = flat != IGNORE_INDEX
    if not bool(chosen.any()):
        return torch.zeros((), dtype=hidden.dtype)
    logits = model.pt_mlm_head(hidden.reshape(-1, hidden.shape[-1])[chosen])
    return torch.nn.functional.cross_entropy(logits, flat[chosen])


def _itm_logits(model: VLEncoder, batch, train: bool, gen) -> torch.Tensor:
    hidden = model(batch, train_mode=train, rng=gen)
    return model.pt_itm_head(hidden[:, 0]).squeeze(-1)


def pretrain(
    ds: DatasetSplits,
    encoder_cfg: EncoderConfig,
    cfg: PretrainConfig,
    out_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> tuple[VLEncoder, list[dict]]:
    """Run the joint MLM+ITM loop and return (model, loss log)."""
    cfg.validate()
    vocab = build_vocabulary(ds.all_texts(), ds.answers)
    encoder_cfg.region_feat_dim = ds.cfg.region_feat_dim
    encoder_cfg.answer_set_size = len(ds.answers)
    model = VLEncoder(encoder_cfg, vocab, seed=cfg.seed)

    captions = build_caption_records(
        ds, "train", cfg.statements_per_caption, encoder_cfg.max_text_len, seed=cfg.seed
    )
    token_cache = [vocab.encode(c.caption) for c in captions]
    regions = ds.regions

    params = pretrainable_parameters(model)
    opt = make_optimizer(params, cfg.lr, cfg.weight_decay)
    rng = subrng(cfg.seed, 1)
    gen = torch.Generator().manual_seed(cfg.seed)
    log: list[dict] = []

    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = cfg.lr * lr_scale(step, cfg.steps, cfg.warmup_frac)

        # MLM sub-batch: matched pairs, corrupted text.
        idx = rng.integers(0, len(captions), size=cfg.batch_size)
        packed, label_rows = [], []
        for i in idx:
            corrupted, labels = mask_tokens(token_cache[i], vocab, cfg, rng)
            sample = pack_input(corrupted, regions[captions[i].scene_id], encoder_cfg)
            packed.append(sample)
            row = np.full(encoder_cfg.max_seq, IGNORE_INDEX, dtype=np.int64)
            row[1 : 1 + len(labels)] = labels
            label_rows.append(row)
        mlm_batch = collate(packed)
        mlm_labels = torch.from_numpy(np.stack(label_rows))

        # ITM sub-batch: clean text, half the scenes swapped.
        itm_packed, itm_labels = [], []
        for _ in range(cfg.batch_size):
            i = int(rng.integers(len(captions)))
            record, feats, label = itm_sample(captions, regions, rng, cfg, index=i)
            itm_packed.append(pack_input(token_cache[i], feats, encoder_cfg))
            itm_labels.append(label)
        itm_batch = collate(itm_packed)
        itm_target = torch.tensor(itm_labels, dtype=torch.float32)

        try:
            mlm_loss = _mlm_loss(model, mlm_batch, mlm_labels, True, gen)
            itm_logit = _itm_logits(model, itm_batch, True, gen)
        except RuntimeError as exc:
            raise RuntimeError(f"pre-training diverged at step {step}: {exc}") from exc
        itm_loss = torch.nn.functional.binary_cross_entropy_with_logits(itm_logit, itm_target)
        loss = cfg.loss_weight_mlm * mlm_loss + cfg.loss_weight_itm * itm_loss
        if not torch.isfinite(loss):
            raise RuntimeError(f"pre-training diverged at step {step}")

        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            itm_acc = float(((itm_logit > 0).float() == itm_target).float().mean())
            log.append(
                {
                    "step": step,
                    "mlm_loss": float(mlm_loss.detach()),
                    "itm_loss": float(itm_loss.detach()),
                    "itm_acc": itm_acc,
                }
            )

    if out_path is not None:
        save_checkpoint(model, out_path)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for entry in log:
                fh.write(json.dumps(entry) + "\n")
    return model, log


# -- held-out diagnostics -----------------------------------------------------


def itm_holdout_accuracy(
    model: VLEncoder,
    captions: Sequence[CaptionRecord],
    regions_by_scene: dict[str, np.ndarray],
    seed: int = 0,
    n_pairs: int = 400,
    batch_size: int = 64,
) -> float:
    """Balanced matched/mismatched pair classification accuracy."""
    cfg = PretrainConfig(itm_negative_prob=0.5)
    rng = subrng(seed, 2)
    packed, labels = [], []
    for _ in range(n_pairs):
        record, feats, label = itm_sample(captions, regions_by_scene, rng, cfg)
        packed.append(pack_input(model.vocab.encode(record.caption), feats, model.cfg))
        labels.append(label)
    correct = 0
    with torch.no_grad():
        for start in range(0, n_pairs, batch_size):
            chunk = packed[start : start + batch_size]
            logits = _itm_logits(model, collate(chunk), False, None)
            pred = (logits > 0).long().tolist()
            correct += sum(int(p == l) for p, l in zip(pred, labels[start : start + batch_size]))
    return correct / n_pairs


def masked_recovery(
    model: VLEncoder,
    captions: Sequence[CaptionRecord],
    regions_by_scene: dict[str, np.ndarray],
    seed: int = 0,
    n_samples: int = 400,
    batch_size: int = 64,
) -> float:
    """Top-1 recovery rate when masking one attribute word per caption."""
    vocab = model.vocab
    attribute_ids = set(vocab.answer_ids)
    rng = subrng(seed, 3)
    packed, gold, positions = [], [], []
    attempts = 0
    while len(packed) < n_samples and attempts < 10 * n_samples:
        attempts += 1
        record = captions[int(rng.integers(len(captions)))]
        ids = vocab.encode(record.caption)
        slots = [i for i, t in enumerate(ids) if t in attribute_ids]
        if not slots:
            continue
        pos = slots[int(rng.integers(len(slots)))]
        gold.append(ids[pos])
        corrupted = list(ids)
        corrupted[pos] = MASK_ID
        packed.append(pack_input(corrupted, regions_by_scene[record.scene_id], model.cfg))
        positions.append(pos + 1)  # account for [CLS]
    hits = 0
    with torch.no_grad():
        for start in range(0, len(packed), batch_size):
            chunk = packed[start : start + batch_size]
            hidden = model(collate(chunk), train_mode=False)
            for j in range(len(chunk)):
                logits = model.pt_mlm_head(hidden[j, positions[start + j]])
                hits += int(int(torch.argmax(logits)) == gold[start + j])
    return hits / max(1, len(packed))
