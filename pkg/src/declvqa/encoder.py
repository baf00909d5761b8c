"""Small vision-language transformer encoder and its prediction heads.

The encoder packs ``[CLS] text [SEP] regions`` into one sequence and runs a
pre-norm transformer over it. All heads used anywhere in the pipeline live on
the same module so checkpoints carry every parameter under a stable name:

* ``pt_mlm_head`` / ``pt_itm_head``: pre-training heads (token recovery over
  the full vocabulary, match score from [CLS]).
* ``baseline_cls_head``: fresh answer classifier over [CLS].
* ``answer_mlm_head`` / ``answer_itm_head``: answer scoring from the
  concatenated [CLS]+[MASK] (resp. [CLS]+answer-span) states.
* ``dynamic_prompt``: the 16 learnable prompt embeddings [V1]..[V16].

Gradients come from torch autograd; ``grad`` exposes them per named
parameter so a finite-difference oracle can audit them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .text import tokenize_text, detokenize_text
from .tensorio import save_tensors, load_tensors

PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[pad]", "[cls]", "[sep]", "[mask]", "[unk]"]
N_DYNAMIC = 16
DYN_FIRST_ID = 5
FIRST_REGULAR_ID = DYN_FIRST_ID + N_DYNAMIC  # 21

IGNORE_INDEX = -100


def dynamic_prompt_tokens() -> list[str]:
    return [f"[V{i}]" for i in range(1, N_DYNAMIC + 1)]


@dataclass
class Vocabulary:
    """Closed token vocabulary with reserved specials and answer-word mapping."""

    id_to_token: list[str]
    answers: list[str]
    token_to_id: dict[str, int] = field(init=False)
    answer_token_map: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")
        missing = [a for a in self.answers if a not in self.token_to_id]
        if missing:
            raise ValueError(f"answers missing from vocabulary: {missing}")
        self.answer_token_map = {a: self.token_to_id[a] for a in self.answers}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def answer_ids(self) -> list[int]:
        return [self.answer_token_map[a] for a in self.answers]

    def encode(self, text: str) -> list[int]:
        unk = self.token_to_id["[unk]"]
        return [self.token_to_id.get(tok, unk) for tok in tokenize_text(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return detokenize_text([self.id_to_token[i] for i in ids])


def build_vocabulary(texts: Sequence[str], answers: Sequence[str]) -> Vocabulary:
    """Vocabulary over the whole corpus plus prompt literals, sorted for determinism."""
    tokens: set[str] = set()
    for text in texts:
        tokens.update(tokenize_text(text))
    tokens.update(answers)
    tokens.update(["answer", ":"])
    tokens -= set(SPECIAL_TOKENS)
    tokens -= {t.lower() for t in dynamic_prompt_tokens()}
    id_to_token = SPECIAL_TOKENS + [t.lower() for t in dynamic_prompt_tokens()] + sorted(tokens)
    return Vocabulary(id_to_token=id_to_token, answers=list(answers))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercased, punctuation-split token ids; unknown words map to [UNK]."""
    return vocab.encode(text)


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_text_len: int = 32
    max_regions: int = 4
    region_feat_dim: int = 20
    dropout: float = 0.1
    answer_set_size: int = 18

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def max_seq(self) -> int:
        return self.max_text_len + 2 + self.max_regions

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class BatchInput:
    """One packed sample: [CLS] text [SEP] regions, zero-padded at the end."""

    token_ids: np.ndarray       # [max_seq] int64; PAD at region/padding positions
    segment_ids: np.ndarray     # [max_seq] int64; 0=text, 1=region
    region_features: np.ndarray  # [max_regions, region_feat_dim] float32
    attention_mask: np.ndarray  # [max_seq] float32; 1 on real positions


def pack_input(text_ids: Sequence[int], regions: np.ndarray, cfg: EncoderConfig) -> BatchInput:
    """Lay out one sample. Over-long text is an error, never silent truncation."""
    n_text = len(text_ids)
    if n_text > cfg.max_text_len:
        raise ValueError(f"text length {n_text} exceeds max_text_len={cfg.max_text_len}")
    regions = np.asarray(regions, dtype=np.float32).reshape(-1, cfg.region_feat_dim) if regions is not None and len(regions) else np.zeros((0, cfg.region_feat_dim), np.float32)
    n_reg = regions.shape[0]
    if n_reg > cfg.max_regions:
        raise ValueError(f"{n_reg} regions exceed max_regions={cfg.max_regions}")

    seq = cfg.max_seq
    token_ids = np.full(seq, PAD_ID, dtype=np.int64)
    segment_ids = np.zeros(seq, dtype=np.int64)
    mask = np.zeros(seq, dtype=np.float32)

    token_ids[0] = CLS_ID
    token_ids[1 : 1 + n_text] = np.asarray(text_ids, dtype=np.int64)
    token_ids[1 + n_text] = SEP_ID
    used = 2 + n_text
    segment_ids[used : used + n_reg] = 1
    mask[: used + n_reg] = 1.0

    feats = np.zeros((cfg.max_regions, cfg.region_feat_dim), dtype=np.float32)
    feats[:n_reg] = regions
    return BatchInput(token_ids=token_ids, segment_ids=segment_ids, region_features=feats, attention_mask=mask)


def collate(batch: Sequence[BatchInput]) -> dict[str, torch.Tensor]:
    """Stack samples, trimming shared padding to the batch's longest sample.

    Real positions are always a prefix of the buffer, so trimming the common
    padding tail changes nothing semantically (padded keys are masked out of
    attention) while shrinking the quadratic attention cost.
    """
    mask = np.stack([b.attention_mask for b in batch])
    width = max(1, int(mask.sum(axis=1).max()))
    return {
        "token_ids": torch.from_numpy(np.stack([b.token_ids for b in batch])[:, :width]),
        "segment_ids": torch.from_numpy(np.stack([b.segment_ids for b in batch])[:, :width]),
        "region_features": torch.from_numpy(np.stack([b.region_features for b in batch])),
        "attention_mask": torch.from_numpy(mask[:, :width]),
    }


def mask_position(token_ids: np.ndarray) -> int:
    """Index of the single [MASK] token, or -1 when absent."""
    hits = np.flatnonzero(token_ids == MASK_ID)
    return int(hits[0]) if len(hits) else -1


def _dropout(x: torch.Tensor, p: float, train: bool, gen: torch.Generator | None) -> torch.Tensor:
    if not train or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, device=x.device, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


class _MLPHead(nn.Module):
    """Single hidden layer head with GELU, used for concatenated-state scoring."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.d_head = d // cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.qkv_proj = nn.Linear(d, 3 * d)
        self.o_proj = nn.Linear(d, d)
        self.ff1 = nn.Linear(d, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, d)
        self.dropout = cfg.dropout

    def forward(self, x: torch.Tensor, key_bias: torch.Tensor, train: bool, gen: torch.Generator | None) -> torch.Tensor:
        B, S, d = x.shape
        h = self.ln1(x)
        qkv = self.qkv_proj(h).view(B, S, 3, self.n_heads, self.d_head).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = q @ k.transpose(-1, -2) * (1.0 / math.sqrt(self.d_head)) + key_bias
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(B, S, d)
        x = x + _dropout(self.o_proj(ctx), self.dropout, train, gen)
        h = self.ln2(x)
        h = self.ff2(torch.nn.functional.gelu(self.ff1(h)))
        return x + _dropout(h, self.dropout, train, gen)


class VLEncoder(nn.Module):
    """Transformer over packed text+region sequences, with every scoring head.

    ``scoring_mode`` selects how answer and match scores are produced:
    "standard" uses the concatenation heads; "pretrained" routes through the
    pre-training heads (vocabulary rows restricted to answer words, match
    score straight from [CLS]) for zero/few-shot use.
    """

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.scoring_mode = "standard"
        d, V = cfg.d_model, len(vocab)
        self.token_emb = nn.Embedding(V, d)
        self.pos_emb = nn.Embedding(cfg.max_seq, d)
        self.seg_emb = nn.Embedding(2, d)
        self.region_proj = nn.Linear(cfg.region_feat_dim, d)
        self.dynamic_prompt = nn.Parameter(torch.zeros(N_DYNAMIC, d))
        self.layers = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(d)

        self.pt_mlm_head = nn.Linear(d, V)
        self.pt_itm_head = nn.Linear(d, 1)
        self.baseline_cls_head = nn.Linear(d, cfg.answer_set_size)
        self.answer_mlm_head = _MLPHead(2 * d, d, cfg.answer_set_size)
        self.answer_itm_head = _MLPHead(2 * d, d, 1)

        self.reset_parameters(seed)

    # -- initialization ----------------------------------------------------
    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            self._init_param(name, p, gen)

    def reinit_heads(self, names: Sequence[str], seed: int) -> None:
        """Re-draw the given head submodules (fresh parameters per run)."""
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if any(name == n or name.startswith(n + ".") for n in names):
                self._init_param(name, p, gen)

    @staticmethod
    def _init_param(name: str, p: torch.Tensor, gen: torch.Generator) -> None:
        with torch.no_grad():
            if "emb" in name or name == "dynamic_prompt":
                p.normal_(0.0, 0.02, generator=gen)
            elif name.endswith(".bias") or "norm" in name or ".ln" in name:
                if name.endswith(".weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                fan_out, fan_in = p.shape[0], p.shape[1]
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.uniform_(-bound, bound, generator=gen)

    # -- forward -----------------------------------------------------------
    def embed(self, batch: dict[str, torch.Tensor]) -> torch.Tensor:
        ids = batch["token_ids"]
        seg = batch["segment_ids"]
        mask = batch["attention_mask"]
        dtype = self.token_emb.weight.dtype
        emb = self.token_emb(ids)

        dyn = (ids >= DYN_FIRST_ID) & (ids < FIRST_REGULAR_ID)
        if bool(dyn.any()):
            dyn_emb = self.dynamic_prompt[(ids - DYN_FIRST_ID).clamp(0, N_DYNAMIC - 1)]
            emb = torch.where(dyn.unsqueeze(-1), dyn_emb, emb)

        reg_emb = self.region_proj(batch["region_features"].to(dtype))
        is_region = (seg == 1) & (mask > 0)
        slot = (torch.cumsum(is_region.long(), dim=1) - 1).clamp(min=0)
        gathered = torch.gather(reg_emb, 1, slot.unsqueeze(-1).expand(-1, -1, emb.shape[-1]))
        emb = torch.where(is_region.unsqueeze(-1), gathered, emb)

        pos = torch.arange(ids.shape[1], device=ids.device)
        return emb + self.pos_emb(pos) + self.seg_emb(seg)

    def forward(
        self,
        batch: dict[str, torch.Tensor],
        train_mode: bool = False,
        rng: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Hidden states [B, S, d_model]; padded keys are excluded from attention."""
        mask = batch["attention_mask"].to(self.token_emb.weight.dtype)
        x = _dropout(self.embed(batch), self.cfg.dropout, train_mode, rng)
        key_bias = ((1.0 - mask) * -1e9).view(mask.shape[0], 1, 1, mask.shape[1])
        for i, layer in enumerate(self.layers):
            x = layer(x, key_bias, train_mode, rng)
            if not torch.isfinite(x).all():
                raise RuntimeError(f"non-finite hidden state after layer {i}")
        x = self.final_norm(x)
        if not torch.isfinite(x).all():
            raise RuntimeError("non-finite hidden state after final norm")
        return x

    def clone(self) -> "VLEncoder":
        other = VLEncoder(self.cfg, self.vocab, seed=0)
        other.load_state_dict(self.state_dict())
        other.scoring_mode = self.scoring_mode
        return other


def grad(model: VLEncoder, loss_closure: Callable[[], torch.Tensor]) -> dict[str, torch.Tensor]:
    """Exact reverse-mode gradients of a scalar loss per named parameter.

    Parameters that do not influence the loss get zero gradients. A
    non-finite loss is a hard error.
    """
    loss = loss_closure()
    if loss.dim() != 0:
        raise ValueError("loss_closure must return a scalar")
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss: {loss.item()}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for name, p, g in zip(names, params, grads)
    }


# -- checkpointing ----------------------------------------------------------

def save_checkpoint(model: VLEncoder, path: str | Path) -> None:
    tensors = {name: p.detach().cpu().to(torch.float32).numpy() for name, p in model.named_parameters()}
    extra = {
        "encoder_config": model.cfg.to_dict(),
        "vocab_tokens": model.vocab.id_to_token,
        "answers": model.vocab.answers,
        "scoring_mode": model.scoring_mode,
    }
    save_tensors(path, tensors, extra)


def load_checkpoint(path: str | Path) -> VLEncoder:
    tensors, extra = load_tensors(path)
    cfg = EncoderConfig.from_dict(extra["encoder_config"])
    vocab = Vocabulary(id_to_token=list(extra["vocab_tokens"]), answers=list(extra["answers"]))
    model = VLEncoder(cfg, vocab, seed=0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise ValueError(f"checkpoint missing tensor: {name}")
            p.copy_(torch.from_numpy(tensors[name]))
    model.scoring_mode = extra.get("scoring_mode", "standard")
    return model


def checkpoint_manifest(path: str | Path) -> dict:
    manifest_path = Path(path).with_name(Path(path).name + ".manifest.json")
    with open(manifest_path, encoding="utf-8") as fh:
        return json.load(fh)
