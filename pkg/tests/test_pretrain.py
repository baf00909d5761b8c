import math

import numpy as np
import pytest
import torch

from declvqa.encoder import (
    FIRST_REGULAR_ID,
    IGNORE_INDEX,
    MASK_ID,
    EncoderConfig,
    build_vocabulary,
    collate,
    load_checkpoint,
    pack_input,
    save_checkpoint,
)
from declvqa.pretrain import (
    FRESH_HEAD_NAMES,
    CaptionRecord,
    PretrainConfig,
    build_caption_records,
    itm_holdout_accuracy,
    itm_sample,
    mask_tokens,
    masked_recovery,
    pretrain,
)
from declvqa.world import WorldConfig, build_dataset, subrng
from oracles import statement_is_true


@pytest.fixture(scope="module")
def vocab(small_dataset):
    return build_vocabulary(small_dataset.all_texts(), small_dataset.answers)


def _caption_ids(vocab, n=24):
    ids = [i for i in range(FIRST_REGULAR_ID, FIRST_REGULAR_ID + n)]
    return [i for i in ids if i < len(vocab)]


def test_mask_prob_zero_changes_nothing(vocab):
    ids = _caption_ids(vocab)
    cfg = PretrainConfig(mask_prob=0.0)
    corrupted, labels = mask_tokens(ids, vocab, cfg, subrng(0, 0))
    assert list(corrupted) == ids
    assert (labels == IGNORE_INDEX).all()


def test_mask_prob_one_pure_mask_split(vocab):
    ids = _caption_ids(vocab)
    cfg = PretrainConfig(mask_prob=1.0, mask_split=(1.0, 0.0, 0.0))
    corrupted, labels = mask_tokens(ids, vocab, cfg, subrng(0, 1))
    assert (corrupted == MASK_ID).all()
    assert list(labels) == ids


def test_special_tokens_never_selected(vocab):
    ids = [1, 2, 3, 4, 0] + _caption_ids(vocab, 4)
    cfg = PretrainConfig(mask_prob=1.0)
    corrupted, labels = mask_tokens(ids, vocab, cfg, subrng(0, 2))
    assert list(corrupted[:5]) == ids[:5]
    assert (labels[:5] == IGNORE_INDEX).all()


def test_selection_rate_matches_mask_prob(vocab):
    ids = _caption_ids(vocab)
    cfg = PretrainConfig(mask_prob=0.15)
    rng = subrng(0, 3)
    selected = total = 0
    for _ in range(10_000):
        _, labels = mask_tokens(ids, vocab, cfg, rng)
        selected += int((labels != IGNORE_INDEX).sum())
        total += len(ids)
    assert abs(selected / total - 0.15) <= 0.01


def _toy_captions():
    captions = [CaptionRecord(f"s{i}", f"caption {i}") for i in range(6)]
    regions = {f"s{i}": np.full((2, 4), i, dtype=np.float32) for i in range(6)}
    return captions, regions


def test_itm_extreme_negative_probabilities():
    captions, regions = _toy_captions()
    always_pos = PretrainConfig(itm_negative_prob=0.0)
    always_neg = PretrainConfig(itm_negative_prob=1.0)
    rng = subrng(1, 0)
    for _ in range(50):
        rec, feats, label = itm_sample(captions, regions, rng, always_pos)
        assert label == 1 and np.array_equal(feats, regions[rec.scene_id])
        rec, feats, label = itm_sample(captions, regions, rng, always_neg)
        assert label == 0 and not np.array_equal(feats, regions[rec.scene_id])


def test_itm_label_mean_near_half():
    captions, regions = _toy_captions()
    cfg = PretrainConfig(itm_negative_prob=0.5)
    rng = subrng(1, 1)
    labels = [itm_sample(captions, regions, rng, cfg)[2] for _ in range(10_000)]
    assert 0.48 <= np.mean(labels) <= 0.52


def test_itm_single_scene_is_an_error():
    captions = [CaptionRecord("only", "caption")]
    with pytest.raises(ValueError):
        itm_sample(captions, {"only": np.zeros((1, 4))}, subrng(0, 0), PretrainConfig())


def test_captions_only_state_scene_truths(small_dataset):
    import re

    captions = build_caption_records(small_dataset, "train", 3, 32, seed=5)
    for record in captions[:50]:
        scene = small_dataset.scenes[record.scene_id]
        sentences = [s.strip() for s in re.findall(r"[^.]+\.", record.caption)]
        assert sentences
        for sentence in sentences:
            assert statement_is_true(sentence, scene, small_dataset.cfg)


def test_short_pretrain_learns_and_freezes_fresh_heads(small_dataset, tiny_pretrained):
    model, log = tiny_pretrained
    assert log[-1]["mlm_loss"] < math.log(len(model.vocab))
    assert all(np.isfinite(entry["mlm_loss"]) for entry in log)

    # Fresh heads still carry their initialization.
    from declvqa.encoder import VLEncoder

    fresh = VLEncoder(model.cfg, model.vocab, seed=1)
    for name, p in model.named_parameters():
        if any(name == h or name.startswith(h + ".") for h in FRESH_HEAD_NAMES):
            assert bool((p == dict(fresh.named_parameters())[name]).all()), name


def test_pretrain_checkpoint_roundtrip_bit_identical(small_dataset, tiny_pretrained, tmp_path):
    model, _ = tiny_pretrained
    rec = small_dataset.records["val"][0]
    ids = model.vocab.encode(rec.full_answer)
    batch = collate([pack_input(ids, small_dataset.regions[rec.scene_id], model.cfg)])
    path = tmp_path / "pre.ckpt.bin"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert bool((model(batch) == loaded(batch)).all())


def test_holdout_diagnostics_run(small_dataset, tiny_pretrained):
    model, _ = tiny_pretrained
    captions = build_caption_records(small_dataset, "val", 3, 32, seed=1)
    acc = itm_holdout_accuracy(model, captions, small_dataset.regions, n_pairs=64)
    rec = masked_recovery(model, captions, small_dataset.regions, n_samples=64)
    assert 0.0 <= acc <= 1.0 and 0.0 <= rec <= 1.0


def test_divergence_aborts_with_step():
    ds = build_dataset(WorldConfig(seed=41), {"train": 30})
    cfg = PretrainConfig(steps=5, batch_size=8, lr=1e9, seed=0)
    with pytest.raises(RuntimeError, match="step"):
        pretrain(ds, EncoderConfig(), cfg)
