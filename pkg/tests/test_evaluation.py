import numpy as np
import pytest
import torch

from sarmim.errors import ValidationError
from sarmim.evaluation import (FewShotSplit, ProbeConfig, attention_distance,
                               attention_distance_from_maps,
                               encode_image_features, evaluate_few_shot,
                               make_few_shot_split, patch_center_distances,
                               probe)
from sarmim.model import ModelConfig, build_model, save_checkpoint
from sarmim.util import derive_seed

MODEL = ModelConfig(patch_side=8, embed_dim=32, encoder_depth=2,
                    predictor_depth=1, heads=2, mlp_ratio=2.0,
                    target_dim=64, window_side=4)


def naive_attention_distance(attn, grid_side, patch_side):
    """Double-loop oracle over raw attention tensors: (heads, T, T) -> (heads,)."""
    heads, t, _ = attn.shape
    centers = [((i // grid_side + 0.5) * patch_side,
                (i % grid_side + 0.5) * patch_side) for i in range(t)]
    out = np.zeros(heads)
    for h in range(heads):
        total = 0.0
        for q in range(t):
            for j in range(t):
                dy = centers[q][0] - centers[j][0]
                dx = centers[q][1] - centers[j][1]
                total += attn[h, q, j] * np.sqrt(dy * dy + dx * dx)
        out[h] = total / t
    return out


def toy_dataset(n_per_class=12, classes=3, size=32, seed=0):
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in range(classes):
        for _ in range(n_per_class):
            img = rng.uniform(0.2, 1.0, (size, size)).astype(np.float32)
            img[4 + 6 * cls:10 + 6 * cls, 8:24] += 2.0  # class-dependent bar
            images.append(img)
            labels.append(cls)
    return images, np.asarray(labels)


# ---------------------------------------------------------------------------
# make_few_shot_split


def test_split_counts():
    labels = np.repeat(np.arange(3), 11)
    split = make_few_shot_split(labels, shots=10, seed=0)
    assert len(split.train_indices) == 30
    assert len(split.test_indices) == 3
    for cls in range(3):
        assert (labels[split.train_indices] == cls).sum() == 10
        assert (labels[split.test_indices] == cls).sum() == 1


def test_split_deterministic_and_disjoint():
    labels = np.repeat(np.arange(4), 20)
    a = make_few_shot_split(labels, 5, seed=9)
    b = make_few_shot_split(labels, 5, seed=9)
    assert np.array_equal(a.train_indices, b.train_indices)
    assert np.array_equal(a.test_indices, b.test_indices)
    assert not set(a.train_indices) & set(a.test_indices)
    assert len(a.train_indices) + len(a.test_indices) == len(labels)


def test_split_class_too_small_names_class():
    labels = np.array([0, 0, 0, 1, 1])
    with pytest.raises(ValidationError, match="class 1"):
        make_few_shot_split(labels, shots=2, seed=0)


def test_split_inclusion_frequency():
    labels = np.repeat(np.arange(2), 20)
    hits = np.zeros(len(labels))
    seeds = 1000
    for seed in range(seeds):
        split = make_few_shot_split(labels, shots=5, seed=seed)
        hits[split.train_indices] += 1
    freq = hits / seeds
    assert np.abs(freq - 5 / 20).max() < 0.05


# ---------------------------------------------------------------------------
# encode_image_features


def test_encode_features_shape_and_determinism():
    model = build_model(MODEL, seed=0)
    rng = np.random.default_rng(1)
    img = rng.uniform(0.2, 2.0, (32, 32)).astype(np.float32)
    feats = encode_image_features(model, [img, img.copy()])
    assert feats.shape == (2, MODEL.embed_dim)
    assert np.array_equal(feats[0], feats[1])


def test_encode_features_sensitive_to_patch_permutation():
    # the relative-position bias breaks permutation invariance; the table
    # starts at zero, so give it content as training would
    model = build_model(MODEL, seed=0)
    with torch.no_grad():
        model.rel_pos_bias.normal_(std=0.5,
                                   generator=torch.Generator().manual_seed(8))
    rng = np.random.default_rng(2)
    img = rng.uniform(0.2, 2.0, (32, 32)).astype(np.float32)
    permuted = img.reshape(4, 8, 4, 8).transpose(0, 2, 1, 3).reshape(16, 64)
    permuted = permuted[rng.permutation(16)]
    permuted = (permuted.reshape(4, 4, 8, 8).transpose(0, 2, 1, 3)
                .reshape(32, 32).copy())
    a = encode_image_features(model, [img])
    b = encode_image_features(model, [permuted])
    assert not np.allclose(a, b, atol=1e-6)


# ---------------------------------------------------------------------------
# probe


def test_probe_single_class_accuracy_one():
    images, _ = toy_dataset(n_per_class=6, classes=1)
    labels = np.zeros(len(images), dtype=np.int64)
    model = build_model(MODEL, seed=1)
    split = make_few_shot_split(labels, shots=3, seed=0)
    acc = probe(model, split, ProbeConfig(epochs=2, warmup_epochs=1),
                images, labels)
    assert acc == 1.0


def test_probe_zero_weights_no_training_tie_break():
    # balanced 4-class test set, zeroed classifier, argmax -> class 0
    rng = np.random.default_rng(0)
    features = rng.normal(size=(40, 16))
    labels = np.repeat(np.arange(4), 10)
    split = FewShotSplit(shots=2, train_indices=np.arange(0, 40, 5),
                         test_indices=np.arange(40), seed=0)
    acc = probe(None, split, ProbeConfig(epochs=0), None, labels,
                features=features)
    assert acc == pytest.approx(0.25)


def test_probe_separable_features():
    # linearly separable clusters: accuracy must reach 0.95 after 40 epochs
    rng = np.random.default_rng(3)
    classes, per_class, d = 4, 30, 16
    centers = rng.normal(scale=4.0, size=(classes, d))
    features = np.concatenate([
        centers[c] + rng.normal(scale=0.2, size=(per_class, d))
        for c in range(classes)])
    labels = np.repeat(np.arange(classes), per_class)
    split = make_few_shot_split(labels, shots=10, seed=1)
    acc = probe(None, split, ProbeConfig(), None, labels, features=features)
    assert acc >= 0.95


def test_probe_linear_mode_freezes_encoder(tmp_path):
    images, labels = toy_dataset()
    model = build_model(MODEL, seed=2)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    split = make_few_shot_split(labels, shots=3, seed=2)
    probe(model, split, ProbeConfig(epochs=2, warmup_epochs=1), images, labels)
    for k, v in model.state_dict().items():
        assert torch.equal(before[k], v), k


def test_probe_finetune_changes_encoder():
    images, labels = toy_dataset(n_per_class=6)
    model = build_model(MODEL, seed=3)
    before = model.patch_embed.weight.clone()
    split = make_few_shot_split(labels, shots=3, seed=3)
    probe(model, split, ProbeConfig(mode="finetune", epochs=2, warmup_epochs=1),
          images, labels)
    assert not torch.equal(before, model.patch_embed.weight)


# ---------------------------------------------------------------------------
# evaluate_few_shot


def test_evaluate_single_repeat_matches_probe():
    images, labels = toy_dataset(n_per_class=8)
    model = build_model(MODEL, seed=4)
    cfg = ProbeConfig(epochs=2, warmup_epochs=1)
    rows, summary = evaluate_few_shot(model, images, labels, shots=[3],
                                      repeats=1, cfg=cfg, base_seed=11)
    split = make_few_shot_split(labels, 3, derive_seed(11, "split", 3, 0))
    direct = probe(model, split, cfg, images, labels)
    assert rows[0]["accuracy"] == direct
    assert summary[3] == (direct, 0.0)


def test_evaluate_aggregation():
    images, labels = toy_dataset(n_per_class=6)
    model = build_model(MODEL, seed=5)
    cfg = ProbeConfig(epochs=1, warmup_epochs=0)
    rows, summary = evaluate_few_shot(model, images, labels, shots=[2, 3],
                                      repeats=3, cfg=cfg, base_seed=0)
    assert len(rows) == 6
    for n in (2, 3):
        accs = [r["accuracy"] for r in rows if r["shots"] == n]
        mean, std = summary[n]
        assert 0.0 <= mean <= 1.0 and std >= 0.0
        assert mean == pytest.approx(np.mean(accs), abs=1e-9)
        assert std == pytest.approx(np.std(accs), abs=1e-9)


# ---------------------------------------------------------------------------
# attention distance


def test_attention_distance_identity_is_zero():
    attn = np.eye(16)[None].repeat(4, axis=0)  # (heads, T, T), all self
    dist = attention_distance_from_maps(attn, grid_side=4, patch_side=8)
    assert np.allclose(dist, 0.0)


def test_attention_distance_uniform_2x2_analytic():
    p = 8
    attn = np.full((3, 4, 4), 0.25)
    dist = attention_distance_from_maps(attn, grid_side=2, patch_side=p)
    expected = p * (2 + np.sqrt(2)) / 4
    assert np.allclose(dist, expected, rtol=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_attention_distance_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 16, 16))
    attn = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    got = attention_distance_from_maps(attn, grid_side=4, patch_side=8)
    want = naive_attention_distance(attn, grid_side=4, patch_side=8)
    assert np.abs(got - want).max() < 1e-6


def test_attention_distance_model_output_bounded():
    model = build_model(MODEL, seed=6)
    rng = np.random.default_rng(7)
    images = [rng.uniform(0.2, 2.0, (32, 32)).astype(np.float32)
              for _ in range(3)]
    dist = attention_distance(model, images)
    assert dist.shape == (MODEL.encoder_depth, MODEL.heads)
    diameter = patch_center_distances(4, 8).max()
    assert (dist >= 0).all() and (dist <= diameter).all()


def test_attention_distance_needs_images():
    model = build_model(MODEL, seed=6)
    with pytest.raises(ValidationError):
        attention_distance(model, [])
