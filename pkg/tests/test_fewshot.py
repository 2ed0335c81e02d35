import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from genco import numcore as nc
from genco.contrastive import NoiseSpec, build_generator
from genco.dataio import Dataset
from genco.encoder import EncoderConfig, build_encoder, parameter_hash
from genco.fewshot import (ClassifierConfig, InsufficientSamplesError, SegConfig, aggregate_trials, accuracy,
                           enrich, finetune_classifier, miou, one_cycle_lr, predict, sample_episode,
                           train_linear_head)
from genco.fewshot.episodes import sample_segmentation_episode
from genco.fewshot.schedule import peak_step_of
from genco.fewshot.segment import (N_UP, build_decoder, finetune_segmenter, frozen_maps,
                                   perturb_bottleneck)


def _labelled(n_classes, per_class, size=8, channels=4):
    labels = np.repeat(np.arange(n_classes), per_class)
    tiles = np.random.default_rng(0).random((len(labels), channels, size, size), dtype=np.float32)
    return Dataset(Path("."), tiles, labels.astype(np.int64))


# -- episodes


def test_nine_way_ten_shot_episode():
    ds = _labelled(9, 30)
    ep = sample_episode(ds, 9, 10, 15, seed=0)
    assert len(ep.support) == 90 and len(ep.query) == 135
    assert np.bincount(ep.support_labels).tolist() == [10] * 9
    assert not set(ep.support_indices) & set(ep.query_indices)
    # episode label j maps back to dataset class classes[j]
    assert all(ds.labels[i] == ep.classes[y] for i, y in ep.support + ep.query)


def test_episodes_are_seeded():
    ds = _labelled(5, 30)
    a = sample_episode(ds, 3, 5, 5, seed=1)
    assert a == sample_episode(ds, 3, 5, 5, seed=1)
    assert a.support != sample_episode(ds, 3, 5, 5, seed=2).support


def test_episode_errors():
    ds = _labelled(3, 12)
    with pytest.raises(InsufficientSamplesError, match="needs 25"):
        sample_episode(ds, 3, 10, 15)
    with pytest.raises(ValueError, match="4-way"):
        sample_episode(ds, 4, 1, 1)
    with pytest.raises(ValueError):
        sample_episode(ds, 3, 0, 1)


def test_segmentation_episode_disjoint():
    ds = _labelled(3, 10)
    ds.masks = np.zeros((30, 8, 8), np.uint8)
    ds.masks[:, 0, 0] = 2
    ep = sample_segmentation_episode(ds, 10, 20, seed=0)
    assert len(ep.support) == 10 and len(ep.query) == 20
    assert not set(ep.support_indices) & set(ep.query_indices)
    with pytest.raises(InsufficientSamplesError):
        sample_segmentation_episode(ds, 20, 20)


# -- enrichment


def test_enrichment_doubles_nine_way_ten_shot():
    feats = torch.nn.functional.normalize(torch.randn(90, 128), dim=1)
    labels = torch.arange(9).repeat_interleave(10)
    es = enrich(feats, labels, build_generator(128, 128, 0), NoiseSpec(), rng_key=0)
    assert len(es) == 180
    assert torch.equal(es.labels[:90], labels) and torch.equal(es.labels[90:], labels)
    assert torch.equal(es.features[:90], feats)
    assert es.generated.sum() == 90 and not es.generated[:90].any()
    assert torch.allclose(es.features[90:].norm(dim=1), torch.ones(90), atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(n_way=st.integers(1, 6), k=st.integers(1, 6), seed=st.integers(0, 10 ** 6))
def test_enriched_labels_copy_source_labels(n_way, k, seed):
    rng = np.random.default_rng(seed)
    labels = torch.from_numpy(rng.permutation(np.repeat(np.arange(n_way), k)))
    feats = torch.nn.functional.normalize(torch.randn(len(labels), 16, generator=nc.torch_generator(seed)), dim=1)
    es = enrich(feats, labels, build_generator(16, 8, seed), NoiseSpec(dim=8), seed)
    assert len(es) == 2 * len(labels)
    for c in range(n_way):
        assert int((es.labels == c).sum()) == 2 * k
    assert torch.equal(es.labels[len(labels):], labels)


def test_enrichment_width_errors():
    G = build_generator(16, 8, 0)
    with pytest.raises(nc.ShapeError):
        enrich(torch.zeros(3, 12), torch.zeros(3), G, NoiseSpec(dim=8), 0)
    with pytest.raises(nc.ShapeError):
        enrich(torch.ones(3, 16) / 4, torch.zeros(3), G, NoiseSpec(dim=4), 0)


# -- linear head


def _clusters(n_way=3, k=10, d=16, seed=0):
    g = nc.torch_generator(seed)
    centres = torch.nn.functional.normalize(torch.randn(n_way, d, generator=g), dim=1)
    labels = torch.arange(n_way).repeat_interleave(k)
    x = centres[labels] + 0.05 * torch.randn(len(labels), d, generator=g)
    return torch.nn.functional.normalize(x, dim=1), labels


@pytest.mark.parametrize("enrich_on", [False, True])
def test_separable_support_is_fit(enrich_on):
    x, y = _clusters()
    cfg = ClassifierConfig(epochs=100, lr=1e-2, enrich=enrich_on)
    G = build_generator(16, 8, 0) if enrich_on else None
    res = train_linear_head(x, y, 3, cfg, seed=0, generator=G, noise=NoiseSpec(dim=8))
    assert res.support_accuracy == 1.0
    assert res.rows_per_epoch == (60 if enrich_on else 30)


def test_generator_trained_unless_frozen():
    x, y = _clusters()
    for freeze, expect_change in ((False, True), (True, False)):
        G = build_generator(16, 8, 0)
        before = parameter_hash(G)
        cfg = ClassifierConfig(epochs=3, freeze_enriched_set=freeze)
        train_linear_head(x, y, 3, cfg, seed=0, generator=G, noise=NoiseSpec(dim=8))
        assert (parameter_hash(G) != before) is expect_change


def test_head_errors():
    x, y = _clusters()
    with pytest.raises(ValueError, match="label outside"):
        train_linear_head(x, y + 1, 3, ClassifierConfig(enrich=False), seed=0)
    with pytest.raises(ValueError, match="without a generator"):
        train_linear_head(x, y, 3, ClassifierConfig(enrich=True), seed=0)


def test_classifier_keeps_backbone_frozen():
    cfg = EncoderConfig(stage_widths=[4, 8], projection_dim=16)
    encoder = build_encoder(cfg, seed=0)
    ds = _labelled(3, 8, size=16)
    ep = sample_episode(ds, 3, 3, 2, seed=0)
    before = parameter_hash(encoder)
    res = finetune_classifier(encoder, build_generator(16, 8, 0), ds.tiles, ep,
                              ClassifierConfig(epochs=2), seed=0, noise=NoiseSpec(dim=8))
    assert parameter_hash(encoder) == before
    assert 0.0 <= res.query_accuracy <= 1.0


# -- schedules and metrics


def test_one_cycle_shape_at_desk_peak():
    total, peak = 20 * 50, 6e-5
    ps = peak_step_of(total)
    lrs = [one_cycle_lr(s, total, peak) for s in range(total)]
    assert lrs[0] < peak and lrs[0] == pytest.approx(peak / 25)
    assert lrs[ps] == peak
    assert lrs[-1] < lrs[0] and lrs[-1] == pytest.approx(peak / 100)
    assert all(a <= b for a, b in zip(lrs[:ps], lrs[1:ps + 1]))
    assert all(a >= b for a, b in zip(lrs[ps:], lrs[ps + 1:]))
    assert ps == 300


def test_one_cycle_errors():
    with pytest.raises(ValueError):
        one_cycle_lr(0, 1, 1e-3)
    with pytest.raises(ValueError):
        one_cycle_lr(10, 10, 1e-3)


def test_accuracy_and_ties():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert predict([[0.3, 0.3]]).tolist() == [0]
    assert accuracy(np.array([[0.3, 0.3], [0.1, 0.9]]), [0, 1]) == 1.0
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


@settings(max_examples=100, deadline=None)
@given(logits=st.lists(st.floats(-5, 5), min_size=2, max_size=8), scale=st.floats(0.01, 100))
def test_argmax_invariant_to_positive_rescaling(logits, scale):
    x = np.array([logits])
    assert predict(x).tolist() == predict(x * scale).tolist()


def test_aggregate_trials():
    mean, std = aggregate_trials([0.5, 0.7])
    assert mean == pytest.approx(0.6)
    assert std == pytest.approx(math.sqrt(0.02), abs=1e-12)
    assert std == pytest.approx(0.1414, abs=5e-5)
    assert aggregate_trials([0.4]) == (0.4, 0.0)
    with pytest.raises(ValueError):
        aggregate_trials([])


def test_miou_hand_case():
    per_class, mean = miou([[0, 1], [1, 1]], [[0, 0], [1, 1]], 2)
    assert per_class == [0.5, 2 / 3]
    assert mean == 7 / 12


def test_miou_perfect_and_ignore():
    gt = np.array([[0, 1], [2, 255]])
    assert miou(np.array([[0, 1], [2, 0]]), gt, 3) == ([1.0, 1.0, 1.0], 1.0)
    with pytest.raises(ValueError, match="no valid pixels"):
        miou(np.zeros((2, 2)), np.full((2, 2), 255), 2)
    with pytest.raises(ValueError):
        miou(np.zeros((2, 2)), np.full((2, 2), 3), 2)
    with pytest.raises(ValueError):
        miou(np.zeros((2, 3)), np.zeros((2, 2)), 2)


def test_miou_skips_zero_union_classes():
    per_class, mean = miou([[0, 0]], [[0, 0]], 3)
    assert per_class == [1.0, None, None] and mean == 1.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(2, 5))
def test_miou_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, n, (6, 6))
    pred = rng.integers(0, n, (6, 6))
    perm = rng.permutation(n)
    a = miou(pred, gt, n)
    b = miou(perm[pred], perm[gt], n)
    assert b[1] == pytest.approx(a[1], abs=1e-12)
    assert [b[0][perm[c]] for c in range(n)] == a[0]


def test_ignored_pixels_do_not_change_loss():
    logits = torch.randn(2, 3, 4, 4, generator=nc.torch_generator(0))
    y = torch.randint(0, 3, (2, 4, 4), generator=nc.torch_generator(1))
    y[:, 0] = 255
    other = logits.clone()
    other[:, :, 0] = torch.randn(2, 3, 4, generator=nc.torch_generator(2))
    assert torch.equal(nc.softmax_cross_entropy(logits, y, ignore_index=255),
                       nc.softmax_cross_entropy(other, y, ignore_index=255))


# -- segmentation decoder


SEG_ENC = EncoderConfig(stage_widths=[8, 16, 32, 64], projection_dim=16)


def test_decoder_layout_and_output_size():
    encoder = build_encoder(SEG_ENC, seed=0)
    decoder = build_decoder(SEG_ENC, n_classes=4, seed=0)
    assert len(decoder.blocks) == N_UP == 5
    b, skips = frozen_maps(encoder, np.random.default_rng(0).random((2, 4, 32, 32), dtype=np.float32))
    assert b.shape == (2, 64, 1, 1)
    assert decoder(b, skips).shape == (2, 4, 32, 32)
    with pytest.raises(ValueError, match="divisible"):
        frozen_maps(encoder, np.zeros((1, 4, 24, 24), np.float32))


def test_bottleneck_shift_is_spatially_constant():
    G = build_generator(64, 8, 0)
    b = torch.rand(2, 64, 3, 3, generator=nc.torch_generator(0))
    z = torch.randn(2, 8, generator=nc.torch_generator(1))
    delta = perturb_bottleneck(b, G, z) - b
    assert torch.allclose(delta, delta[:, :, :1, :1].expand_as(delta), atol=1e-6)
    assert delta.abs().sum() > 0


def test_segmenter_mask_tile_mismatch():
    encoder = build_encoder(SEG_ENC, seed=0)
    tiles = np.zeros((4, 4, 32, 32), np.float32)
    ds = Dataset(Path("."), tiles, np.zeros(4, np.int64), np.zeros((4, 16, 16), np.uint8))
    ep = sample_segmentation_episode(Dataset(Path("."), tiles, np.zeros(4, np.int64),
                                             np.zeros((4, 32, 32), np.uint8)), 2, 2)
    with pytest.raises(ValueError, match="do not pair up"):
        finetune_segmenter(encoder, None, ds.tiles, ds.masks, ep, 2, SegConfig(enrich=False), 0)


def test_segmenter_short_run_freezes_backbone():
    encoder = build_encoder(SEG_ENC, seed=0)
    rng = np.random.default_rng(0)
    tiles = rng.random((6, 4, 32, 32), dtype=np.float32)
    masks = (tiles[:, 0] > 0.5).astype(np.uint8)
    masks[:, :2] = 255
    ds = Dataset(Path("."), tiles, np.zeros(6, np.int64), masks)
    ep = sample_segmentation_episode(ds, 4, 2, seed=0)
    before = parameter_hash(encoder)
    res = finetune_segmenter(encoder, build_generator(64, 8, 0), tiles, masks, ep, 2,
                             SegConfig(epochs=1, steps_per_epoch=4, batch_size=2), 0, NoiseSpec(dim=8))
    assert parameter_hash(encoder) == before
    assert len(res.losses) == 4 and all(np.isfinite(res.losses))
    assert 0.0 <= res.train_miou <= 1.0
