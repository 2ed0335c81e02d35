import filecmp
import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from genco import numcore as nc
from genco.contrastive import NoiseSpec
from genco.dataio import AugmentConfig, SynthSpec, load_dataset, synth_dataset
from genco.encoder import EncoderConfig, build_encoder
from genco.pretrain import (PretrainConfig, TrainState, epoch_batches, load_pretrained, lr_at_epoch,
                            make_views, pretrain_run, pretrain_step, shuffled_key_forward, split_forward)


def tiny(**kw) -> PretrainConfig:
    base = dict(encoder=EncoderConfig(stage_widths=[4, 8], projection_dim=16),
                augment=AugmentConfig(output_size=16), noise=NoiseSpec(dim=8), bank_capacity=32,
                batch_size=8, bn_splits=2, epochs=4, base_lr=0.03, lr_milestones=[(3, 0.003)],
                checkpoint_every=2, momentum=0.99)
    base.update(kw)
    return PretrainConfig(**base)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("pre") / "d"
    synth_dataset(SynthSpec(n_classes=2, n_per_class=12, size=16, seed=1), root)
    return load_dataset(root)


# -- schedule


def test_step_schedule_at_boundaries():
    cfg = PretrainConfig(epochs=200, base_lr=0.3, lr_milestones=[(140, 0.03), (160, 0.003)])
    assert lr_at_epoch(cfg, 0) == 0.3
    assert lr_at_epoch(cfg, 139) == 0.3
    assert lr_at_epoch(cfg, 140) == 0.03
    assert lr_at_epoch(cfg, 159) == 0.03
    assert lr_at_epoch(cfg, 160) == 0.003
    assert lr_at_epoch(cfg, 199) == 0.003


def test_schedule_without_milestones_and_single_milestone():
    assert all(lr_at_epoch(PretrainConfig(epochs=5, lr_milestones=[]), e) == 0.3 for e in range(5))
    cfg = PretrainConfig(epochs=4, base_lr=1.0, lr_milestones=[(2, 0.1)])
    assert [lr_at_epoch(cfg, e) for e in range(4)] == [1.0, 1.0, 0.1, 0.1]


def test_schedule_errors():
    with pytest.raises(ValueError, match="increasing"):
        PretrainConfig(lr_milestones=[(5, 0.1), (5, 0.01)])
    with pytest.raises(ValueError):
        PretrainConfig(lr_milestones=[(5, -0.1)])
    with pytest.raises(ValueError, match="divisible"):
        PretrainConfig(batch_size=10, bn_splits=4)
    with pytest.raises(ValueError):
        lr_at_epoch(PretrainConfig(epochs=3), 3)


def test_config_dict_roundtrip():
    cfg = tiny(symmetric_negatives=True)
    assert PretrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# -- single steps


def test_first_step_has_zero_loss_and_fills_bank(data):
    cfg = tiny(bank_capacity=8)
    state = TrainState(cfg)
    ids = np.arange(8)
    assert pretrain_step(state, data.tiles[ids], ids) == 0.0
    assert state.bank.fill_count == 8
    assert pretrain_step(state, data.tiles[ids], ids) > 0.0


def test_bank_fill_follows_min_rule(data):
    state = TrainState(tiny(bank_capacity=20))
    ids = np.arange(8)
    for s in range(1, 5):
        pretrain_step(state, data.tiles[ids], ids)
        assert state.bank.fill_count == min(s * 8, 20)


def test_momentum_encoder_stays_gradient_free_and_lags(data):
    state = TrainState(tiny())
    ids = np.arange(8)
    for _ in range(3):
        pretrain_step(state, data.tiles[ids], ids)
    assert all(not p.requires_grad and p.grad is None for p in state.pair.offline.parameters())
    on = torch.cat([p.detach().flatten() for p in state.pair.online.parameters()])
    off = torch.cat([p.detach().flatten() for p in state.pair.offline.parameters()])
    assert not torch.equal(on, off)


def test_bank_keys_are_unit_and_detached(data):
    state = TrainState(tiny())
    ids = np.arange(8)
    pretrain_step(state, data.tiles[ids], ids)
    keys = state.bank.negatives()
    assert not keys.requires_grad
    assert torch.allclose(keys.norm(dim=1), torch.ones(8), atol=1e-5)


def test_shuffled_key_forward_restores_order():
    model = build_encoder(EncoderConfig(stage_widths=[4, 8], projection_dim=16), seed=0).eval()
    x = torch.rand(8, 4, 16, 16)
    # in eval mode batch statistics play no role, so the permutation must cancel out
    assert torch.allclose(shuffled_key_forward(model, x, 2, key=5), split_forward(model, x, 2), atol=1e-6)


def test_no_generator_matches_reference_moco(data):
    """Reference loop written against plain torch: SGD, cross-entropy with the positive at index 0."""
    cfg = tiny(no_generator=True, bank_capacity=16)
    state = TrainState(cfg)
    ref = TrainState(cfg)
    opt = torch.optim.SGD(ref.pair.online.parameters(), lr=cfg.base_lr, momentum=cfg.sgd_momentum,
                          weight_decay=cfg.weight_decay)
    bank = []
    for step in range(4):
        ids = np.arange(8) + 8 * (step % 3)
        got = pretrain_step(state, data.tiles[ids], ids)

        xq, xk = make_views(data.tiles[ids], ids, 0, cfg)
        q = split_forward(ref.pair.online, xq, cfg.bn_splits)
        with torch.no_grad():
            k = shuffled_key_forward(ref.pair.offline, xk, cfg.bn_splits,
                                     nc.derive_seed(cfg.seed, "bn_shuffle", step))
        if bank:
            negs = torch.cat(bank)[-cfg.bank_capacity:]
            logits = torch.cat([(q * k).sum(1, keepdim=True), q @ negs.T], dim=1) / cfg.tau
            loss = F.cross_entropy(logits, torch.zeros(8, dtype=torch.long))
        else:
            loss = (q * 0).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            for pk, pq in zip(ref.pair.offline.parameters(), ref.pair.online.parameters()):
                pk.mul_(cfg.momentum).add_(pq, alpha=1 - cfg.momentum)
        bank.append(k)
        assert got == pytest.approx(loss.item(), rel=1e-4, abs=1e-6)


def test_arms_diverge_only_after_first_generator_loss(data):
    moco, gen = TrainState(tiny(no_generator=True)), TrainState(tiny())
    ids = np.arange(8)
    # empty bank: both losses are zero and the encoders stay in lockstep
    assert pretrain_step(moco, data.tiles[ids], ids) == pretrain_step(gen, data.tiles[ids], ids) == 0.0
    assert all(torch.equal(a, b) for a, b in zip(moco.encoder.parameters(), gen.encoder.parameters()))
    assert pretrain_step(moco, data.tiles[ids], ids) != pretrain_step(gen, data.tiles[ids], ids)


def test_no_generator_leaves_generator_untouched(data):
    state = TrainState(tiny(no_generator=True))
    before = [p.clone() for p in state.generator.parameters()]
    ids = np.arange(8)
    for _ in range(3):
        pretrain_step(state, data.tiles[ids], ids)
    assert all(torch.equal(a, b) for a, b in zip(before, state.generator.parameters()))


def test_generator_is_trained_jointly(data):
    state = TrainState(tiny())
    before = [p.clone() for p in state.generator.parameters()]
    ids = np.arange(8)
    for _ in range(3):
        pretrain_step(state, data.tiles[ids], ids)
    assert not all(torch.equal(a, b) for a, b in zip(before, state.generator.parameters()))


def test_epoch_batches_drop_partial_and_are_keyed():
    b = epoch_batches(20, 8, seed=0, epoch=0)
    assert [len(x) for x in b] == [8, 8]
    assert len(set(np.concatenate(b).tolist())) == 16
    assert all(np.array_equal(x, y) for x, y in zip(b, epoch_batches(20, 8, 0, 0)))
    assert not np.array_equal(b[0], epoch_batches(20, 8, 0, 1)[0])


# -- runs and checkpoints


def _same_files(a, b):
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    return not mismatch and not errors


def test_run_is_deterministic(tmp_path, data):
    cfg = tiny()
    pretrain_run(cfg, tmp_path / "a", dataset=data)
    pretrain_run(cfg, tmp_path / "b", dataset=data)
    assert _same_files(tmp_path / "a" / "final", tmp_path / "b" / "final")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert [e["epoch"] for e in summary["epochs"]] == [0, 1, 2, 3]
    assert (tmp_path / "a" / "checkpoints" / "epoch_0002").is_dir()


def test_resume_matches_uninterrupted_run(tmp_path, data):
    cfg = tiny()
    pretrain_run(cfg, tmp_path / "full", dataset=data)
    pretrain_run(cfg, tmp_path / "resumed", resume=tmp_path / "full" / "checkpoints" / "epoch_0002", dataset=data)
    assert _same_files(tmp_path / "full" / "final", tmp_path / "resumed" / "final")
    full = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()
    resumed = (tmp_path / "resumed" / "metrics.jsonl").read_text().splitlines()
    assert resumed == [l for l in full if json.loads(l)["epoch"] >= 2]


def test_checkpoint_then_step_is_bitwise(tmp_path, data):
    state = TrainState(tiny())
    ids = np.arange(8)
    pretrain_step(state, data.tiles[ids], ids)
    state.save(tmp_path / "ck")
    back = TrainState.load(tmp_path / "ck")
    a = pretrain_step(state, data.tiles[ids + 8], ids + 8)
    b = pretrain_step(back, data.tiles[ids + 8], ids + 8)
    assert a == b
    ta, tb = state.tensors(), back.tensors()
    assert all(torch.equal(ta[k], tb[k]) for k in ta)


def test_load_pretrained_roundtrip(tmp_path, data):
    final = pretrain_run(tiny(epochs=1), tmp_path / "r", dataset=data, provenance={"seed": 0})
    encoder, G, noise, meta = load_pretrained(final)
    assert not encoder.training
    assert noise == NoiseSpec(dim=8)
    assert meta["provenance"] == {"seed": 0}
    assert encoder.forward_features(torch.rand(2, 4, 16, 16)).shape == (2, 8)
    with pytest.raises(nc.CheckpointError):
        nc.save_checkpoint(tmp_path / "other", {"x": torch.zeros(1)}, {"kind": "classifier"})
        load_pretrained(tmp_path / "other")


def test_run_input_errors(tmp_path, data):
    with pytest.raises(ValueError, match="channels"):
        pretrain_run(tiny(encoder=EncoderConfig(in_channels=3, stage_widths=[4], projection_dim=8)),
                     tmp_path / "x", dataset=data)
    with pytest.raises(ValueError, match="smaller than batch_size"):
        pretrain_run(tiny(batch_size=32, bn_splits=4), tmp_path / "y", dataset=data)
