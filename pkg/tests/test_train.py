import math

import numpy as np
import pytest
import torch

from protoreid.container import ContainerError
from protoreid.data import BatchSpec, SyntheticConfig, epoch_batches, generate_synthetic
from protoreid.losses import LossConfig, TripletConfig
from protoreid.model import ModelConfig, ReIDModel
from protoreid.nets import BackboneConfig, PartConfig
from protoreid.train import (
    OptimConfig,
    Trainer,
    TrainingError,
    load_checkpoint,
    lr_at,
    param_groups,
    save_checkpoint,
    uniform_baseline,
)


@pytest.mark.parametrize(
    "epoch, expected", [(0, 3.5e-5), (5, 1.925e-4), (10, 3.5e-4), (29, 3.5e-4), (30, 3.5e-5), (60, 3.5e-6), (69, 3.5e-6)]
)
def test_lr_schedule_values(epoch, expected):
    assert lr_at(epoch, OptimConfig()) == pytest.approx(expected, rel=1e-12)


def test_lr_schedule_range_and_shape():
    cfg = OptimConfig()
    with pytest.raises(ValueError):
        lr_at(-1, cfg)
    with pytest.raises(ValueError):
        lr_at(70, cfg)
    lrs = [lr_at(e, cfg) for e in range(70)]
    assert all(b > a for a, b in zip(lrs[:10], lrs[1:10]))
    assert all(b <= a for a, b in zip(lrs[10:], lrs[11:]))


def test_optim_config_invariants():
    assert OptimConfig(warmup_start_lr=1.0, base_lr=0.1).validate()
    assert OptimConfig(decay_factor=1.0).validate()
    assert OptimConfig().validate() == []


# ---------------------------------------------------------------- loop


BB = BackboneConfig(widths=(4, 8, 8, 16))


def tiny(arch="pronet", epochs=2, seed=0, eps=0.1, triplet=True, num_ids=4):
    ds = generate_synthetic(SyntheticConfig(num_ids=num_ids, images_per_id=8, num_cameras=2, seed=3))
    parts = PartConfig(num_parts=2, part_dim=4, reduction=4)
    model = ReIDModel(ModelConfig(arch, BB, parts=parts), ds.num_identities, seed=seed)
    optim = OptimConfig(total_epochs=epochs, warmup_epochs=1, decay_epochs=[epochs - 1], seed=seed)
    loss = LossConfig(eps, TripletConfig(enabled=triplet))
    return Trainer(model, ds, optim, BatchSpec(2, 4), loss, None, {"note": "tiny"})


def test_one_epoch_deterministic():
    a, b = tiny(epochs=1), tiny(epochs=1)
    la, lb = a.fit(), b.fit()
    assert len(la) == 32 // 8
    assert [r["L_total"] for r in la] == [r["L_total"] for r in lb]
    for (k, va), vb in zip(a.model.state_dict().items(), b.model.state_dict().values()):
        assert torch.equal(va, vb), k


def test_bias_stays_zero_and_log_has_all_columns(tmp_path):
    tr = tiny("pronetpp", epochs=1)
    tr.fit(run_dir=tmp_path)
    for bank in tr.model.banks():
        assert not bank.bias.any()
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,epoch,lr,L_id,L_tri,L_part,L_id_m,L_tri_m,L_total"
    assert (tmp_path / "checkpoint" / "manifest.json").is_file()


def test_ablation_runs_share_batch_sequence():
    ds = tiny().train_set
    spec = BatchSpec(2, 4)
    seq = lambda: [b.indices.tolist() for e in range(2) for b in epoch_batches(ds, spec, 0, e, None)]
    assert seq() == seq()
    # the trainer never consumes the sampler stream differently depending on the loss
    a, b = tiny(eps=0.1), tiny(eps=0.0)
    la, lb = a.fit(), b.fit()
    assert [r["step"] for r in la] == [r["step"] for r in lb]
    assert la[0]["L_tri"] == lb[0]["L_tri"]  # first forward pass is identical
    assert la[0]["L_id"] != lb[0]["L_id"]


def test_weight_decay_scope():
    tr = tiny("pronetpp", epochs=1)
    names = {id(p): n for n, p in tr.model.named_parameters()}
    decay, no_decay = param_groups(tr.model, 5e-4)
    no_decay_names = {names[id(p)] for p in no_decay["params"]}
    assert "neck.weight" in no_decay_names and "pool.raw" in no_decay_names
    assert any(".raw" in n and n.startswith("parts") for n in no_decay_names)
    assert "backbone.body.1.weight" in no_decay_names  # first BatchNorm
    assert "classifier.weight" not in no_decay_names
    assert "backbone.body.0.weight" not in no_decay_names


def test_frozen_gradient_step_only_decays_weights():
    # with zero gradients Adam's moments stay zero, so only the L2 term can
    # move a parameter
    tr = tiny("pronetpp", epochs=1)
    decayed = {id(p) for p in tr.optimizer.param_groups[0]["params"]}
    before = {n: p.detach().clone() for n, p in tr.model.named_parameters()}
    for p in tr.model.parameters():
        p.grad = torch.zeros_like(p)
    tr.optimizer.step()
    for n, p in tr.model.named_parameters():
        moved = not torch.equal(before[n], p.detach())
        if id(p) in decayed:
            assert moved or not before[n].any(), n
        else:
            assert not moved, n


def test_non_finite_loss_aborts_with_batch_indices(tmp_path):
    tr = tiny(epochs=1)
    with torch.no_grad():
        tr.model.classifier.weight.fill_(float("nan"))
    with pytest.raises(TrainingError, match="batch record indices"):
        tr.fit(run_dir=tmp_path)
    assert "batch record indices" in (tmp_path / "failure.txt").read_text()


def test_too_few_identities():
    ds = generate_synthetic(SyntheticConfig(num_ids=2, images_per_id=4, num_cameras=2))
    model = ReIDModel(ModelConfig("pronet", BB), 2)
    with pytest.raises(TrainingError):
        Trainer(model, ds, OptimConfig(), BatchSpec(4, 2), LossConfig())


def test_uniform_baseline():
    assert uniform_baseline(64) == pytest.approx(math.log(64))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    tr = tiny("pronetpp", epochs=2)
    tr.fit(until=1)
    ck = tr.checkpoint()
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "ck"))
    assert back.epoch == ck.epoch and back.step == ck.step
    assert back.config == ck.config and back.rng == ck.rng
    assert set(back.model_state) == set(ck.model_state)
    for k, v in ck.model_state.items():
        assert back.model_state[k].tobytes() == v.astype(back.model_state[k].dtype).tobytes(), k
        if v.dtype == np.float32:
            assert np.array_equal(back.model_state[k], v)
    for k, v in ck.optim_state.items():
        assert np.array_equal(back.optim_state[k], v.astype(back.optim_state[k].dtype)), k


def test_resume_matches_uninterrupted(tmp_path):
    full = tiny(epochs=4)
    full.fit()
    first = tiny(epochs=4)
    first.fit(until=2)
    path = save_checkpoint(first.checkpoint(), tmp_path / "mid")
    resumed = tiny(epochs=4)
    resumed.restore(load_checkpoint(path))
    resumed.fit()
    assert [r["L_total"] for r in resumed.log] == [r["L_total"] for r in full.log[len(first.log):]]
    for k, v in full.model.state_dict().items():
        assert torch.equal(v, resumed.model.state_dict()[k]), k


def test_missing_array_is_named(tmp_path):
    tr = tiny(epochs=1)
    path = save_checkpoint(tr.checkpoint(), tmp_path / "ck")
    (path / "model_neck.weight.bin").unlink()
    with pytest.raises(ContainerError, match="neck.weight"):
        load_checkpoint(path)


def test_wrong_kind_is_rejected(tmp_path):
    from protoreid.container import save_features

    save_features(tmp_path / "feat", np.zeros((2, 3)), [1, 2], [0, 1])
    with pytest.raises(ContainerError, match="kind"):
        load_checkpoint(tmp_path / "feat")
