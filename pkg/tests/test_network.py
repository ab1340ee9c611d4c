import csv

import numpy as np
import pytest
import torch
from torch import nn

from cascade_seg.data_pipeline import PatchSample
from cascade_seg.network import (
    CheckpointError,
    TrainConfig,
    UNetSpec,
    build_unet,
    load_model,
    parameter_count,
    read_checkpoint_header,
    save_model,
    soft_dice_loss,
    train_stage,
)

SMALL = UNetSpec(in_channels=4, depth=3, base_width=4)


def random_patches(n, channels=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = rng.standard_normal((channels, 32, 32, 32)).astype(np.float32)
        t = (x[0] > 0.5).astype(np.uint8)
        out.append(PatchSample(x, t, (0, 0, 0), "r", "tumor", (16, 16, 16)))
    return out


class TestArchitecture:
    def test_shape_and_range(self):
        model = build_unet(UNetSpec(in_channels=4, depth=4, base_width=32), seed=0).eval()
        with torch.no_grad():
            y = model(torch.zeros(1, 4, 32, 32, 32))
        assert y.shape == (1, 1, 32, 32, 32)
        assert float(y.min()) > 0 and float(y.max()) < 1

    @pytest.mark.parametrize("cin", [4, 5, 7])
    def test_first_layer_channels(self, cin):
        model = build_unet(UNetSpec(in_channels=cin, base_width=4))
        assert model.first_conv.in_channels == cin
        assert model.first_conv.weight.shape[1] == cin

    def test_depth_must_divide_patch(self):
        with pytest.raises(ValueError, match="divisible"):
            UNetSpec(depth=7)

    def test_layer_pattern(self):
        model = build_unet(SMALL)
        mods = [m for m in model.modules() if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.BatchNorm3d, nn.ReLU))]
        convs = [i for i, m in enumerate(mods) if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d))]
        for i in convs[:-1]:
            assert isinstance(mods[i + 1], nn.BatchNorm3d) and isinstance(mods[i + 2], nn.ReLU)
        assert mods[convs[-1]] is model.head

    @pytest.mark.parametrize("spec", [SMALL, UNetSpec(5, 4, 8), UNetSpec(7, 2, 3, convs_per_level=3), UNetSpec(4, 4, 32)])
    def test_parameter_count_closed_form(self, spec):
        assert parameter_count(spec) == sum(p.numel() for p in build_unet(spec).parameters())

    def test_parameter_count_monotone_in_width(self):
        counts = [parameter_count(UNetSpec(base_width=w)) for w in (4, 8, 16, 32, 64)]
        assert counts == sorted(counts) and len(set(counts)) == len(counts)

    def test_deterministic_init(self):
        a, b = build_unet(SMALL, seed=3), build_unet(SMALL, seed=3)
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)

    def test_open_unit_interval_on_random_inputs(self):
        model = build_unet(SMALL, seed=0).eval()
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            lo, hi = 1.0, 0.0
            for _ in range(10):
                y = model(torch.randn(100, 4, 32, 32, 32, generator=g) * 3)
                lo, hi = min(lo, float(y.min())), max(hi, float(y.max()))
        assert lo > 0 and hi < 1


class TestSoftDice:
    def test_perfect_match(self):
        t = torch.tensor([1.0, 0.0, 1.0, 1.0])
        assert float(soft_dice_loss(t, t)) == 0.0

    def test_both_empty(self):
        z = torch.zeros(8)
        assert float(soft_dice_loss(z, z)) == 0.0

    def test_disjoint_pair(self):
        loss = soft_dice_loss(torch.tensor([1.0, 0.0], dtype=torch.float64), torch.tensor([0.0, 1.0], dtype=torch.float64), 1.0)
        assert float(loss) == pytest.approx(2 / 3, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            soft_dice_loss(torch.zeros(3), torch.zeros(4))

    def test_range_and_permutation_symmetry(self, rng):
        for _ in range(20):
            p = torch.from_numpy(rng.random(64))
            t = torch.from_numpy((rng.random(64) > 0.5).astype(float))
            loss = float(soft_dice_loss(p, t))
            assert 0 <= loss < 1
            perm = torch.from_numpy(rng.permutation(64))
            assert float(soft_dice_loss(p[perm], t[perm])) == pytest.approx(loss, abs=1e-12)


def test_tiny_lr_step_is_stable():
    torch.manual_seed(0)
    model = build_unet(SMALL, seed=1)
    x = torch.randn(4, 4, 32, 32, 32)
    y = (torch.rand(4, 1, 32, 32, 32) > 0.7).float()
    opt = torch.optim.NAdam(model.parameters(), lr=1e-6)
    model.train()
    before = soft_dice_loss(model(x), y)
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        after = soft_dice_loss(model(x), y)
    assert abs(float(after) - float(before.detach())) < 1e-2


class TestTraining:
    def test_plateau_stop(self, tmp_path):
        model = build_unet(SMALL, seed=0)
        for m in model.modules():
            if isinstance(m, nn.BatchNorm3d):
                m.momentum = 0.0  # frozen running statistics
        data = random_patches(4)
        cfg = TrainConfig(learning_rate=0.0, max_epochs=50, plateau_patience=3, batch_size=4, checkpoint_dir=tmp_path)
        res = train_stage(model, data, data, cfg, name="frozen")
        assert len(res.history) == 3 + 1
        assert res.stopped_early
        rows = list(csv.DictReader(open(tmp_path / "frozen_history.csv")))
        assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "wall_seconds"]
        assert len(rows) == 4
        assert (tmp_path / "frozen.cseg").is_file()

    def test_max_epochs_cap_and_learning(self):
        model = build_unet(SMALL, seed=0)
        data = random_patches(8)
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=4, plateau_patience=10, batch_size=4)
        res = train_stage(model, data, data, cfg)
        assert len(res.history) <= 4
        assert res.history[-1].train_loss < res.history[0].train_loss

    def test_deterministic(self):
        data = random_patches(4)
        cfg = TrainConfig(learning_rate=1e-3, max_epochs=2, batch_size=2, seed=5)
        a = train_stage(build_unet(SMALL, seed=0), data, data, cfg)
        b = train_stage(build_unet(SMALL, seed=0), data, data, cfg)
        assert [r.train_loss for r in a.history] == [r.train_loss for r in b.history]

    def test_per_epoch_stream(self):
        seen = []

        def stream(epoch):
            seen.append(epoch)
            return random_patches(2, seed=epoch)

        cfg = TrainConfig(learning_rate=1e-3, max_epochs=3, batch_size=2)
        train_stage(build_unet(SMALL, seed=0), stream, random_patches(2), cfg)
        assert {0, 1, 2} <= set(seen)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            train_stage(build_unet(SMALL), random_patches(2, channels=5), random_patches(2), TrainConfig())

    def test_empty_stream(self):
        with pytest.raises(ValueError, match="empty"):
            train_stage(build_unet(SMALL), [], random_patches(2), TrainConfig())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = UNetSpec(in_channels=7, depth=3, base_width=4)
        model = build_unet(spec, seed=2).eval()
        probe = torch.randn(2, 7, 32, 32, 32, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            ref = model(probe)
        path = save_model(model, tmp_path / "m.cseg", meta={"stage": "post_et"})
        loaded, meta = load_model(path)
        assert loaded.spec == spec
        assert meta == {"stage": "post_et"}
        with torch.no_grad():
            assert torch.equal(loaded(probe), ref)
        assert path.read_bytes().startswith(b"CSEG-MODEL-1\n")
        assert read_checkpoint_header(path)["spec"]["in_channels"] == 7

    def test_corrupted_magic(self, tmp_path):
        path = save_model(build_unet(SMALL), tmp_path / "m.cseg")
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_model(path)

    def test_spec_mismatch(self, tmp_path):
        path = save_model(build_unet(SMALL), tmp_path / "m.cseg")
        with pytest.raises(CheckpointError, match="does not match"):
            load_model(path, expected_spec=UNetSpec(in_channels=5, depth=3, base_width=4))
