import struct

import numpy as np
import pytest

from deepnose import nn_core as nn
from deepnose.errors import BadMagic, InvalidConfig, ShapeMismatch, VersionMismatch
from deepnose.model import (
    DeepNoseConfig, build_model, checkpoint_bytes, checkpoint_from_bytes, load_checkpoint,
    save_checkpoint,
)
from deepnose.molecule_io import parse_sdf
from deepnose.synthetic import random_molecule
from deepnose.voxelizer import center_molecule, voxelize

from conftest import DATA

# L=16 also floors to 2 after three halvings; keeps grad checks cheap.
MICRO = DeepNoseConfig(block_channels=(3, 4, 4, 5), grid_L=16, hidden=7, outputs=4, n_dirs=2, n_axial=2)


def voxels(rng, grid, n_mol=2, L=18):
    mols = [center_molecule(random_molecule(rng, 7, cid=i)) for i in range(n_mol)]
    return np.stack([voxelize(m, grid, box=float(L)).data for m in mols])


def relative(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


class TestArchitecture:
    def test_channel_sequence(self):
        m = build_model(DeepNoseConfig(), seed=0)
        seq = [m.convs[0].weight.shape[1]] + [c.weight.shape[0] for c in m.convs]
        assert seq == [6, 12, 12, 24, 24, 48, 48, 96, 96]
        assert all(c.weight.shape[2:] == (3, 3, 3) for c in m.convs)

    def test_head_shapes(self):
        m = build_model(DeepNoseConfig(), seed=0)
        assert m.fc1.weight.shape == (256, 96)
        assert m.fc2.weight.shape == (654, 256)

    def test_same_seed_bit_identical(self):
        a, b = build_model(MICRO, seed=11), build_model(MICRO, seed=11)
        for (na, xa), (nb, xb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb
            np.testing.assert_array_equal(xa, xb)
        assert build_model(MICRO, seed=12).digest() != a.digest()

    def test_invalid_grid_size(self):
        with pytest.raises(InvalidConfig):
            DeepNoseConfig(grid_L=24)
        with pytest.raises(InvalidConfig):
            DeepNoseConfig(dropout_rate=1.0)

    def test_block4_spatial_shape(self, rng, tiny_grid):
        m = build_model(DeepNoseConfig(outputs=3), seed=0)
        shapes = []
        x = voxels(rng, tiny_grid, 1)[0]
        with nn.no_grad():
            out = m.trunk(x.astype(np.float32), "eval", block_outputs=shapes)
        assert [s[1:] for s in shapes] == [(12, 18, 18, 18), (24, 9, 9, 9), (48, 4, 4, 4), (96, 2, 2, 2)]
        assert out.shape == (4, 96, 1, 1, 1)

    def test_wrong_voxel_shape(self, small_model):
        with pytest.raises(ShapeMismatch):
            small_model.forward_features(np.zeros((1, 2, 6, 16, 16, 16)))
        with pytest.raises(ShapeMismatch):
            small_model.forward_logits(np.zeros((1, 95)))


class TestForward:
    def test_orientation_permutation_invariance(self, rng, small_model, small_grid):
        x = voxels(rng, small_grid, 2)
        perm = rng.permutation(x.shape[1])
        with nn.no_grad():
            a = small_model.forward_features(x).data
            b = small_model.forward_features(x[:, perm]).data
        assert relative(b, a) <= 1e-6

    def test_zero_input_zero_bias(self):
        m = build_model(MICRO, seed=0)
        with nn.no_grad():
            f = m.forward_features(np.zeros((2, 3, 6, 16, 16, 16)))
            z = m.forward_logits(np.zeros((2, 5)))
        np.testing.assert_array_equal(f.data, 0)
        np.testing.assert_array_equal(z.data, 0)

    def test_eval_dropout_identity(self, rng):
        m = build_model(MICRO, seed=0)
        f = rng.normal(size=(3, 5)).astype(np.float32)
        with nn.no_grad():
            a = m.forward_logits(f, "eval", np.random.default_rng(0)).data
            b = m.forward_logits(f, "eval", np.random.default_rng(1)).data
        np.testing.assert_array_equal(a, b)

    def test_streamed_matches_batched(self, rng, small_model, small_grid):
        mol = center_molecule(random_molecule(rng, 9))
        with nn.no_grad():
            full = small_model.forward_features(voxelize(mol, small_grid).data[None]).data[0]
        streamed = small_model.molecule_features(mol, small_grid, slab=7)
        np.testing.assert_allclose(streamed, full, rtol=1e-5, atol=1e-7)

    def test_non_finite_features_rejected(self, small_model):
        with pytest.raises(ValueError):
            small_model.forward_logits(np.full((1, 96), np.nan))


class TestGradCheck:
    def _check(self, model, x, rng, tensors, per):
        # Empty space gives exact max-pool ties; light noise breaks them.
        x = x + 0.05 * rng.normal(size=x.shape)
        for p in model.parameters():
            if p.data.ndim == 1:
                p.data[:] = rng.normal(scale=0.1, size=p.data.shape)
        labels = (rng.random((x.shape[0], model.config.outputs)) < 0.5).astype(float)
        mask = np.ones_like(labels)
        mask[0, 0] = 0

        def loss():
            z = model.forward_logits(model.forward_features(x, "train"), "eval")
            return nn.masked_bce_with_logits(z, labels, mask)

        # Many ReLUs: a few probes straddle a kink; those are skipped, not scored.
        # floor=1e-5 sits above the round-off of a step-1e-6 difference.
        rep = nn.grad_check(loss, tensors, tol=1e-4, max_per_tensor=per, step=1e-6, rng=rng,
                            floor=1e-5, kink_tol=1e-4)
        assert rep.n_kinks <= 0.1 * (rep.n_checked + rep.n_kinks), rep
        return rep

    def test_micro_pipeline_all_parameters(self, rng, tiny_grid):
        model = build_model(MICRO, seed=5).astype(np.float64)
        x = voxels(rng, tiny_grid, 1, L=16)
        rep = self._check(model, x, rng, model.parameters(), per=6)
        assert rep.passed, rep

    @pytest.mark.slow
    def test_default_architecture(self, rng, tiny_grid):
        model = build_model(DeepNoseConfig(outputs=5), seed=5).astype(np.float64)
        x = voxels(rng, tiny_grid, 1)
        picks = [model.convs[0].weight, model.bns[3].gamma, model.convs[7].weight,
                 model.fc1.weight, model.fc2.bias]
        rep = self._check(model, x, rng, picks, per=4)
        assert rep.passed, rep


class TestCheckpoint:
    def _trained_like(self):
        m = build_model(MICRO, seed=4)
        for b in m.bns:
            b.running_mean[:] = np.arange(len(b.running_mean)) * 0.25
            b.running_var[:] = 1.5
        return m

    def test_roundtrip_bit_exact(self, tmp_path):
        m = self._trained_like()
        save_checkpoint(m, tmp_path / "a.dnckpt")
        back = load_checkpoint(tmp_path / "a.dnckpt")
        assert back.config == m.config and back.seed == 4
        for (n1, a), (n2, b) in zip(m.named_tensors(), back.named_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(a, b)
        save_checkpoint(back, tmp_path / "b.dnckpt")
        assert (tmp_path / "a.dnckpt").read_bytes() == (tmp_path / "b.dnckpt").read_bytes()

    def test_truncation_never_crashes(self):
        raw = checkpoint_bytes(self._trained_like())
        for cut in list(range(0, 40)) + [len(raw) // 2, len(raw) - 1]:
            with pytest.raises((BadMagic, ShapeMismatch)):
                checkpoint_from_bytes(raw[:cut])

    def test_bad_magic_and_version(self):
        raw = checkpoint_bytes(self._trained_like())
        with pytest.raises(BadMagic):
            checkpoint_from_bytes(b"XX" + raw[2:])
        with pytest.raises(VersionMismatch):
            checkpoint_from_bytes(raw[:6] + (2).to_bytes(4, "little") + raw[10:])

    def test_trailing_bytes(self):
        with pytest.raises(ShapeMismatch):
            checkpoint_from_bytes(checkpoint_bytes(self._trained_like()) + b"\0")

    @pytest.mark.parametrize("field,value,error", [
        ("seed", -1, InvalidConfig),
        ("n_elements", -6, InvalidConfig),
        ("hidden", 2**40, ShapeMismatch),  # would allocate terabytes
    ])
    def test_corrupt_config_field(self, field, value, error):
        raw = checkpoint_bytes(self._trained_like())
        key = len(field).to_bytes(2, "little") + field.encode()
        at = raw.index(key) + len(key)
        bad = raw[:at] + struct.pack("<q", value) + raw[at + 8:]
        with pytest.raises(error):
            checkpoint_from_bytes(bad)

    def test_feature_width_mismatch_names_tensor(self):
        raw = checkpoint_bytes(build_model(DeepNoseConfig(outputs=3), seed=0))
        narrow = DeepNoseConfig(block_channels=(12, 24, 48, 48), outputs=3)
        with pytest.raises(ShapeMismatch, match="conv6.weight"):
            checkpoint_from_bytes(raw, narrow)


class TestEnantiomers:
    def test_features_differ(self, small_grid):
        a = parse_sdf((DATA / "enantiomer_a.sdf").read_text())
        b = parse_sdf((DATA / "enantiomer_b.sdf").read_text())
        np.testing.assert_allclose(a.coords[:, 0], -b.coords[:, 0])
        model = build_model(DeepNoseConfig(outputs=3), seed=0)
        fa, fb = model.molecule_features(a, small_grid), model.molecule_features(b, small_grid)
        assert relative(fa, fb) > 1e-3
