import numpy as np
import pytest

import fusionkit.tensor as tk
from fusionkit.bundles import HiddenStateBundle
from fusionkit.errors import BadMagicError, ShapeError, TruncatedError
from fusionkit.interfaces import (Interface, InterfaceConfig, build_interface,
                                  concat_project, gumd_forward,
                                  hconv_stage_lengths, load_checkpoint,
                                  param_count, save_checkpoint, ws_forward)
from fusionkit.matching import MergedStack, merge_add, merge_concat
from fusionkit.tensor import Tensor

L, T, D = 13, 8, 8


@pytest.fixture
def h():
    return Tensor(np.random.default_rng(0).standard_normal((L, T, D)))


def make_bundle(data):
    data = np.asarray(data, dtype=float)
    return HiddenStateBundle(model_id="m", layers=data.shape[0], frames=data.shape[1],
                             dim=data.shape[2], framerate_hz=50, data=Tensor(data))


class TestWsForward:
    def test_saturated_logits_select_layer(self, h):
        logits = np.zeros(L)
        logits[4] = 50.0
        out = ws_forward(h, Tensor(logits))
        assert np.abs(out.data - h.data[4]).max() < 1e-12

    def test_uniform_logits_give_layer_mean(self, h):
        out = ws_forward(h, Tensor(np.zeros(L)))
        assert np.abs(out.data - h.data.mean(axis=0)).max() < 1e-12

    def test_quarter_weight_closed_form(self):
        h2 = Tensor(np.stack([np.zeros((T, D)), np.full((T, D), 4.0)]))
        out = ws_forward(h2, Tensor([np.log(3.0), 0.0]))
        assert np.allclose(out.data, 1.0, atol=1e-12)

    def test_length_mismatch(self, h):
        with pytest.raises(ShapeError):
            ws_forward(h, Tensor(np.zeros(L + 1)))

    def test_convex_hull_property(self, h):
        out = ws_forward(h, Tensor(np.random.default_rng(1).standard_normal(L)))
        assert (out.data <= h.data.max(axis=0) + 1e-12).all()
        assert (out.data >= h.data.min(axis=0) - 1e-12).all()


class TestGumdForward:
    def test_hard_noiseless_selects_argmax_layer(self, h):
        logits = np.zeros((L, D))
        logits[2, :] = 5.0
        out = gumd_forward(h, Tensor(logits), hard=True, noise=False)
        assert np.array_equal(out.data, h.data[2])

    def test_soft_high_tau_approaches_mean(self, h):
        logits = Tensor(np.random.default_rng(2).standard_normal((L, D)))
        out = gumd_forward(h, logits, tau=1e6, hard=False, noise=False)
        assert np.abs(out.data - h.data.mean(axis=0)).max() < 1e-3

    def test_hard_provenance_every_coordinate(self, h):
        logits = Tensor(np.random.default_rng(3).standard_normal((L, D)))
        out = gumd_forward(h, logits, hard=True, rng_seed=11, noise=True)
        from_some_layer = np.zeros((T, D), dtype=bool)
        for l in range(L):
            from_some_layer |= out.data == h.data[l]
        assert from_some_layer.all()

    def test_hard_mixed_argmax_traces_per_dimension(self, h):
        logits = np.random.default_rng(4).standard_normal((L, D))
        chosen = logits.argmax(axis=0)
        assert len(set(chosen.tolist())) > 1  # genuinely mixed selection
        out = gumd_forward(h, Tensor(logits), hard=True, noise=False)
        for d in range(D):
            assert np.array_equal(out.data[:, d], h.data[chosen[d], :, d])

    def test_straight_through_grads_equal_soft_under_frozen_noise(self, h):
        mask = Tensor(np.random.default_rng(5).standard_normal((T, D)))

        def grads(hard):
            logits = Tensor(np.random.default_rng(6).standard_normal((L, D)),
                            requires_grad=True)
            out = gumd_forward(h, logits, tau=1.0, hard=hard, rng_seed=17, noise=True)
            tk.backward(tk.sum_(tk.mul(out, mask)))
            return logits.grad

        assert np.array_equal(grads(True), grads(False))

    def test_frozen_noise_reproducible(self, h):
        logits = Tensor(np.random.default_rng(7).standard_normal((L, D)))
        a = gumd_forward(h, logits, hard=True, rng_seed=9, noise=True).data
        b = gumd_forward(h, logits, hard=True, rng_seed=9, noise=True).data
        assert np.array_equal(a, b)

    def test_bad_tau(self, h):
        with pytest.raises(ValueError):
            gumd_forward(h, Tensor(np.zeros((L, D))), tau=0.0)


class TestConcatProject:
    def test_single_feature_identity(self):
        feat = Tensor(np.random.default_rng(0).standard_normal((T, D)))
        out = concat_project([feat], Tensor(np.eye(D)), Tensor(np.zeros(D)))
        assert np.allclose(out.data, feat.data, atol=1e-15)

    def test_block_selection(self):
        rng = np.random.default_rng(1)
        f1 = Tensor(rng.standard_normal((T, D)))
        f2 = Tensor(rng.standard_normal((T, D)))
        w = np.vstack([np.eye(D), np.zeros((D, D))])
        out = concat_project([f1, f2], Tensor(w), Tensor(np.zeros(D)))
        assert np.allclose(out.data, f1.data, atol=1e-15)

    def test_matches_dense_multiply_oracle(self):
        rng = np.random.default_rng(2)
        f1, f2 = rng.standard_normal((T, 5)), rng.standard_normal((T, 3))
        w, b = rng.standard_normal((8, 4)), rng.standard_normal(4)
        out = concat_project([Tensor(f1), Tensor(f2)], Tensor(w), Tensor(b))
        expect = np.concatenate([f1, f2], axis=1) @ w + b
        assert np.allclose(out.data, expect, atol=1e-12)

    def test_frame_mismatch(self):
        f1 = Tensor(np.zeros((4, 2)))
        f2 = Tensor(np.zeros((5, 2)))
        with pytest.raises(ShapeError):
            concat_project([f1, f2], Tensor(np.eye(4)), Tensor(np.zeros(4)))


class TestHconv:
    def test_stage_lengths_for_13_layers(self):
        assert hconv_stage_lengths(13, 3, 2) == [7, 4, 2, 1]

    def test_stage_count_is_log_stride(self):
        for n_layers in (2, 3, 5, 8, 13, 24):
            stages = hconv_stage_lengths(n_layers, 3, 2)
            assert stages[-1] == 1
            assert len(stages) == int(np.ceil(np.log2(n_layers)))

    def test_forward_merged_shapes(self, h):
        iface = build_interface(InterfaceConfig(kind="hconv", output_dim=D), 1, L, [D])
        merged = merge_add([make_bundle(h.data)])
        out = iface.forward_merged(merged)
        assert out.shape == (T, D)

    def test_zero_bundle_additive_identity(self, h):
        iface = build_interface(InterfaceConfig(kind="hconv", output_dim=D, rng_seed=4),
                                1, L, [D])
        alone = iface.forward([h]).data
        iface2 = build_interface(InterfaceConfig(kind="hconv", output_dim=D, rng_seed=4),
                                 2, L, [D, D])
        with_zero = iface2.forward([h, Tensor(np.zeros((L, T, D)))]).data
        assert np.array_equal(alone, with_zero)

    def test_merge_kind_checked(self, h):
        iface = build_interface(InterfaceConfig(kind="hconv", output_dim=D), 1, L, [D])
        with pytest.raises(ShapeError):
            iface.forward_merged(merge_concat([make_bundle(h.data)]))

    def test_permuting_layers_changes_output(self, h):
        iface = build_interface(InterfaceConfig(kind="hconv", output_dim=D, rng_seed=1),
                                1, L, [D])
        out1 = iface.forward([h]).data
        perm = np.random.default_rng(8).permutation(L)
        out2 = iface.forward([Tensor(h.data[perm])]).data
        assert not np.allclose(out1, out2)

    def test_single_layer_stack_still_maps_to_output_dim(self):
        iface = build_interface(InterfaceConfig(kind="chconv", output_dim=5), 2, 1, [3, 4])
        models = [Tensor(np.random.default_rng(0).standard_normal((1, 4, d)))
                  for d in (3, 4)]
        assert iface.forward(models).shape == (4, 5)


class TestBuildInterface:
    @pytest.mark.parametrize("kind", ["ws", "gumd", "hconv", "chconv"])
    @pytest.mark.parametrize("n_models", [1, 2, 3])
    def test_output_contract(self, kind, n_models):
        rng = np.random.default_rng(42)
        iface = build_interface(InterfaceConfig(kind=kind, output_dim=D, rng_seed=3),
                                n_models, L, [D] * n_models)
        models = [Tensor(rng.standard_normal((L, T, D))) for _ in range(n_models)]
        out = iface.forward(models, train=True, step_seed=1)
        assert out.shape == (T, D)
        batched = [Tensor(np.stack([m.data, m.data, m.data])) for m in models]
        out_b = iface.forward(batched, train=True, step_seed=1)
        assert out_b.shape == (3, T, D)
        assert np.allclose(out_b.data[0], out.data, atol=1e-12)

    def test_ws_single_model_has_exactly_l_scalars(self):
        iface = build_interface(InterfaceConfig(kind="ws", output_dim=D), 1, 13, [D])
        assert param_count(iface) == 13

    def test_same_seed_bit_identical(self):
        cfg = InterfaceConfig(kind="chconv", output_dim=D, rng_seed=77)
        i1 = build_interface(cfg, 2, L, [D, D])
        i2 = build_interface(cfg, 2, L, [D, D])
        assert set(i1.params) == set(i2.params)
        for name in i1.params:
            assert np.array_equal(i1.params[name].data, i2.params[name].data)

    def test_chconv_larger_than_hconv(self):
        hconv = build_interface(InterfaceConfig(kind="hconv", output_dim=D), 2, L, [D, D])
        chconv = build_interface(InterfaceConfig(kind="chconv", output_dim=D), 2, L, [D, D])
        assert param_count(chconv) > param_count(hconv)

    def test_hconv_param_count_model_invariant(self):
        one = build_interface(InterfaceConfig(kind="hconv", output_dim=D), 1, L, [D])
        two = build_interface(InterfaceConfig(kind="hconv", output_dim=D), 2, L, [D, D])
        assert param_count(one) == param_count(two)

    def test_chconv_first_stage_channels(self):
        iface = build_interface(InterfaceConfig(kind="chconv", output_dim=16), 2, L, [16, 16])
        assert iface.params["hconv.stage0.conv.w"].shape == (32, 32, 3)
        assert iface.params["hconv.stage0.mix.w"].shape == (32, 16)

    def test_zero_models_rejected(self):
        with pytest.raises(ValueError):
            build_interface(InterfaceConfig(kind="chconv", output_dim=D), 0, L, [])

    def test_single_model_ws_dim_must_match(self):
        with pytest.raises(ValueError):
            build_interface(InterfaceConfig(kind="ws", output_dim=4), 1, L, [8])

    def test_hconv_unequal_dims_rejected(self):
        with pytest.raises(ValueError):
            build_interface(InterfaceConfig(kind="hconv", output_dim=8), 2, L, [8, 6])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            InterfaceConfig(kind="ws", output_dim=8, hconv_kernel=1)
        with pytest.raises(ValueError):
            InterfaceConfig(kind="ws", output_dim=8, gumbel_tau=0.0)
        with pytest.raises(ValueError):
            InterfaceConfig(kind="nope", output_dim=8)


class TestGradients:
    @pytest.mark.parametrize("kind", ["ws", "gumd", "hconv", "chconv"])
    def test_all_parameters_pass_grad_check(self, kind):
        rng = np.random.default_rng(13)
        iface = build_interface(InterfaceConfig(kind=kind, output_dim=6, rng_seed=5),
                                2, 7, [6, 6])
        models = [Tensor(rng.standard_normal((7, 4, 6))) for _ in range(2)]
        mask = Tensor(rng.standard_normal((4, 6)))

        def loss_fn():
            out = iface.forward(models, train=True, step_seed=3,
                                gumbel_hard=False if kind == "gumd" else None)
            return tk.sum_(tk.mul(out, mask))

        for name, p in iface.params.items():
            err = tk.grad_check(lambda t: loss_fn(), p, eps=1e-5)
            assert err <= 1e-5, (name, err)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        iface = build_interface(InterfaceConfig(kind="chconv", output_dim=D, rng_seed=9),
                                2, L, [D, D])
        path = tmp_path / "i.ckpt"
        save_checkpoint(iface, path)
        loaded = load_checkpoint(path)
        # hconv_channels=None canonicalizes to its resolved value on disk
        assert loaded.config.kind == iface.config.kind
        assert loaded.config.mid_channels == iface.config.mid_channels
        assert loaded.config.rng_seed == iface.config.rng_seed
        assert loaded.n_models == 2 and loaded.input_dims == (D, D)
        save_checkpoint(loaded, tmp_path / "i2.ckpt")
        assert path.read_bytes() == (tmp_path / "i2.ckpt").read_bytes()

    def test_loaded_forward_matches_saved_float32(self, tmp_path):
        rng = np.random.default_rng(3)
        iface = build_interface(InterfaceConfig(kind="ws", output_dim=D, rng_seed=2),
                                1, L, [D])
        for p in iface.params.values():
            p.data[:] = rng.standard_normal(p.shape).astype(np.float32)
        save_checkpoint(iface, tmp_path / "i.ckpt")
        loaded = load_checkpoint(tmp_path / "i.ckpt")
        h = Tensor(rng.standard_normal((L, T, D)))
        assert np.array_equal(iface.forward([h]).data, loaded.forward([h]).data)

    def test_bad_magic(self, tmp_path):
        iface = build_interface(InterfaceConfig(kind="ws", output_dim=D), 1, L, [D])
        save_checkpoint(iface, tmp_path / "i.ckpt")
        raw = (tmp_path / "i.ckpt").read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(b"ZZZZ" + raw[4:])
        with pytest.raises(BadMagicError):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_truncation(self, tmp_path):
        iface = build_interface(InterfaceConfig(kind="ws", output_dim=D), 1, L, [D])
        save_checkpoint(iface, tmp_path / "i.ckpt")
        raw = (tmp_path / "i.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[:-9])
        with pytest.raises(TruncatedError):
            load_checkpoint(tmp_path / "cut.ckpt")
