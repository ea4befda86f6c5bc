"""Model assembly: block contracts, stage geometry, parameter accounting,
checkpoint round-trips, and the spatial invariants."""

import numpy as np
import pytest

from conftest import fd_grad, rel_err
from mixerlab.checkpoint import load_arrays, load_model, save_model
from mixerlab.errors import ConfigError, ShapeError
from mixerlab.metaformer import (
    Block,
    MetaFormer,
    ModelConfig,
    SegDecoder,
    count_params,
    format_signature,
    mixer_param_delta,
    parse_signature,
    warm_start_model,
)
from mixerlab.mixers import MixerSpec
from mixerlab.tensor import Tape, Tensor, global_avg_pool, linear, tsum

TINY = dict(stage_channels=(8, 16, 24, 32), stage_depths=(1, 1, 1, 1), input_hw=(32, 32))


def tiny_config(kind="pooling", kernel=3, head="classify", num_classes=2, **kw):
    sig = tuple(MixerSpec(kind, kernel=kernel) for _ in range(4))
    merged = {**TINY, **kw}
    return ModelConfig(signature=sig, head=head, num_classes=num_classes, **merged)


class TestModelConfig:
    def test_stage_resolutions_224(self):
        cfg = ModelConfig()
        assert cfg.stage_hw() == [(56, 56), (28, 28), (14, 14), (7, 7)]

    def test_stage_resolutions_768(self):
        cfg = ModelConfig(input_hw=(768, 768))
        hw = cfg.stage_hw()
        assert hw[0] == (192, 192) and hw[0][0] * hw[0][1] == 36864

    def test_indivisible_input_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_hw=(225, 225)).stage_hw()

    def test_signature_roundtrip(self):
        sig = (
            MixerSpec("pooling", 3),
            MixerSpec("pooling", 3),
            MixerSpec("global_attn"),
            MixerSpec("global_attn"),
        )
        assert parse_signature(format_signature(sig)) == sig

    def test_ini_roundtrip(self):
        cfg = tiny_config("grouped_conv", kernel=5, head="segment", num_classes=4)
        again = ModelConfig.from_ini(cfg.to_ini())
        assert again == cfg

    def test_unknown_ini_key_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_ini("[model]\nchannles = 1,2,3,4\n")


class TestBlock:
    def test_zero_layerscale_is_identity(self):
        rng = np.random.default_rng(0)
        block = Block(8, MixerSpec("pooling", 3), 4, 0.0, 0.0, (6, 6), rng)
        x = Tensor(rng.standard_normal((2, 8, 6, 6)))
        y = block.forward(x)
        np.testing.assert_array_equal(y.data, x.data)

    def test_identity_mixer_zero_mlp(self):
        rng = np.random.default_rng(1)
        block = Block(8, MixerSpec("identity"), 4, 1.0, 0.0, (6, 6), rng)
        block.ls1.data[...] = 0.0  # silence the mixer branch
        for t in (block.mlp.fc1_w, block.mlp.fc1_b, block.mlp.fc2_w, block.mlp.fc2_b):
            t.data[...] = 0.0
        x = Tensor(rng.standard_normal((1, 8, 6, 6)))
        y = block.forward(x)
        np.testing.assert_array_equal(y.data, x.data)

    def test_shape_preserved_per_mixer(self):
        rng = np.random.default_rng(2)
        for kind in ("identity", "pooling", "conv", "grouped_conv", "local_attn", "global_attn"):
            pos = Tensor(rng.standard_normal((16, 4, 4)), requires_grad=True) if kind == "global_attn" else None
            block = Block(16, MixerSpec(kind, 3), 4, 0.5, 0.0, (4, 4), rng, pos_emb=pos)
            x = Tensor(rng.standard_normal((2, 16, 4, 4)))
            assert block.forward(x).shape == x.shape

    def test_block_gradcheck_pooling(self):
        # full criterion (all six mixers at C=16, 6x6) runs in the acceptance suite
        rng = np.random.default_rng(3)
        block = Block(4, MixerSpec("pooling", 3), 2, 1.0, 0.0, (3, 3), rng)
        x0 = rng.standard_normal((1, 4, 3, 3))
        params = dict(block.named("b"))
        names = sorted(params)
        arrays = [params[n].data for n in names]

        def closure(arrs):
            for n, a in zip(names, arrs):
                params[n].data[...] = a
            return float(block.forward(Tensor(x0)).data.sum())

        want = fd_grad(closure, arrays)
        for n in names:
            params[n].grad = None
        with Tape() as tape:
            loss = tsum(block.forward(Tensor(x0)))
        tape.backward(loss)
        for n, e in zip(names, want):
            assert rel_err(params[n].grad, e) < 1e-4, n

    def test_droppath_requires_rng(self):
        rng = np.random.default_rng(4)
        block = Block(8, MixerSpec("identity"), 4, 1.0, 0.5, (4, 4), rng)
        x = Tensor(np.ones((2, 8, 4, 4)))
        with pytest.raises(ConfigError):
            block.forward(x, training=True, rng=None)
        block.forward(x, training=True, rng=np.random.default_rng(0))


class TestForwardClassify:
    def test_identical_images_identical_logits(self):
        model = MetaFormer(tiny_config(), seed=0)
        rng = np.random.default_rng(5)
        one = rng.standard_normal((1, 3, 32, 32))
        batch = Tensor(np.repeat(one, 3, axis=0))
        logits = model.forward_classify(batch).data
        assert np.all(logits == logits[0])

    def test_batch_permutation_permutes_logits(self):
        model = MetaFormer(tiny_config(), seed=0)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 3, 32, 32))
        perm = np.array([2, 0, 3, 1])
        a = model.forward_classify(Tensor(x)).data
        b = model.forward_classify(Tensor(x[perm])).data
        np.testing.assert_array_equal(a[perm], b)

    def test_jacobian_vector_probe(self):
        model = MetaFormer(tiny_config(), seed=1)
        rng = np.random.default_rng(7)
        x0 = rng.standard_normal((1, 3, 32, 32))
        probe = rng.standard_normal((1, 2))
        direction = rng.standard_normal(x0.shape)
        h = 1e-5

        def score(xv):
            return float((model.forward_classify(Tensor(xv)).data * probe).sum())

        fd = (score(x0 + h * direction) - score(x0 - h * direction)) / (2 * h)
        xt = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            loss = tsum(model.forward_classify(xt) * probe)
        tape.backward(loss)
        analytic = float((xt.grad * direction).sum())
        assert abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8) < 1e-4

    def test_wrong_head_rejected(self):
        model = MetaFormer(tiny_config(head="segment"), seed=0)
        with pytest.raises(ConfigError):
            model.forward_classify(Tensor(np.zeros((1, 3, 32, 32))))

    def test_indivisible_input_rejected(self):
        model = MetaFormer(tiny_config(), seed=0)
        with pytest.raises(ConfigError):
            model.forward_classify(Tensor(np.zeros((1, 3, 33, 33))))


class TestForwardSegment:
    def test_output_matches_input_resolution(self):
        model = MetaFormer(tiny_config(head="segment", num_classes=4), seed=2)
        x = Tensor(np.random.default_rng(8).standard_normal((2, 3, 32, 32)))
        logits = model.forward_segment(x)
        assert logits.shape == (2, 4, 32, 32)

    def test_constant_feature_maps_give_spatially_constant_logits(self):
        # the decoder is pointwise + bilinear, so per-channel-constant stage
        # features must come out spatially constant
        rng = np.random.default_rng(80)
        dec = SegDecoder.create((8, 16, 24, 32), 16, 3, rng)
        feats = [
            Tensor(np.broadcast_to(rng.standard_normal((1, c, 1, 1)), (1, c, hw, hw)).copy())
            for c, hw in zip((8, 16, 24, 32), (8, 4, 2, 1))
        ]
        logits = dec(feats, (32, 32)).data
        assert np.ptp(logits.reshape(1, 3, -1), axis=2).max() < 1e-9

    def test_decoder_parameter_count_near_525k(self):
        cfg = ModelConfig(head="segment", num_classes=5)
        model = MetaFormer(cfg, seed=0)
        decoder_params = sum(
            t.size for name, t in model.named_parameters().items() if name.startswith("decoder.")
        )
        assert abs(decoder_params - 525_000) <= 0.01 * 525_000

    def test_decoder_flip_equivariance(self):
        # pointwise maps + half-pixel bilinear resampling commute with flips
        rng = np.random.default_rng(9)
        dec = SegDecoder.create((8, 16, 24, 32), 16, 3, rng)
        feats = [Tensor(rng.standard_normal((1, c, hw, hw))) for c, hw in zip((8, 16, 24, 32), (8, 4, 2, 1))]
        flipped = [Tensor(f.data[:, :, :, ::-1].copy()) for f in feats]
        a = dec(feats, (32, 32)).data
        b = dec(flipped, (32, 32)).data
        assert np.abs(a[:, :, :, ::-1] - b).max() < 1e-12


class TestParameterCounts:
    # closed-form per-block sum over the S12 placements:
    # 2*64^2 + 2*128^2 + 6*320^2 + 2*512^2 = 1,179,648
    PLACEMENT_C2 = 2 * 64**2 + 2 * 128**2 + 6 * 320**2 + 2 * 512**2
    PLACEMENT_C = 2 * 64 + 2 * 128 + 6 * 320 + 2 * 512

    def s12(self, kind, kernel=3):
        sig = tuple(MixerSpec(kind, kernel=kernel) for _ in range(4))
        return ModelConfig(signature=sig, head="classify", num_classes=10)

    def test_pooling_total_near_11_4m(self):
        counts = count_params(MetaFormer(self.s12("pooling"), seed=0))
        assert counts["mixers"] == 0
        assert abs(counts["total"] - 11.4e6) / 11.4e6 < 0.03

    @pytest.mark.parametrize("k,want", [(3, 10_616_832), (5, 29_491_200), (7, 57_802_752)])
    def test_conv_delta_exact(self, k, want):
        assert want == k * k * self.PLACEMENT_C2
        cfg = self.s12("conv", k)
        assert mixer_param_delta(cfg) == want
        counts = count_params(MetaFormer(cfg, seed=0))
        assert counts["mixers"] == want

    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_grouped_delta_exact(self, k):
        cfg = self.s12("grouped_conv", k)
        want = k * k * self.PLACEMENT_C
        assert mixer_param_delta(cfg) == want
        assert count_params(MetaFormer(cfg, seed=0))["mixers"] == want

    def test_attention_delta_exact(self):
        cfg = self.s12("local_attn", 3)
        assert mixer_param_delta(cfg) == 4 * self.PLACEMENT_C2 == 4_718_592
        counts = count_params(MetaFormer(cfg, seed=0))
        assert counts["mixers"] == 4_718_592
        assert counts["pos_emb"] == 0

    def test_global_attention_pos_emb_count(self):
        cfg = self.s12("global_attn")
        counts = count_params(MetaFormer(cfg, seed=0))
        want_pos = 56 * 56 * 64 + 28 * 28 * 128 + 14 * 14 * 320 + 7 * 7 * 512
        assert counts["pos_emb"] == want_pos == 388_864
        assert counts["mixers"] == 4_718_592

    def test_identity_collapse(self):
        model = MetaFormer(tiny_config("conv"), seed=4)
        for name, t in model.named_parameters().items():
            if "layerscale" in name:
                t.data[...] = 0.0
        rng = np.random.default_rng(10)
        x = Tensor(rng.standard_normal((2, 3, 32, 32)))
        got = model.forward_classify(x).data
        # pure patch-embed chain + final norm + GAP + head
        h = x
        for embed in model.patch_embeds:
            h = embed(h)
        h = model.final_norm(h)
        want = linear(global_avg_pool(h), model.head_w, model.head_b).data
        np.testing.assert_array_equal(got, want)


class TestHybridSignature:
    def test_mixed_stage_signature_forward_and_counts(self):
        # pooling early, attention late, purely through the spec list
        sig = (
            MixerSpec("pooling", 3),
            MixerSpec("pooling", 3),
            MixerSpec("local_attn", 3),
            MixerSpec("global_attn"),
        )
        cfg = ModelConfig(
            stage_channels=(8, 16, 24, 32),
            stage_depths=(1, 1, 1, 1),
            signature=sig,
            input_hw=(32, 32),
            head="classify",
            num_classes=2,
        )
        model = MetaFormer(cfg, seed=6)
        x = Tensor(np.random.default_rng(15).standard_normal((2, 3, 32, 32)))
        assert model.forward_classify(x).shape == (2, 2)
        counts = count_params(model)
        assert counts["mixers"] == 4 * 24 * 24 + 4 * 32 * 32
        assert counts["pos_emb"] == 32 * 1 * 1  # stage-3 grid is 1x1 at 32x32 input
        assert mixer_param_delta(cfg) == counts["mixers"]


class TestSpatialInvariants:
    def test_translation_by_total_stride(self):
        # content sits on a zero canvas with margins wide enough that its
        # influence never reaches a padded border cell at any stage, so a
        # 32-pixel shift only permutes identical cell values under GAP
        cfg = tiny_config("conv", kernel=3, input_hw=(512, 512))
        model = MetaFormer(cfg, seed=5)
        rng = np.random.default_rng(11)
        x = np.zeros((1, 3, 512, 512))
        x[:, :, 240:272, 240:272] = rng.standard_normal((1, 3, 32, 32))
        a = model.forward_classify(Tensor(x)).data
        b = model.forward_classify(Tensor(np.roll(x, 32, axis=3))).data
        assert np.abs(a - b).max() < 1e-10

    def test_mixer_flip_equivariance_symmetric_kernels(self):
        from mixerlab.mixers import ConvMixerParams, mix_conv, mix_grouped_conv, mix_pool

        rng = np.random.default_rng(12)
        x = rng.standard_normal((1, 4, 8, 8))
        flip = lambda a: a[:, :, :, ::-1]
        y = mix_pool(Tensor(x), 3).data
        y2 = mix_pool(Tensor(flip(x).copy()), 3).data
        assert np.abs(flip(y) - y2).max() < 1e-12
        w = rng.standard_normal((4, 4, 3, 3))
        w = 0.5 * (w + w[:, :, :, ::-1])  # symmetrize left-right
        y = mix_conv(Tensor(x), ConvMixerParams(Tensor(w)), 3).data
        y2 = mix_conv(Tensor(flip(x).copy()), ConvMixerParams(Tensor(w)), 3).data
        assert np.abs(flip(y) - y2).max() < 1e-12
        wg = rng.standard_normal((4, 1, 3, 3))
        wg = 0.5 * (wg + wg[:, :, :, ::-1])
        y = mix_grouped_conv(Tensor(x), ConvMixerParams(Tensor(wg)), 3).data
        y2 = mix_grouped_conv(Tensor(flip(x).copy()), ConvMixerParams(Tensor(wg)), 3).data
        assert np.abs(flip(y) - y2).max() < 1e-12

    def test_seed_determinism(self):
        a = MetaFormer(tiny_config("grouped_conv"), seed=7)
        b = MetaFormer(tiny_config("grouped_conv"), seed=7)
        x = np.random.default_rng(13).standard_normal((1, 3, 32, 32))
        ya = a.forward_classify(Tensor(x)).data
        yb = b.forward_classify(Tensor(x)).data
        assert ya.tobytes() == yb.tobytes()


class TestCheckpoint:
    def test_roundtrip_bits(self, tmp_path):
        model = MetaFormer(tiny_config("grouped_conv"), seed=8)
        path = str(tmp_path / "model.mxlc")
        save_model(path, model)
        again = load_model(path)
        for name, t in model.named_parameters().items():
            assert again.named_parameters()[name].data.tobytes() == t.data.tobytes()
        x = np.random.default_rng(14).standard_normal((1, 3, 32, 32))
        np.testing.assert_array_equal(
            model.forward_classify(Tensor(x)).data,
            again.forward_classify(Tensor(x)).data,
        )

    def test_container_is_little_endian_and_named(self, tmp_path):
        model = MetaFormer(tiny_config(), seed=9)
        path = str(tmp_path / "model.mxlc")
        save_model(path, model)
        config_text, arrays = load_arrays(path)
        assert "stage0.block0.mlp.fc1.weight" in arrays
        assert config_text.startswith("[model]")
        with open(path, "rb") as fh:
            assert fh.read(4) == b"MXLC"

    def test_warm_start_across_checkpoints(self, tmp_path):
        src_cfg = tiny_config("global_attn", input_hw=(32, 32))
        src = MetaFormer(src_cfg, seed=10)
        path = str(tmp_path / "global.mxlc")
        save_model(path, src)

        reloaded = load_model(path)
        dst = MetaFormer(tiny_config("local_attn", kernel=3), seed=11)
        warm_start_model(reloaded, dst)
        for i in range(4):
            for sb, db in zip(reloaded.stages[i], dst.stages[i]):
                assert db.mixer_params.wq.data.tobytes() == sb.mixer_params.wq.data.tobytes()

    def test_warm_start_width_mismatch(self):
        src = MetaFormer(tiny_config("global_attn"), seed=12)
        bad = ModelConfig(
            stage_channels=(16, 32, 48, 64),
            stage_depths=(1, 1, 1, 1),
            signature=tuple(MixerSpec("local_attn", 3) for _ in range(4)),
            input_hw=(32, 32),
            head="classify",
            num_classes=2,
        )
        dst = MetaFormer(bad, seed=13)
        with pytest.raises(ShapeError):
            warm_start_model(src, dst)
