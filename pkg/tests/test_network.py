import numpy as np
import numpy.testing as npt
import pytest

from rgbdfusion import tensor as T
from rgbdfusion.tensor import Tensor
from rgbdfusion.network import (ModelConfig, SegmentationModel, encode_depth,
                                encode_rgb, load_checkpoint, model_forward,
                                multi_scale_infer, save_checkpoint)
from rgbdfusion.train import cross_entropy


MICRO = dict(rgb_widths=[6, 8, 10, 12], depth_widths=[2, 4, 6, 8],
             decoder_embed=8, num_classes=3, input_size=(16, 16))


def micro_config(**kw):
    return ModelConfig(**{**MICRO, **kw})


def rand(shape, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=shape)


class TestConfig:
    def test_asymmetry_enforced(self):
        with pytest.raises(ValueError):
            ModelConfig(rgb_widths=[8, 16, 32, 64], depth_widths=[8, 16, 32, 64])

    def test_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(input_size=(60, 64))

    def test_json_roundtrip(self, tmp_path):
        cfg = micro_config(variant="cat")
        p = tmp_path / "cfg.json"
        import json
        p.write_text(json.dumps(cfg.to_dict()))
        assert ModelConfig.from_json(p).to_dict() == cfg.to_dict()
        assert ModelConfig.from_json(p).config_hash() == cfg.config_hash()


class TestEncoders:
    def test_rgb_stage_shapes(self):
        model = SegmentationModel(ModelConfig(), seed=0)
        feats = encode_rgb(Tensor(rand((3, 64, 64))), model)
        shapes = [f.shape for f in feats]
        assert shapes == [(16, 32, 32), (32, 16, 16), (64, 8, 8), (128, 4, 4)]

    def test_depth_stage_shapes(self):
        model = SegmentationModel(ModelConfig(), seed=0)
        feats = encode_depth(Tensor(rand((1, 64, 64))), model)
        shapes = [f.shape for f in feats]
        assert shapes == [(8, 32, 32), (16, 16, 16), (32, 8, 8), (64, 4, 4)]

    def test_zero_input_uniform_with_zero_residual(self):
        model = SegmentationModel(micro_config(), seed=1)
        for s in model.rgb_stages:
            s.res_w.data[...] = 0.0
            s.res_b.data[...] = 0.0
        feats = encode_rgb(Tensor(np.zeros((3, 16, 16))), model)
        for f in feats:
            flat = f.data.reshape(f.shape[0], -1)
            assert np.ptp(flat, axis=1).max() < 1e-12  # spatially uniform

    def test_determinism(self):
        x = rand((3, 16, 16), seed=2)
        a = encode_rgb(Tensor(x), SegmentationModel(micro_config(), seed=3))
        b = encode_rgb(Tensor(x.copy()), SegmentationModel(micro_config(), seed=3))
        for fa, fb in zip(a, b):
            assert np.array_equal(fa.data, fb.data)

    def test_indivisible_input_error(self):
        model = SegmentationModel(micro_config(), seed=0)
        with pytest.raises(ValueError):
            encode_rgb(Tensor(np.zeros((3, 20, 16))), model)

    def test_depth_attention_rows_stochastic(self):
        model = SegmentationModel(micro_config(), seed=4)
        stage = model.depth_stages[0]
        flat = Tensor(rand((2, 12), seed=5))
        q = T.matmul(stage.wq, flat)
        k = T.matmul(stage.wk, flat)
        w = T.softmax(T.matmul(T.transpose(q), k) / stage.scale, axis=1).data
        npt.assert_allclose(w.sum(axis=1), np.ones(12), atol=1e-9)

    def test_attention_subblock_permutation_equivariance(self):
        model = SegmentationModel(micro_config(), seed=6)
        stage = model.depth_stages[1]
        tokens = rand((4, 10), seed=7)
        out = stage.attend(Tensor(tokens)).data
        perm = np.random.default_rng(8).permutation(10)
        out_p = stage.attend(Tensor(tokens[:, perm])).data
        npt.assert_allclose(out_p, out[:, perm], atol=1e-10)

    def test_branch_asymmetry(self):
        model = SegmentationModel(ModelConfig(), seed=0)
        assert model.depth_branch_params() < model.rgb_branch_params()


class TestModelForward:
    @pytest.mark.parametrize("variant", ["cat", "lafs", "lafs_cma"])
    def test_logit_shape_contract(self, variant):
        model = SegmentationModel(micro_config(variant=variant), seed=0)
        out = model_forward(Tensor(rand((3, 16, 16), 1)), Tensor(rand((1, 16, 16), 2)), model)
        assert out.shape == (3, 16, 16)

    def test_resolution_agnostic(self):
        model = SegmentationModel(micro_config(variant="cat"), seed=0)
        out = model_forward(Tensor(rand((3, 32, 32), 3)), Tensor(rand((1, 32, 32), 4)), model)
        assert out.shape == (3, 32, 32)

    def test_cat_identity_zero_decoder_uniform_logits(self):
        cfg = micro_config(variant="cat")
        model = SegmentationModel(cfg, seed=1)
        for blk in model.fusion_blocks:
            blk.params.w.data[...] = np.eye(blk.cfg.c_fused)
            blk.params.b.data[...] = 0.0
        model.decoder.cls_w.data[...] = 0.0
        model.decoder.cls_b.data[...] = 0.0
        out = model_forward(Tensor(rand((3, 16, 16), 5)), Tensor(rand((1, 16, 16), 6)), model)
        assert np.ptp(out.data) == 0.0
        probs = T.softmax(Tensor(out.data), axis=0).data
        npt.assert_allclose(probs, np.full_like(probs, 1.0 / 3), atol=1e-12)

    def test_gradient_reaches_every_parameter(self):
        # 32x32 keeps >1 token in the last attention stage; with a single
        # token the q/k projections correctly receive zero gradient
        model = SegmentationModel(micro_config(input_size=(32, 32)), seed=7)
        rng = np.random.default_rng(8)
        rgb = Tensor(rng.uniform(0, 1, (3, 32, 32)))
        depth = Tensor(rng.uniform(0, 1, (1, 32, 32)))
        labels = rng.integers(0, 3, (32, 32))
        # zero-init CMA projections would stop gradients into the attention path
        for blk in model.fusion_blocks:
            blk.params.cma.wo.data[...] = rng.uniform(-0.2, 0.2, blk.params.cma.wo.shape)
        loss = cross_entropy(model_forward(rgb, depth, model), labels)
        loss.backward()
        for name, t in model.parameters():
            assert t.grad is not None, name
            assert np.any(t.grad != 0.0), f"gradient identically zero for {name}"

    def test_variants_share_encoder_decoder_init(self):
        models = {v: SegmentationModel(micro_config(variant=v), seed=9)
                  for v in ("cat", "se_mhsa", "lafs", "cma", "lafs_cma")}
        ref = models["cat"]
        for v, m in models.items():
            for (na, ta), (nb, tb) in zip(ref.encoder_decoder_parameters(),
                                          m.encoder_decoder_parameters()):
                assert na == nb and np.array_equal(ta.data, tb.data), (v, na)


class TestMultiScale:
    def test_single_scale_matches_forward(self):
        model = SegmentationModel(micro_config(), seed=10)
        rgb, depth = rand((3, 16, 16), 11), rand((1, 16, 16), 12)
        a = model_forward(Tensor(rgb), Tensor(depth), model).data
        b = multi_scale_infer(rgb, depth, model, [1.0]).data
        npt.assert_array_equal(a, b)

    def test_duplicate_scales_average_to_same(self):
        model = SegmentationModel(micro_config(), seed=13)
        rgb, depth = rand((3, 16, 16), 14), rand((1, 16, 16), 15)
        a = model_forward(Tensor(rgb), Tensor(depth), model).data
        b = multi_scale_infer(rgb, depth, model, [1.0, 1.0]).data
        npt.assert_allclose(a, b, atol=1e-12)

    def test_three_scales_equal_mean_of_components(self):
        from rgbdfusion.tensor import resize_bilinear
        model = SegmentationModel(micro_config(input_size=(64, 64)), seed=16)
        rgb, depth = rand((3, 64, 64), 17), rand((1, 64, 64), 18)
        got = multi_scale_infer(rgb, depth, model, [0.5, 1.0, 1.5]).data
        acc = np.zeros_like(got)
        for s in (0.5, 1.0, 1.5):
            sh = int(round(64 * s))
            r = resize_bilinear(rgb, sh, sh) if s != 1.0 else rgb
            d = resize_bilinear(depth, sh, sh) if s != 1.0 else depth
            logits = model_forward(Tensor(r), Tensor(d), model).data
            acc += resize_bilinear(logits, 64, 64) if s != 1.0 else logits
        npt.assert_allclose(got, acc / 3, atol=1e-10)

    def test_invalid_scale_error(self):
        model = SegmentationModel(micro_config(), seed=19)
        with pytest.raises(ValueError):
            multi_scale_infer(rand((3, 16, 16)), rand((1, 16, 16)), model, [1.3])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = SegmentationModel(micro_config(variant="lafs"), seed=20)
        save_checkpoint(tmp_path / "ckpt", model)
        clone = load_checkpoint(tmp_path / "ckpt")
        assert clone.cfg.to_dict() == model.cfg.to_dict()
        rgb, depth = rand((3, 16, 16), 21), rand((1, 16, 16), 22)
        a = model_forward(Tensor(rgb), Tensor(depth), model).data
        b = model_forward(Tensor(rgb), Tensor(depth), clone).data
        npt.assert_array_equal(a, b)
