import numpy as np
import pytest

from sct import tensor as T
from sct.errors import BadMagicError, ConfigError, DimensionError, MissingTensorError
from sct.rng import Rng
from sct.tensor import Tape, Tensor
from sct.vit import (
    PRESETS,
    FeatureTap,
    TapPoint,
    VisionTransformer,
    VitCheckpoint,
    VitConfig,
    checkpoint_shapes,
    forward,
    init_toy_checkpoint,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    site_of,
)

TINY = PRESETS["tiny"]


def images(cfg, b=3, seed=0):
    return np.random.default_rng(seed).random((b, cfg.channels_in, cfg.image_size, cfg.image_size)).astype(np.float32)


class TestConfig:
    def test_tokens(self):
        assert TINY.num_tokens == 5
        assert PRESETS["toy"].num_tokens == 65
        assert PRESETS["vit-b16"].num_tokens == 197

    def test_validation(self):
        with pytest.raises(ConfigError):
            VitConfig(embed_dim=130, num_heads=4)
        with pytest.raises(ConfigError):
            VitConfig(image_size=30, patch_size=4)
        with pytest.raises(ConfigError):
            VitConfig(num_layers=0)

    def test_dict_roundtrip(self):
        assert VitConfig.from_dict(TINY.to_dict()) == TINY
        with pytest.raises(ConfigError):
            VitConfig.from_dict({"bogus": 1})

    def test_vit_b_backbone_size(self):
        # ~85.8M parameters without the classifier
        assert round(parameter_count(PRESETS["vit-b16"]) / 1e6, 1) == 85.8


class TestCheckpoint:
    def test_tensor_count_formula(self):
        ckpt = init_toy_checkpoint(TINY, Rng(0))
        assert len(ckpt) == 5 + 8 * TINY.num_layers == 21

    def test_deterministic_and_seed_sensitive(self):
        a, b = init_toy_checkpoint(TINY, Rng(4)), init_toy_checkpoint(TINY, Rng(4))
        assert a.equals(b)
        assert not a.equals(init_toy_checkpoint(TINY, Rng(5)))

    def test_init_scheme(self):
        ckpt = init_toy_checkpoint(TINY, Rng(0))
        fc1 = ckpt["blocks.1.mlp.fc1"].data
        assert np.all(fc1[-1] == 0)
        assert np.abs(fc1[:-1]).max() <= 0.04
        np.testing.assert_array_equal(ckpt["norm"].data, np.stack([np.ones(16), np.zeros(16)]))

    def test_save_load_save(self, tmp_path):
        ckpt = init_toy_checkpoint(TINY, Rng(0))
        p1, p2 = tmp_path / "a.sctw", tmp_path / "b.sctw"
        save_checkpoint(p1, ckpt)
        save_checkpoint(p2, load_checkpoint(p1, TINY))
        assert p1.read_bytes() == p2.read_bytes()
        shapes = checkpoint_shapes(TINY)
        expected = 12 + sum(2 + len(n) + 1 + 8 * len(s) + 1 + 4 * int(np.prod(s)) for n, s in shapes.items())
        assert p1.stat().st_size == expected

    def test_corrupt_magic(self, tmp_path):
        p = tmp_path / "a.sctw"
        save_checkpoint(p, init_toy_checkpoint(TINY, Rng(0)))
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_checkpoint(p)

    def test_missing_and_misshapen(self):
        tensors = dict(init_toy_checkpoint(TINY, Rng(0)).items())
        del tensors["blocks.2.attn.q"]
        with pytest.raises(MissingTensorError, match="blocks.2.attn.q"):
            VisionTransformer(TINY, VitCheckpoint(tensors))
        tensors["blocks.2.attn.q"] = Tensor(np.zeros((3, 3)))
        with pytest.raises(DimensionError):
            VisionTransformer(TINY, VitCheckpoint(tensors))


class TestForward:
    def test_constant_input_uniform_logits(self):
        shapes = checkpoint_shapes(TINY)
        tensors = {}
        for name, s in shapes.items():
            arr = np.zeros(s, dtype=np.float32)
            if name.endswith(("ln1", "ln2", "norm")):
                arr[0] = 1
            tensors[name] = arr
        logits, _ = forward(VitCheckpoint(tensors), TINY, np.zeros((2, 3, 8, 8), np.float32))
        assert np.all(logits.data == logits.data[:, :1])

    def test_taps_every_layer(self):
        ckpt = init_toy_checkpoint(TINY, Rng(0))
        taps = [FeatureTap(l) for l in range(1, TINY.num_layers + 1)]
        _, tapped = forward(ckpt, TINY, images(TINY), taps)
        assert set(tapped) == set(taps)
        assert all(v.shape == (3, TINY.num_tokens, TINY.embed_dim) for v in tapped.values())

    def test_taps_do_not_perturb(self):
        ckpt = init_toy_checkpoint(TINY, Rng(0))
        a, _ = forward(ckpt, TINY, images(TINY))
        b, _ = forward(ckpt, TINY, images(TINY), [FeatureTap(1), FeatureTap(2, TapPoint.AFTER_MLP_RESIDUAL)])
        assert a.data.tobytes() == b.data.tobytes()

    def test_replay_bitwise(self):
        ckpt = init_toy_checkpoint(TINY, Rng(0))
        a, _ = forward(ckpt, TINY, images(TINY))
        b, _ = forward(ckpt, TINY, images(TINY))
        assert a.data.tobytes() == b.data.tobytes()

    def test_attn_tap_is_mlp_input(self):
        vit = VisionTransformer(TINY, init_toy_checkpoint(TINY, Rng(1)))
        sites = {site_of(l, TapPoint.AFTER_ATTN_RESIDUAL, 2): None for l in (1, 2)}
        vit.run(vit.embed(images(TINY)), taps=sites)
        x = vit.embed(images(TINY))
        for l in (1, 2):
            after_attn = T.add(x, vit.attention(l, x))
            assert after_attn.data.tobytes() == sites[site_of(l, TapPoint.AFTER_ATTN_RESIDUAL, 2)].data.tobytes()
            x = T.add(after_attn, vit.mlp(l, after_attn))

    def test_batch_permutation(self):
        ckpt = init_toy_checkpoint(TINY, Rng(0))
        x = images(TINY, b=5)
        perm = np.array([3, 0, 4, 1, 2])
        a, _ = forward(ckpt, TINY, x)
        b, _ = forward(ckpt, TINY, x[perm])
        np.testing.assert_allclose(b.data, a.data[perm], atol=1e-6)

    def test_image_shape_checked(self):
        with pytest.raises(DimensionError):
            forward(init_toy_checkpoint(TINY, Rng(0)), TINY, np.zeros((1, 3, 9, 9), np.float32))

    def test_backbone_leaves_produce_no_gradients(self):
        vit = VisionTransformer(TINY, init_toy_checkpoint(TINY, Rng(0)))
        with Tape() as tape:
            w = tape.leaf("w", np.ones((TINY.embed_dim, 1), np.float32))
            loss = T.sum_all(T.matmul(vit.features(images(TINY)), w))
            grads = T.grad_of(loss, tape)
        assert set(grads) == {"w"}
