import numpy as np
import pytest
import torch

from staincycle.model import (AttentionConfig, DiscriminatorConfig, Generator,
                              GeneratorConfig, PatchDiscriminator, SelfAttention2d,
                              init_discriminator, init_generator, load_checkpoint,
                              load_module_arrays, save_checkpoint, state_dict_to_arrays,
                              strip_attention)

SMALL = GeneratorConfig(image_size=32, base_channels=8, n_downsample=2, n_res_blocks=2)


class TestInit:
    def test_deterministic(self):
        a = init_generator(SMALL, 0)
        b = init_generator(SMALL, 0)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_seed_changes_weights(self):
        a = init_generator(SMALL, 0)
        b = init_generator(SMALL, 1)
        assert not torch.equal(a.stem[0].weight, b.stem[0].weight)

    def test_decoder_only_attention_placement(self):
        gen = init_generator(SMALL, 0)
        assert len(gen.decoder_attn) == SMALL.n_downsample
        assert len(gen.encoder_attn) == 0

    def test_encoder_and_decoder_attention_placement(self):
        cfg = GeneratorConfig(**{**SMALL.to_dict(), "attention_mode": "encoder_and_decoder"})
        gen = init_generator(cfg, 0)
        assert len(gen.decoder_attn) == cfg.n_downsample
        assert len(gen.encoder_attn) == cfg.n_downsample

    def test_gamma_zero_at_init(self):
        gen = init_generator(SMALL, 3)
        gammas = [p for n, p in gen.named_parameters() if n.endswith("gamma")]
        assert gammas and all(float(g.detach()) == 0.0 for g in gammas)

    def test_conv_init_statistics(self):
        gen = init_generator(GeneratorConfig(image_size=64, base_channels=64), 0)
        w = gen.stem[0].weight.detach().ravel()
        assert abs(float(w.std()) - 0.02) < 0.005
        assert abs(float(w.mean())) < 0.005


def expected_generator_params(cfg: GeneratorConfig) -> int:
    """Independent parameter-count formula from the layer plan."""

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    def norm(c):
        return 2 * c

    def attention(c):
        key = max(1, c // cfg.attention.key_channels_divisor)
        return conv(c, key, 1) * 2 + conv(c, c, 1) + 1  # q, k, value, gamma

    total = 0
    c = cfg.base_channels
    total += conv(4 if cfg.use_structure_channel else 3, c, 7) + norm(c)
    ch = c
    for _ in range(cfg.n_downsample):
        total += conv(ch, ch * 2, 3) + norm(ch * 2)
        ch *= 2
        if cfg.attention_mode == "encoder_and_decoder":
            total += attention(ch)
    total += cfg.n_res_blocks * (2 * conv(ch, ch, 3) + 2 * norm(ch))
    for _ in range(cfg.n_downsample):
        total += conv(ch, ch // 2, 3) + norm(ch // 2)
        ch //= 2
        if cfg.attention_mode in ("decoder_only", "encoder_and_decoder"):
            total += attention(ch)
    total += conv(ch, 3, 7) + conv(ch, 1, 7)
    return total


@pytest.mark.parametrize("mode", ["none", "decoder_only", "encoder_and_decoder"])
def test_parameter_count_formula(mode):
    cfg = GeneratorConfig(image_size=32, base_channels=16, n_res_blocks=3, attention_mode=mode)
    gen = Generator(cfg)
    actual = sum(p.numel() for p in gen.parameters())
    assert actual == expected_generator_params(cfg)


class TestGeneratorForward:
    def test_shapes_and_ranges(self):
        cfg = GeneratorConfig(image_size=64, base_channels=8, n_res_blocks=2)
        gen = init_generator(cfg, 0)
        x = torch.rand(2, 4, 64, 64) * 2 - 1
        x[:, 3] = (x[:, 3] + 1) / 2
        rgb, edge = gen(x)
        assert rgb.shape == (2, 3, 64, 64) and edge.shape == (2, 1, 64, 64)
        assert rgb.min() > -1 and rgb.max() < 1
        assert edge.min() > 0 and edge.max() < 1

    def test_gamma_zero_equals_attention_free(self):
        gen = init_generator(SMALL, 7)
        plain = strip_attention(gen)
        x = torch.rand(2, 4, 32, 32)
        with torch.no_grad():
            rgb_a, edge_a = gen(x)
            rgb_b, edge_b = plain(x)
        assert float((rgb_a - rgb_b).abs().max()) <= 1e-6
        assert float((edge_a - edge_b).abs().max()) <= 1e-6

    def test_per_sample_independence(self):
        gen = init_generator(SMALL, 1)
        single = torch.rand(1, 4, 32, 32)
        x = torch.cat([single, single, torch.rand(1, 4, 32, 32)])
        with torch.no_grad():
            rgb, _ = gen(x)
        assert torch.allclose(rgb[0], rgb[1], atol=1e-6)

    def test_structure_channel_ignored_when_disabled(self):
        cfg = GeneratorConfig(**{**SMALL.to_dict(), "use_structure_channel": False})
        gen = init_generator(cfg, 0)
        x = torch.rand(1, 4, 32, 32)
        y = x.clone()
        y[:, 3] = 1 - y[:, 3]
        with torch.no_grad():
            rgb_a, edge_a = gen(x)
            rgb_b, edge_b = gen(y)
        assert torch.equal(rgb_a, rgb_b) and torch.equal(edge_a, edge_b)

    def test_wrong_spatial_size(self):
        gen = init_generator(SMALL, 0)
        with pytest.raises(ValueError):
            gen(torch.rand(1, 4, 64, 64))


class TestAttentionBlock:
    def test_identity_at_gamma_zero(self):
        block = SelfAttention2d(8, 2, gamma_init=0.0)
        x = torch.rand(2, 8, 5, 5)
        assert torch.equal(block(x), x)

    def test_single_position_closed_form(self):
        block = SelfAttention2d(8, 2, gamma_init=0.7)
        x = torch.rand(2, 8, 1, 1)
        expected = x + 0.7 * block.value(x)
        assert torch.allclose(block(x), expected, atol=1e-6)

    def test_rows_sum_to_one(self):
        block = SelfAttention2d(8, 2)
        with torch.no_grad():
            block.query.weight.normal_()
            block.key.weight.normal_()
        w = block.attention_weights(torch.rand(3, 8, 4, 4))
        assert torch.allclose(w.sum(dim=-1), torch.ones(3, 16), atol=1e-6)


def disc_output_size_oracle(size: int, n_layers: int) -> int:
    """Layer arithmetic: n_layers 4x4 stride-2 convs (pad 1), then two 4x4 stride-1."""
    for _ in range(n_layers):
        size = (size + 2 * 1 - 4) // 2 + 1
    for _ in range(2):
        size = (size + 2 * 1 - 4) // 1 + 1
    return size


class TestDiscriminator:
    @pytest.mark.parametrize("size", [70, 128])
    def test_output_size_matches_oracle(self, size):
        disc = init_discriminator(DiscriminatorConfig(base_channels=16), 0)
        out = disc(torch.rand(2, 3, size, size))
        expected = disc_output_size_oracle(size, 3)
        assert expected >= 1
        assert out.shape == (2, 1, expected, expected)

    def test_batch_preserved(self):
        disc = init_discriminator(DiscriminatorConfig(base_channels=8, n_layers=2), 0)
        assert disc(torch.rand(5, 3, 32, 32)).shape[0] == 5

    def test_too_small_input(self):
        disc = init_discriminator(DiscriminatorConfig(base_channels=8, n_layers=3), 0)
        with pytest.raises(ValueError, match="receptive"):
            disc(torch.rand(1, 3, 8, 8))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        gen = init_generator(SMALL, 9)
        tensors = state_dict_to_arrays(gen)
        save_checkpoint(tmp_path / "ck", {"generator": SMALL.to_dict()}, tensors)
        cfg, loaded = load_checkpoint(tmp_path / "ck")
        assert cfg["generator"]["base_channels"] == 8
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert np.array_equal(tensors[k], loaded[k]), k

    def test_load_into_module(self, tmp_path):
        gen = init_generator(SMALL, 9)
        tensors = {"g." + k: v for k, v in state_dict_to_arrays(gen).items()}
        save_checkpoint(tmp_path / "ck", {}, tensors)
        _, loaded = load_checkpoint(tmp_path / "ck")
        other = init_generator(SMALL, 123)
        load_module_arrays(other, loaded, "g.")
        x = torch.rand(1, 4, 32, 32)
        with torch.no_grad():
            assert torch.equal(gen(x)[0], other(x)[0])

    def test_byte_identical_rewrite(self, tmp_path):
        gen = init_generator(SMALL, 2)
        tensors = state_dict_to_arrays(gen)
        save_checkpoint(tmp_path / "a", {"x": 1}, tensors)
        save_checkpoint(tmp_path / "b", {"x": 1}, tensors)
        assert (tmp_path / "a/blob.bin").read_bytes() == (tmp_path / "b/blob.bin").read_bytes()
        assert (tmp_path / "a/index.json").read_text() == (tmp_path / "b/index.json").read_text()
