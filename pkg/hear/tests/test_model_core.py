import torch
from django.test import SimpleTestCase

from hear.exceptions import (
    ConfigError,
    EmptyBatchError,
    NonFiniteInputError,
    ShapeMismatchError,
    TimeOverflowError,
)
from hear.model_core import (
    BiasedSelfAttention,
    ChannelSliceAttention,
    HEARClassifier,
    HEARModel,
    ModelConfig,
    TemporalEncoder,
    assemble_tokens,
    compute_spatial_bias,
    count_parameters,
    expand_bias,
    finetune_forward,
    substitute_mask_token,
)

from .helpers import small_config


def random_coordinates(generator, channels, dtype=torch.float64):
    return 0.09 * torch.randn(channels, 3, generator=generator, dtype=dtype)


class ModelConfigTests(SimpleTestCase):
    def test_presets(self):
        tiny = ModelConfig.tiny()
        self.assertEqual((tiny.num_layers, tiny.num_heads, tiny.hidden_dim), (6, 4, 64))
        base = ModelConfig.base(hidden_dim=128)
        self.assertEqual((base.num_layers, base.num_heads), (12, 8))
        self.assertEqual(base.head_dim, 16)

    def test_invalid_configs(self):
        with self.assertRaises(ConfigError):
            ModelConfig.custom(hidden_dim=10, num_heads=4)
        with self.assertRaises(ConfigError):
            ModelConfig(variant='tiny', num_layers=2)
        with self.assertRaises(ConfigError):
            ModelConfig(variant='huge')

    def test_dict_round_trip(self):
        config = small_config(use_spatial_bias=False)
        self.assertEqual(ModelConfig.from_dict(config.to_dict()), config)


class TemporalEncoderTests(SimpleTestCase):
    def test_patch_length_must_match(self):
        encoder = TemporalEncoder(32, 16)
        self.assertEqual(encoder(torch.zeros(2, 3, 4, 32)).shape, (2, 3, 4, 16))
        with self.assertRaises(ShapeMismatchError):
            encoder(torch.zeros(2, 3, 4, 31))

    def test_patches_are_encoded_independently(self):
        torch.manual_seed(0)
        encoder = TemporalEncoder(8, 4).double()
        patches = torch.randn(1, 2, 3, 8, dtype=torch.float64)
        full = encoder(patches)
        torch.testing.assert_close(full[0, 1, 2], encoder(patches[0, 1, 2]))


class SpatialBiasTests(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.model = HEARModel(small_config()).double()
        self.generator = torch.Generator().manual_seed(1)

    def test_bias_entries_come_from_coordinate_differences(self):
        coordinates = random_coordinates(self.generator, 4)
        bias = compute_spatial_bias(coordinates, self.model.bias_mlp)
        self.assertEqual(bias.shape, (2, 4, 4))
        expected = self.model.bias_mlp(coordinates[1] - coordinates[3])
        torch.testing.assert_close(bias[:, 1, 3], expected)

    def test_translation_invariance(self):
        for _ in range(50):
            coordinates = random_coordinates(self.generator, 5)
            shift = 0.05 * torch.randn(1, 3, generator=self.generator, dtype=torch.float64)
            torch.testing.assert_close(
                compute_spatial_bias(coordinates + shift, self.model.bias_mlp),
                compute_spatial_bias(coordinates, self.model.bias_mlp),
                rtol=1e-6,
                atol=1e-9,
            )

    def test_expansion_is_time_constant_with_zero_cls(self):
        for _ in range(100):
            heads = int(torch.randint(1, 4, (1,), generator=self.generator))
            channels = int(torch.randint(1, 6, (1,), generator=self.generator))
            time_patches = int(torch.randint(1, 5, (1,), generator=self.generator))
            per_head = torch.randn(heads, channels, channels, generator=self.generator, dtype=torch.float64)
            expanded = expand_bias(per_head, time_patches, with_cls=True)
            length = 1 + channels * time_patches
            self.assertEqual(expanded.shape, (heads, length, length))
            self.assertTrue(torch.all(expanded[:, 0, :] == 0))
            self.assertTrue(torch.all(expanded[:, :, 0] == 0))
            e1, e2 = channels - 1, 0
            t1, t2 = time_patches - 1, 0
            i, j = 1 + e1 * time_patches + t1, 1 + e2 * time_patches + t2
            self.assertTrue(torch.equal(expanded[:, i, j], per_head[:, e1, e2]))
            grid = expanded[:, 1:, 1:].reshape(heads, channels, time_patches, channels, time_patches)
            self.assertTrue(torch.equal(grid, grid[:, :, :1, :, :1].expand_as(grid)))

    def test_expansion_rejects_non_square(self):
        with self.assertRaises(ShapeMismatchError):
            expand_bias(torch.zeros(2, 3, 4), 2)

    def test_non_finite_coordinates(self):
        coordinates = torch.zeros(3, 3, dtype=torch.float64)
        coordinates[1, 2] = float('nan')
        with self.assertRaises(NonFiniteInputError):
            self.model.spatial_embed(coordinates)
        with self.assertRaises(NonFiniteInputError):
            compute_spatial_bias(coordinates, self.model.bias_mlp)


class TokenAssemblyTests(SimpleTestCase):
    def test_token_layout_is_channel_major(self):
        batch, channels, time_patches, dim = 2, 3, 4, 5
        patches = torch.randn(batch, channels, time_patches, dim)
        spatial = torch.randn(channels, dim)
        table = torch.randn(6, dim)
        cls = torch.randn(dim)
        sequence = assemble_tokens(patches, spatial, table, cls)
        self.assertEqual(sequence.tokens.shape, (batch, 1 + channels * time_patches, dim))
        torch.testing.assert_close(sequence.tokens[1, 0], cls)
        e, t = 2, 1
        torch.testing.assert_close(sequence.tokens[1, 1 + e * time_patches + t], patches[1, e, t] + spatial[e] + table[t])
        torch.testing.assert_close(sequence.patch_view(), patches + spatial[None, :, None] + table[None, None, :4])

    def test_time_overflow(self):
        with self.assertRaises(TimeOverflowError):
            assemble_tokens(torch.zeros(1, 2, 7, 4), torch.zeros(2, 4), torch.zeros(6, 4), torch.zeros(4))

    def test_mask_token_substitution(self):
        embeddings = torch.randn(2, 3, 2, 4)
        mask = torch.tensor([[True, False], [False, False], [False, True]])
        token = torch.full((4,), 7.0)
        out = substitute_mask_token(embeddings, mask, token)
        torch.testing.assert_close(out[:, 0, 0], token.expand(2, 4))
        torch.testing.assert_close(out[:, 2, 1], token.expand(2, 4))
        torch.testing.assert_close(out[:, 1], embeddings[:, 1])


class AttentionTests(SimpleTestCase):
    def test_bias_is_added_to_logits(self):
        torch.manual_seed(0)
        attention = BiasedSelfAttention(8, 2).double()
        x = torch.randn(1, 5, 8, dtype=torch.float64)
        bias = torch.randn(2, 5, 5, dtype=torch.float64)
        torch.testing.assert_close(attention.attention_logits(x, bias) - attention.attention_logits(x), bias.expand(1, 2, 5, 5))
        _, weights = attention(x, bias)
        torch.testing.assert_close(weights, attention.attention_logits(x, bias).softmax(dim=-1))

    def test_single_channel_attends_to_itself(self):
        torch.manual_seed(1)
        attention = ChannelSliceAttention(8, 2).double()
        tokens = torch.randn(2, 1, 3, 8, dtype=torch.float64)
        _, weights = attention(tokens)
        self.assertEqual(weights.shape, (6, 2, 1, 1))
        self.assertTrue(torch.equal(weights, torch.ones_like(weights)))

    def test_time_slices_are_independent(self):
        torch.manual_seed(2)
        attention = ChannelSliceAttention(8, 2).double()
        tokens = torch.randn(2, 4, 3, 8, dtype=torch.float64)
        changed = tokens.clone()
        changed[:, :, 1] += torch.randn(2, 4, 8, dtype=torch.float64)
        before, _ = attention(tokens)
        after, _ = attention(changed)
        for t in (0, 2):
            torch.testing.assert_close(after[:, :, t], before[:, :, t])
        self.assertFalse(torch.allclose(after[:, :, 1], before[:, :, 1]))

    def test_zero_bias_matches_unbiased_stack(self):
        torch.manual_seed(3)
        model = HEARModel(small_config()).double().eval()
        length = 1 + 3 * 2
        tokens = torch.randn(2, length, model.config.hidden_dim, dtype=torch.float64)
        zero = torch.zeros(model.config.num_heads, length, length, dtype=torch.float64)
        biased, biased_maps = model.transformer_forward(tokens, zero, return_attention=True)
        plain, plain_maps = model.transformer_forward(tokens, None, return_attention=True)
        torch.testing.assert_close(biased, plain)
        for got, expected in zip(biased_maps, plain_maps):
            torch.testing.assert_close(got, expected)


class LogitBiasTests(SimpleTestCase):
    """Bias as seen by every layer's attention logits during a full forward pass."""

    def setUp(self):
        torch.manual_seed(4)
        self.model = HEARModel(small_config()).double().eval()
        self.channels, self.time_patches = 3, 2
        generator = torch.Generator().manual_seed(5)
        self.coordinates = random_coordinates(generator, self.channels)
        patches = torch.randn(2, self.channels, self.time_patches, self.model.config.window_len,
                              generator=generator, dtype=torch.float64)

        captured = []
        handles = [
            block.attention.register_forward_pre_hook(lambda module, args: captured.append((module, args[0], args[1])))
            for block in self.model.blocks
        ]
        with torch.no_grad():
            self.model(patches, self.coordinates)
        for handle in handles:
            handle.remove()
        self.assertEqual(len(captured), len(self.model.blocks))
        with torch.no_grad():
            self.offsets = [
                module.attention_logits(x, bias) - module.attention_logits(x) for module, x, bias in captured
            ]

    def test_cls_row_and_column_are_unbiased(self):
        for offset in self.offsets:
            self.assertTrue(torch.equal(offset[..., 0, :], torch.zeros_like(offset[..., 0, :])))
            self.assertTrue(torch.equal(offset[..., :, 0], torch.zeros_like(offset[..., :, 0])))

    def test_bias_is_constant_over_time(self):
        per_head = self.model.spatial_bias(self.coordinates).detach()
        c, n = self.channels, self.time_patches
        for offset in self.offsets:
            grid = offset[:, :, 1:, 1:].reshape(2, -1, c, n, c, n)
            for t1 in range(n):
                for t2 in range(n):
                    torch.testing.assert_close(
                        grid[:, :, :, t1, :, t2], per_head.expand(2, -1, c, c), rtol=0, atol=1e-12
                    )


class HEARModelTests(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.config = small_config()
        self.generator = torch.Generator().manual_seed(2)

    def test_layout_polymorphism(self):
        model = HEARModel(self.config)
        before = {name: p.detach().clone() for name, p in model.named_parameters()}
        count = count_parameters(model)
        for channels in (1, 3, 22, 59):
            patches = torch.randn(2, channels, 3, self.config.window_len)
            coordinates = random_coordinates(self.generator, channels, torch.float32)
            output = model(patches, coordinates, return_attention=True)
            self.assertEqual(output.hidden.shape, (2, 1 + channels * 3, self.config.hidden_dim))
            self.assertEqual(output.channel_attention.shape, (2 * 3, self.config.num_heads, channels, channels))
            self.assertEqual(len(output.layer_attention), self.config.num_layers)
        self.assertEqual(count_parameters(model), count)
        for name, parameter in model.named_parameters():
            self.assertTrue(torch.equal(parameter, before[name]), name)

    def test_joint_channel_permutation_equivariance(self):
        model = HEARModel(self.config).double().eval()
        for _ in range(50):
            channels = int(torch.randint(2, 7, (1,), generator=self.generator))
            time_patches = int(torch.randint(1, 4, (1,), generator=self.generator))
            patches = torch.randn(2, channels, time_patches, self.config.window_len,
                                  generator=self.generator, dtype=torch.float64)
            coordinates = random_coordinates(self.generator, channels)
            perm = torch.randperm(channels, generator=self.generator)

            base = model(patches, coordinates).hidden
            permuted = model(patches[:, perm], coordinates[perm]).hidden
            grid = base[:, 1:].reshape(2, channels, time_patches, -1)
            permuted_grid = permuted[:, 1:].reshape(2, channels, time_patches, -1)
            torch.testing.assert_close(permuted_grid, grid[:, perm], rtol=1e-6, atol=1e-9)
            torch.testing.assert_close(permuted[:, 0], base[:, 0], rtol=1e-6, atol=1e-9)

    def test_ablations(self):
        patches = torch.randn(1, 3, 2, self.config.window_len)
        coordinates = random_coordinates(self.generator, 3, torch.float32)
        for flags in (
            dict(use_spatial_embedding=False),
            dict(use_channel_attention=False),
            dict(use_channel_attention=False, use_spatial_bias=False),
        ):
            with self.subTest(**flags):
                model = HEARModel(small_config(**flags))
                output = model(patches, coordinates, return_attention=True)
                self.assertEqual(output.hidden.shape, (1, 7, self.config.hidden_dim))
                if not flags.get('use_channel_attention', True):
                    self.assertIsNone(output.channel_attention)
                if not flags.get('use_spatial_bias', True):
                    self.assertIsNone(model.spatial_bias(coordinates))

    def test_without_spatial_embedding_coordinates_only_enter_through_bias(self):
        model = HEARModel(small_config(use_spatial_embedding=False, use_spatial_bias=False)).eval()
        patches = torch.randn(1, 3, 2, self.config.window_len)
        first = model(patches, random_coordinates(self.generator, 3, torch.float32)).hidden
        second = model(patches, random_coordinates(self.generator, 3, torch.float32)).hidden
        torch.testing.assert_close(first, second)

    def test_input_errors(self):
        model = HEARModel(self.config)
        coordinates = torch.zeros(3, 3)
        with self.assertRaises(EmptyBatchError):
            model(torch.zeros(0, 3, 2, self.config.window_len), coordinates)
        with self.assertRaises(ShapeMismatchError):
            model(torch.zeros(1, 3, 2, self.config.window_len), torch.zeros(2, 3))
        with self.assertRaises(ShapeMismatchError):
            model(torch.zeros(3, 2, self.config.window_len), coordinates)
        with self.assertRaises(TimeOverflowError):
            model(torch.zeros(1, 3, self.config.max_time_patches + 1, self.config.window_len), coordinates)
        with self.assertRaises(ShapeMismatchError):
            model(torch.zeros(1, 3, 2, self.config.window_len), coordinates, mask=torch.zeros(2, 2, dtype=torch.bool))

    def test_mask_changes_masked_inputs_only_through_mask_token(self):
        model = HEARModel(self.config).eval()
        patches = torch.randn(1, 2, 2, self.config.window_len)
        coordinates = random_coordinates(self.generator, 2, torch.float32)
        mask = torch.tensor([[True, False], [False, False]])
        altered = patches.clone()
        altered[0, 0, 0] = torch.randn(self.config.window_len)
        torch.testing.assert_close(
            model(patches, coordinates, mask=mask).hidden,
            model(altered, coordinates, mask=mask).hidden,
        )


class ClassifierTests(SimpleTestCase):
    def test_logits_shape(self):
        torch.manual_seed(0)
        model = HEARClassifier(small_config(), num_classes=3)
        logits = finetune_forward(model, torch.randn(4, 5, 2, 32), 0.09 * torch.randn(5, 3))
        self.assertEqual(logits.shape, (4, 3))

    def test_linear_probe_freezes_encoder(self):
        model = HEARClassifier(small_config(), num_classes=2, linear_probe=True)
        self.assertFalse(any(p.requires_grad for p in model.encoder.parameters()))
        self.assertTrue(all(p.requires_grad for p in model.head.parameters()))
