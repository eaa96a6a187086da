"""Tower behavior: backbone shapes, patch pooling, masks, ablation switch."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brivl import autodiff as ad
from brivl import vocab
from brivl.autodiff import Tensor, no_grad
from brivl.encoders import EncoderConfig, ImageEncoder, TextEncoder, mspp
from brivl.rng import SplitMix64
from brivl.vocab import TokenBatch, batch_tokenize


@pytest.fixture()
def cfg():
    return EncoderConfig()


@pytest.fixture()
def image_encoder(cfg):
    return ImageEncoder(cfg, SplitMix64(11))


@pytest.fixture()
def text_encoder(cfg):
    return TextEncoder(cfg, SplitMix64(12))


def random_images(n, size=32, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 3, size, size)).astype(
        np.float32
    )


class TestBackbone:
    def test_default_stack_yields_12_channel_12x12_map(self, image_encoder):
        with no_grad():
            fmap = image_encoder.backbone(Tensor(random_images(2)))
        assert fmap.shape == (2, 12, 12, 12)

    def test_all_zero_image_gives_bias_path_response(self, cfg):
        enc = ImageEncoder(cfg, SplitMix64(13))
        # make the bias path visible: zero input flows through conv biases only
        enc.conv1.b.data = np.full(8, 0.2, dtype=np.float32)
        with no_grad():
            fmap = enc.backbone(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))
        # zero input + zero padding: every stage sees a constant, so each
        # channel of the map is exactly its bias-path response
        per_channel = fmap.data[0]
        expected = np.broadcast_to(per_channel[:, :1, :1], per_channel.shape)
        npt.assert_allclose(per_channel, expected, rtol=1e-5)
        assert per_channel.max() > 0  # the forced bias actually propagated

    def test_wrong_size_rejected(self, image_encoder):
        with pytest.raises(ad.ShapeError, match="image batch"):
            image_encoder.backbone(Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))


class TestMspp:
    def test_scale_one_equals_global_average(self):
        fmap = Tensor(np.random.default_rng(1).normal(size=(2, 5, 6, 6)).astype(
            np.float32))
        out = mspp(fmap, (1,))
        npt.assert_allclose(
            out.data[:, :, 0], fmap.data.mean(axis=(2, 3)), rtol=1e-5
        )

    def test_scales_1_2_on_2x2_map_hand_computed(self):
        cells = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        fmap = Tensor(cells[None, None])
        out = mspp(fmap, (1, 2)).data[0, 0]
        assert out.shape == (5,)
        npt.assert_allclose(out[0], 2.5, rtol=1e-6)  # mean of all four
        npt.assert_allclose(out[1:], [1.0, 2.0, 3.0, 4.0], rtol=1e-6)

    def test_paper_scales_give_37_patches(self):
        fmap = Tensor(np.zeros((1, 3, 12, 12), dtype=np.float32))
        assert mspp(fmap, (1, 6)).shape == (1, 3, 37)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from([1, 2, 3, 4, 6, 12]), min_size=1, max_size=4,
                    unique=True))
    def test_patch_count_law(self, scales):
        fmap = Tensor(np.zeros((1, 2, 12, 12), dtype=np.float32))
        out = mspp(fmap, scales)
        assert out.shape[2] == sum(s * s for s in scales)

    def test_scale_one_column_is_mean_of_every_scale_block(self):
        fmap = Tensor(np.random.default_rng(2).normal(size=(1, 4, 12, 12)).astype(
            np.float32))
        out = mspp(fmap, (1, 2, 3)).data[0]
        global_col = out[:, 0]
        npt.assert_allclose(out[:, 1:5].mean(axis=1), global_col, atol=1e-6)
        npt.assert_allclose(out[:, 5:14].mean(axis=1), global_col, atol=1e-6)

    def test_indivisible_map_rejected(self):
        fmap = Tensor(np.zeros((1, 2, 10, 10), dtype=np.float32))
        with pytest.raises(ad.ShapeError, match="scale"):
            mspp(fmap, (3,))


class TestConfig:
    def test_default_patch_count_is_37(self, cfg):
        assert cfg.n_patches == 37 and cfg.feature_map_size == 12

    def test_scale_not_dividing_map_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            EncoderConfig(mspp_scales=(5,))

    def test_heads_must_divide_widths(self):
        with pytest.raises(ValueError, match="heads"):
            EncoderConfig(sa_heads=5)


class TestImageEncoder:
    def test_identical_images_identical_embeddings(self, image_encoder):
        img = random_images(1, seed=3)
        batch = np.concatenate([img, img])
        with no_grad():
            z = image_encoder(Tensor(batch)).data
        npt.assert_array_equal(z[0], z[1])
        cos = float(z[0] @ z[1])
        assert abs(cos - 1.0) < 1e-6

    def test_embeddings_are_unit_norm(self, image_encoder):
        with no_grad():
            z = image_encoder(Tensor(random_images(5, seed=4))).data
        npt.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)

    def test_use_sa_false_reduces_to_pool_and_head(self, cfg):
        ablated = EncoderConfig(use_sa=False)
        enc = ImageEncoder(ablated, SplitMix64(21))
        imgs = Tensor(random_images(2, seed=5))
        with no_grad():
            z = enc(imgs).data
            fmap = enc.backbone(imgs)
            patches = mspp(fmap, ablated.mspp_scales)
            fused = ad.mean(ad.transpose(patches, (0, 2, 1)), axis=1)
            manual = ad.l2_normalize(enc.head(fused)).data
        npt.assert_array_equal(z, manual)

    def test_ablated_encoder_has_no_attention_parameters(self):
        enc = ImageEncoder(EncoderConfig(use_sa=False), SplitMix64(22))
        assert not any(name.startswith("sa.") for name, _ in enc.named_parameters())

    def test_patch_attention_is_permutation_equivariant(self, cfg):
        # no positional encoding on the patch sequence: permuting positions
        # permutes outputs identically
        layer_rng = SplitMix64(23)
        from brivl.layers import TransformerEncoderLayer

        layer = TransformerEncoderLayer(12, cfg.sa_heads, 48, layer_rng)
        x = np.random.default_rng(6).normal(size=(1, 7, 12)).astype(np.float32)
        perm = np.random.default_rng(7).permutation(7)
        with no_grad():
            out = layer(Tensor(x)).data
            out_perm = layer(Tensor(x[:, perm])).data
        npt.assert_allclose(out_perm, out[:, perm], atol=1e-5)

    def test_single_position_attention_is_singleton_softmax(self):
        from brivl.layers import MultiHeadSelfAttention

        attn = MultiHeadSelfAttention(12, 4, SplitMix64(24))
        x = Tensor(np.random.default_rng(8).normal(size=(1, 1, 12)).astype(np.float32))
        with no_grad():
            scores = ad.softmax(Tensor(np.zeros((1, 4, 1, 1), dtype=np.float32)))
            out = attn(x)
        npt.assert_array_equal(scores.data, np.ones((1, 4, 1, 1)))
        assert out.shape == (1, 1, 12)


class TestTextEncoder:
    def test_identical_sequences_identical_embeddings(self, text_encoder, cfg):
        tb = batch_tokenize(["red circle", "red circle"], cfg.max_text_len)
        with no_grad():
            z = text_encoder(tb).data
        npt.assert_array_equal(z[0], z[1])

    def test_padding_content_never_changes_embedding(self, text_encoder, cfg):
        base = batch_tokenize(["red circle nice"], cfg.max_text_len)
        with no_grad():
            z_base = text_encoder(base).data
        poisoned = base.ids.copy()
        poisoned[0, 3:] = 5  # garbage ids beyond the valid length
        with no_grad():
            z_poisoned = text_encoder(TokenBatch(poisoned, base.lengths)).data
        npt.assert_array_equal(z_base, z_poisoned)

    def test_row_embedding_independent_of_batch_neighbors(self, text_encoder, cfg):
        alone = batch_tokenize(["blue square"], cfg.max_text_len)
        together = batch_tokenize(
            ["blue square", "large orange triangle day"], cfg.max_text_len
        )
        with no_grad():
            z_alone = text_encoder(alone).data[0]
            z_together = text_encoder(together).data[0]
        npt.assert_array_equal(z_alone, z_together)

    def test_empty_text_rejected(self, text_encoder, cfg):
        tb = batch_tokenize([""], cfg.max_text_len)
        with pytest.raises(ValueError, match="empty text"):
            text_encoder(tb)

    def test_embeddings_are_unit_norm(self, text_encoder, cfg):
        tb = batch_tokenize(["red circle", "small triangle day"], cfg.max_text_len)
        with no_grad():
            z = text_encoder(tb).data
        npt.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)


class TestTokenize:
    def test_known_words_map_to_their_ids(self):
        ids, length = vocab.tokenize("red circle red", 8)
        assert length == 3
        assert ids[0] == vocab.TOKEN_TO_ID["red"]
        assert ids[1] == vocab.TOKEN_TO_ID["circle"]
        assert ids[2] == ids[0]
        assert all(i == vocab.PAD_ID for i in ids[3:])

    def test_unknown_words_absorbed_as_unk(self):
        ids, length = vocab.tokenize("zebra circle", 8)
        assert length == 2 and ids[0] == vocab.UNK_ID

    def test_round_trip_reproduces_known_tokens(self):
        text = "small blue triangle nice photo"
        ids, _ = vocab.tokenize(text, 16)
        assert vocab.detokenize(ids) == text

    def test_truncation_at_max_len(self):
        ids, length = vocab.tokenize("red red red red", 2)
        assert length == 2 and ids.shape == (2,)
