import numpy as np
import pytest

from cinefuse.encoders import (
    EMBED_DIM,
    EmbeddingSequence,
    PrecomputedImageProvider,
    StackEncoder,
    encode_clip_segmentation,
    seg_cnn_forward,
)
from cinefuse.errors import ContractError, IngestError, ShapeError
from cinefuse.gradcheck import grad_check
from cinefuse.rng import rng_for
from cinefuse.sttf import write_sttf
from cinefuse.tensor import Tensor
from cinefuse.training import focal_loss
from cinefuse.windowing import ClipStacks


def scalar_loop_encoder(stack, enc: StackEncoder):
    """Literal nested-loop reimplementation of the encoder forward pass."""
    k, s = 3, 2
    c_in, side = enc.in_channels, enc.side

    def conv(x, w, b, n_out):
        c, h, _ = x.shape
        oh = (h - k) // s + 1
        out = np.zeros((n_out, oh, oh))
        for f in range(n_out):
            for i in range(oh):
                for j in range(oh):
                    acc = 0.0
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += x[ci, i * s + di, j * s + dj] * w[(ci * k + di) * k + dj, f]
                    out[f, i, j] = max(acc + b[f], 0.0)
        return out

    h1 = conv(stack, enc.conv1_w.data, enc.conv1_b.data, 16)
    h2 = conv(h1, enc.conv2_w.data, enc.conv2_b.data, 32)
    pooled = np.array([h2[f].mean() for f in range(32)])
    emb = np.maximum(pooled @ enc.fc_embed_w.data + enc.fc_embed_b.data, 0.0)
    logit = float((emb @ enc.fc_head_w.data + enc.fc_head_b.data)[0])
    return emb, logit


class TestForward:
    def test_zero_stack_zero_bias_gives_head_bias(self):
        enc = StackEncoder.init(rng_for(0, "enc"), side=16)
        emb, logit = seg_cnn_forward(np.zeros((3, 16, 16)), enc)
        np.testing.assert_array_equal(emb, np.zeros(EMBED_DIM))
        assert logit == float(enc.fc_head_b.data[0])

    def test_embedding_is_256_and_finite(self):
        enc = StackEncoder.init(rng_for(1, "enc"))
        stack = rng_for(1, "stack").random((3, 64, 64))
        emb, logit = seg_cnn_forward(stack, enc)
        assert emb.shape == (EMBED_DIM,)
        assert np.isfinite(emb).all() and np.isfinite(logit)

    def test_matches_scalar_loop_oracle(self):
        enc = StackEncoder.init(rng_for(13, "enc"), side=24)
        stack = rng_for(13, "stack").random((3, 24, 24))
        emb, logit = seg_cnn_forward(stack, enc)
        ref_emb, ref_logit = scalar_loop_encoder(stack, enc)
        np.testing.assert_allclose(emb, ref_emb, atol=1e-10)
        assert abs(logit - ref_logit) < 1e-10

    def test_wrong_dims_rejected(self):
        enc = StackEncoder.init(rng_for(2, "enc"))
        with pytest.raises(ShapeError):
            enc.forward(Tensor(np.zeros((3, 32, 32))))

    def test_deterministic(self):
        enc = StackEncoder.init(rng_for(3, "enc"), side=16)
        stack = rng_for(3, "stack").random((3, 16, 16))
        a = seg_cnn_forward(stack, enc)
        b = seg_cnn_forward(stack, enc)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]


class TestEncodeClip:
    def test_rows_align_with_stacks(self):
        enc = StackEncoder.init(rng_for(4, "enc"), side=16)
        stacks = rng_for(4, "stacks").random((3, 3, 16, 16))
        s = encode_clip_segmentation(stacks, enc)
        assert s.shape == (3, EMBED_DIM)
        for k in range(3):
            row, _ = seg_cnn_forward(stacks[k], enc)
            np.testing.assert_allclose(s[k], row, atol=1e-12)

    def test_identical_stacks_identical_rows(self):
        enc = StackEncoder.init(rng_for(5, "enc"), side=16)
        one = rng_for(5, "stack").random((1, 3, 16, 16))
        s = encode_clip_segmentation(np.repeat(one, 4, axis=0), enc)
        for k in range(1, 4):
            np.testing.assert_array_equal(s[k], s[0])

    def test_permutation_permutes_rows(self):
        enc = StackEncoder.init(rng_for(6, "enc"), side=16)
        stacks = rng_for(6, "stacks").random((4, 3, 16, 16))
        perm = np.array([2, 0, 3, 1])
        np.testing.assert_array_equal(
            encode_clip_segmentation(stacks[perm], enc),
            encode_clip_segmentation(stacks, enc)[perm],
        )

    def test_empty_rejected(self):
        enc = StackEncoder.init(rng_for(7, "enc"), side=16)
        with pytest.raises(ContractError):
            encode_clip_segmentation(np.zeros((0, 3, 16, 16)), enc)

    def test_mask_encoder_never_reads_frames(self):
        enc = StackEncoder.init(rng_for(8, "enc"), side=16)
        rng = rng_for(8, "data")
        masks = (rng.random((2, 3, 16, 16)) > 0.5).astype(float)
        clip_a = ClipStacks("c", 1, rng.random((2, 3, 16, 16)).astype(np.float32), masks)
        clip_b = ClipStacks("c", 1, rng.random((2, 3, 16, 16)).astype(np.float32), masks)
        np.testing.assert_array_equal(
            encode_clip_segmentation(clip_a.mask_stacks.astype(float), enc),
            encode_clip_segmentation(clip_b.mask_stacks.astype(float), enc),
        )


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_grad_matches_finite_differences(self, seed):
        enc = StackEncoder.init(rng_for(seed, "enc-gc"), side=16)
        stack = rng_for(seed, "stack-gc").standard_normal((1, 3, 16, 16)) * 0.5
        params = enc.named_parameters()
        worst = 0.0
        for name, p in params.items():

            def loss_fn(t, name=name):
                trial = StackEncoder(**{**params, name: t}, in_channels=3, side=16)
                _, logits = trial.forward(Tensor(stack))
                return focal_loss(logits, np.ones((1, 1))).sum()

            err = grad_check(loss_fn, p, max_entries=6, rng=rng_for(seed, "gc-pick", name))
            worst = max(worst, err)
        assert worst < 1e-4, f"seed {seed}: max rel err {worst}"

    def test_grad_wrt_input(self):
        enc = StackEncoder.init(rng_for(21, "enc-gc"), side=16)
        stack = rng_for(21, "stack-gc").standard_normal((1, 3, 16, 16)) * 0.5

        def loss_fn(t):
            _, logits = enc.forward(t)
            return focal_loss(logits, np.zeros((1, 1))).sum()

        enc.set_requires_grad(False)
        assert grad_check(loss_fn, Tensor(stack), max_entries=24, rng=rng_for(21, "pick")) < 1e-4


class TestProviders:
    def _clip(self, n_stacks=5):
        rng = rng_for(30, "prov")
        return ClipStacks(
            "clip_x", 0,
            rng.random((n_stacks, 3, 16, 16)).astype(np.float32),
            (rng.random((n_stacks, 3, 16, 16)) > 0.5).astype(np.uint8),
        )

    def test_precomputed_accepted_when_aligned(self, tmp_path):
        clip = self._clip(5)
        write_sttf(tmp_path / "clip_x.img.sttf", rng_for(31, "emb").random((5, EMBED_DIM)))
        emb = PrecomputedImageProvider(tmp_path).embeddings(clip)
        assert emb.shape == (5, EMBED_DIM)

    def test_precomputed_misaligned_rejected(self, tmp_path):
        clip = self._clip(5)
        write_sttf(tmp_path / "clip_x.img.sttf", np.zeros((4, EMBED_DIM)))
        with pytest.raises(IngestError, match="align"):
            PrecomputedImageProvider(tmp_path).embeddings(clip)

    def test_precomputed_missing_file(self, tmp_path):
        with pytest.raises(IngestError, match="missing"):
            PrecomputedImageProvider(tmp_path).embeddings(self._clip())

    def test_sequence_validation(self):
        with pytest.raises(ShapeError):
            EmbeddingSequence("c", np.zeros((3, EMBED_DIM)), np.zeros((4, EMBED_DIM)), 0)
        with pytest.raises(ShapeError):
            EmbeddingSequence("c", np.zeros((3, 128)), np.zeros((3, 128)), 0)
