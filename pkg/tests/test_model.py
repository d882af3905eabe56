import numpy as np
import pytest

from a2clpt.centers import init_centers
from a2clpt.model import (
    Checkpoint,
    ConvHead,
    StreamEmbedding,
    adversarial_mask,
    adversarial_tcam,
    adversarial_tcam_backward,
    embed,
    embed_backward,
    embed_forward,
    fuse,
    fuse_backward,
    Fusion,
    init_params,
    load_checkpoint,
    mask_column_indices,
    save_checkpoint,
    tcam,
    tcam_backward,
)
from a2clpt.numkit import fd_grad_check


def random_params(seed=0, d=5, n_c=3, e=5, kappa=1):
    rng = np.random.default_rng(seed)
    return init_params(rng, d, n_c, e, kappa), rng


class TestEmbed:
    def test_zero_input_zero_biases(self):
        params, _ = random_params()
        out = embed(np.zeros((5, 4)), params.embed_rgb)
        np.testing.assert_array_equal(out, 0.0)

    def test_identity_weights_pass_nonnegative_input(self):
        emb = StreamEmbedding(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3))
        x = np.abs(np.random.default_rng(1).normal(size=(3, 6)))
        np.testing.assert_allclose(embed(x, emb), x)

    def test_output_nonnegative(self):
        params, rng = random_params(2)
        out = embed(rng.normal(size=(5, 9)), params.embed_rgb)
        assert np.all(out >= 0)

    def test_gradients_match_fd(self):
        params, rng = random_params(3)
        emb = params.embed_rgb
        x = rng.normal(size=(5, 6))
        probe = rng.normal(size=(5, 6))
        cache = embed_forward(x, emb)
        gw1, gb1, gw2, gb2 = embed_backward(cache, emb, probe)
        for name, arr, grad in (("w1", emb.w1, gw1), ("b1", emb.b1, gb1),
                                ("w2", emb.w2, gw2), ("b2", emb.b2, gb2)):
            base = arr.copy()

            def f(vec):
                arr[...] = vec.reshape(arr.shape)
                try:
                    return float((embed(x, emb) * probe).sum())
                finally:
                    arr[...] = base
            assert fd_grad_check(f, base.ravel(), 1e-6, grad) < 1e-4, name


class TestTcam:
    def test_kernel_one_is_per_step_linear(self):
        rng = np.random.default_rng(4)
        head = ConvHead(rng.normal(size=(2, 3, 1)), rng.normal(size=2))
        xe = rng.normal(size=(3, 5))
        out = tcam(xe, head)
        for t in range(5):
            for j in range(2):
                assert out[j, t] == pytest.approx(head.kernel[j, :, 0] @ xe[:, t] + head.bias[j])

    def test_constant_input_kernel3_interior_constant(self):
        rng = np.random.default_rng(5)
        head = ConvHead(rng.normal(size=(2, 3, 3)), rng.normal(size=2))
        col = rng.normal(size=3)
        xe = np.tile(col[:, None], (1, 7))
        out = tcam(xe, head)
        interior = out[:, 1:-1]
        np.testing.assert_allclose(interior - interior[:, :1], 0.0, atol=1e-12)
        # boundaries see zero padding, so they differ in general
        assert not np.allclose(out[:, 0], out[:, 1])

    def test_permutation_equivariance_kernel1(self):
        rng = np.random.default_rng(6)
        head = ConvHead(rng.normal(size=(2, 3, 1)), rng.normal(size=2))
        xe = rng.normal(size=(3, 6))
        perm = rng.permutation(6)
        np.testing.assert_allclose(tcam(xe[:, perm], head), tcam(xe, head)[:, perm])

    @pytest.mark.parametrize("kappa", [1, 3, 5])
    def test_gradients_match_fd(self, kappa):
        rng = np.random.default_rng(7)
        head = ConvHead(rng.normal(size=(2, 3, kappa)), rng.normal(size=2))
        xe = rng.normal(size=(3, 6))
        g_c = np.ones((2, 6))
        gk, gb, gx = tcam_backward(xe, head, g_c)
        base = head.kernel.copy()

        def f(vec):
            head.kernel[...] = vec.reshape(base.shape)
            try:
                return float(tcam(xe, head).sum())
            finally:
                head.kernel[...] = base
        assert fd_grad_check(f, base.ravel(), 1e-6, gk) < 1e-4

        def fx(vec):
            return float(tcam(vec.reshape(xe.shape), head).sum())
        assert fd_grad_check(fx, xe.ravel(), 1e-6, gx) < 1e-4
        np.testing.assert_allclose(gb, g_c.sum(axis=1))


class TestAdversarialMask:
    def test_forced_example(self):
        xe = np.arange(8, dtype=float).reshape(2, 4) + 1
        c_first = np.array([[5.0, 1.0, 4.0, 2.0]])
        out = adversarial_mask(xe, c_first, 0, 2.0)
        # l=4, s_a=2 -> k_a=2: columns 1 and 3 (1-indexed) zeroed
        np.testing.assert_array_equal(out[:, 0], 0.0)
        np.testing.assert_array_equal(out[:, 2], 0.0)
        np.testing.assert_array_equal(out[:, 1], xe[:, 1])
        np.testing.assert_array_equal(out[:, 3], xe[:, 3])

    def test_large_ratio_is_identity(self):
        xe = np.random.default_rng(8).normal(size=(3, 5))
        out = adversarial_mask(xe, np.zeros((2, 5)), 1, 40.0)
        np.testing.assert_array_equal(out, xe)

    def test_tie_rule_prefers_low_index(self):
        row = np.zeros((1, 6))
        idx = mask_column_indices(row[0], 3.0)
        np.testing.assert_array_equal(idx, [0, 1])

    def test_mask_count_and_top_scores(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            l = int(rng.integers(2, 12))
            s_a = float(rng.uniform(1.0, 6.0))
            row = rng.normal(size=l)
            k_a = int(np.floor(l / s_a))
            idx = mask_column_indices(row, s_a)
            assert len(idx) == k_a
            if k_a:
                kept = np.delete(row, idx)
                assert kept.size == 0 or row[idx].min() >= kept.max() - 1e-12


class TestAdversarialTcam:
    def test_no_masking_equals_plain(self):
        params, rng = random_params(10)
        xe = rng.normal(size=(5, 4))
        c_first = rng.normal(size=(3, 4))
        out, masks = adversarial_tcam(xe, c_first, params.head_rgb_adv, 40.0)
        np.testing.assert_allclose(out, tcam(xe, params.head_rgb_adv))
        assert all(len(m) == 0 for m in masks)

    def test_single_class(self):
        rng = np.random.default_rng(11)
        head = ConvHead(rng.normal(size=(1, 4, 1)), rng.normal(size=1))
        xe = rng.normal(size=(4, 6))
        c_first = rng.normal(size=(1, 6))
        out, masks = adversarial_tcam(xe, c_first, head, 3.0)
        masked = xe.copy()
        masked[:, masks[0]] = 0.0
        np.testing.assert_allclose(out, tcam(masked, head))

    @pytest.mark.parametrize("kappa", [1, 3])
    def test_kernel_gradient_fixed_mask(self, kappa):
        rng = np.random.default_rng(12)
        head = ConvHead(rng.normal(size=(3, 4, kappa)), rng.normal(size=3))
        xe = rng.normal(size=(4, 7))
        c_first = rng.normal(size=(3, 7))
        _, masks = adversarial_tcam(xe, c_first, head, 3.0)
        g_c = rng.normal(size=(3, 7))
        gk, gb, gx = adversarial_tcam_backward(xe, head, masks, g_c)
        base = head.kernel.copy()

        def f(vec):
            head.kernel[...] = vec.reshape(base.shape)
            try:
                out, _ = adversarial_tcam(xe, c_first, head, 3.0)
                return float((out * g_c).sum())
            finally:
                head.kernel[...] = base
        assert fd_grad_check(f, base.ravel(), 1e-6, gk) < 1e-4

    def test_masked_columns_get_no_feature_gradient(self):
        rng = np.random.default_rng(13)
        head = ConvHead(rng.normal(size=(2, 4, 1)), rng.normal(size=2))
        xe = rng.normal(size=(4, 6))
        c_first = rng.normal(size=(2, 6))
        _, masks = adversarial_tcam(xe, c_first, head, 2.0)
        g_c = rng.normal(size=(2, 6))
        _, _, gx = adversarial_tcam_backward(xe, head, masks, g_c)
        both = set(masks[0]) & set(masks[1])
        for t in both:
            np.testing.assert_array_equal(gx[:, t], 0.0)


class TestFuse:
    def test_omega_zero_unit_weights(self):
        rng = np.random.default_rng(14)
        c = [rng.normal(size=(3, 5)) for _ in range(4)]
        fp = Fusion(np.ones(3), np.ones(3), 0.0)
        np.testing.assert_allclose(fuse(*c, fp), c[0] + c[2])

    def test_flow_weight_zero(self):
        rng = np.random.default_rng(15)
        c = [rng.normal(size=(3, 5)) for _ in range(4)]
        fp = Fusion(np.ones(3), np.zeros(3), 0.7)
        np.testing.assert_allclose(fuse(*c, fp), c[0] + 0.7 * c[1])

    def test_weight_gradient_tight(self):
        rng = np.random.default_rng(16)
        c = [rng.normal(size=(3, 5)) for _ in range(4)]
        fp = Fusion(rng.normal(size=3), rng.normal(size=3), 0.6)
        g_cf = rng.normal(size=(3, 5))
        g_wr, g_wo, *_ = fuse_backward(*c, fp, g_cf)
        base = fp.w_rgb.copy()

        def f(vec):
            fp.w_rgb[...] = vec
            try:
                return float((fuse(*c, fp) * g_cf).sum())
            finally:
                fp.w_rgb[...] = base
        assert fd_grad_check(f, base.ravel(), 1e-6, g_wr) < 1e-6

    def test_shape_mismatch(self):
        fp = Fusion(np.ones(2), np.ones(2), 0.5)
        with pytest.raises(ValueError):
            fuse(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)), np.zeros((2, 3)), fp)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params, rng = random_params(17, kappa=3)
        bank = init_centers(rng, 3, 5)
        path = save_checkpoint(tmp_path / "ckpt.bin", Checkpoint(params, bank, 8.0, 40.0, True))
        loaded = load_checkpoint(path)
        for name, arr in params.named_arrays().items():
            np.testing.assert_array_equal(loaded.params.named_arrays()[name], arr)
        for name, c in bank.sets().items():
            np.testing.assert_array_equal(loaded.bank.sets()[name], c)
        assert loaded.s == 8.0 and loaded.s_a == 40.0 and loaded.two_branch is True
        assert loaded.params.fusion.omega == params.fusion.omega

    def test_identical_bytes(self, tmp_path):
        params, rng = random_params(18)
        bank = init_centers(rng, 3, 5)
        ck = Checkpoint(params, bank, 8.0, 40.0, False)
        a = save_checkpoint(tmp_path / "a.bin", ck)
        b = save_checkpoint(tmp_path / "b.bin", ck)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint\n")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
