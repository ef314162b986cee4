import pytest
import torch
from numpy.testing import assert_allclose

from deepbroadcast.channel import DegenerateSignalError
from deepbroadcast.nets import (
    VARIANTS,
    DeepBroadcast,
    FeatureFusionEncoder,
    GlobalChannelFineTuning,
    HeadSpec,
    LocalChannelAttention,
    ModelConfig,
    ModelConfigError,
    SemanticExtractor,
    TaskChannelEncoder,
    build_variant,
    reparameterize,
    tiny_config,
    with_heads,
)
from deepbroadcast.objective import LatentStats


def seeded(fn, seed=0):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn()


@pytest.fixture(scope="module")
def cfg():
    return ModelConfig()


@pytest.fixture(scope="module")
def cfg3():
    return with_heads(ModelConfig(), [HeadSpec("classify", 2), HeadSpec("classify", 2), HeadSpec("classify", 10)])


class TestModelConfig:
    def test_derived_sizes(self, cfg):
        assert cfg.c2 == cfg.c1 * cfg.h1 * cfg.w1 // 4 == 512
        assert cfg.c_tx == 16

    def test_head_count_must_match_users(self):
        with pytest.raises(ModelConfigError):
            ModelConfig(n_users=3)

    def test_unknown_variant(self, cfg):
        with pytest.raises(ModelConfigError, match="unknown variant"):
            build_variant("turbo", cfg)


class TestExtractor:
    def test_shape(self, cfg):
        net = seeded(lambda: SemanticExtractor(cfg))
        assert net(torch.rand(8, 3, 32, 32)).shape == (8, 32, 8, 8)

    def test_zero_image_finite(self, cfg):
        net = seeded(lambda: SemanticExtractor(cfg))
        assert torch.isfinite(net(torch.zeros(2, 3, 32, 32))).all()

    def test_deterministic(self, cfg):
        net = seeded(lambda: SemanticExtractor(cfg))
        x = torch.rand(2, 3, 32, 32)
        assert torch.equal(net(x), net(x))

    def test_shape_mismatch(self, cfg):
        net = seeded(lambda: SemanticExtractor(cfg))
        with pytest.raises(ModelConfigError):
            net(torch.rand(1, 3, 16, 16))


class TestLocalChannelAttention:
    def test_residual_identity(self):
        lca = seeded(lambda: LocalChannelAttention(32))
        torch.nn.init.zeros_(lca.out.weight)
        torch.nn.init.zeros_(lca.out.bias)
        f = torch.randn(4, 32, 8, 8)
        assert torch.equal(lca(f, 5.0), f)

    def test_softmax_sums_to_one_over_channels(self):
        lca = seeded(lambda: LocalChannelAttention(32))
        att = lca.attention(torch.randn(4, 32, 8, 8), torch.tensor([-5.0, 0.0, 7.0, 19.0]))
        assert_allclose(att.sum(1).detach().numpy(), 1.0, atol=1e-6)

    def test_shape_preserved(self):
        lca = seeded(lambda: LocalChannelAttention(32))
        assert lca(torch.randn(4, 32, 8, 8), 3.0).shape == (4, 32, 8, 8)

    def test_spatial_axis_option(self):
        lca = seeded(lambda: LocalChannelAttention(4, softmax_axis="spatial"))
        att = lca.attention(torch.randn(2, 4, 3, 3), 1.0)
        assert_allclose(att.flatten(2).sum(-1).detach().numpy(), 1.0, atol=1e-6)


class TestTaskChannelEncoder:
    def test_latent_lengths(self, cfg):
        tce = seeded(lambda: TaskChannelEncoder(cfg))
        stats = tce(torch.randn(3, 32, 8, 8), torch.zeros(3))
        assert stats.mu.shape == stats.sigma.shape == (3, cfg.c2)
        assert (stats.sigma > 0).all()

    def test_snr_sensitivity(self, cfg):
        tce = seeded(lambda: TaskChannelEncoder(cfg))
        f = torch.randn(2, 32, 8, 8)
        a, b = tce(f, torch.full((2,), -5.0)), tce(f, torch.full((2,), 19.0))
        assert not torch.allclose(a.mu, b.mu)

    def test_deterministic_head(self, cfg):
        tce = seeded(lambda: TaskChannelEncoder(cfg, stochastic=False))
        assert tce(torch.randn(2, 32, 8, 8), torch.zeros(2)).shape == (2, cfg.c2)


class TestReparameterize:
    def test_arithmetic(self):
        st = LatentStats(torch.tensor([1.0, 2.0]), torch.tensor([1.0, 1.0]))
        assert torch.equal(reparameterize(st, torch.tensor([0.5, -0.5])), torch.tensor([1.5, 1.5]))

    def test_zero_noise_is_mean(self):
        st = LatentStats(torch.randn(4), torch.rand(4) + 0.1)
        assert torch.equal(reparameterize(st, torch.zeros(4)), st.mu)

    def test_floor_sigma_gives_mean(self):
        st = LatentStats(torch.randn(4, dtype=torch.float64), torch.full((4,), 1e-6, dtype=torch.float64))
        assert_allclose(reparameterize(st, torch.randn(4, dtype=torch.float64)).numpy(), st.mu.numpy(), atol=1e-5)

    def test_length_check(self):
        with pytest.raises(ValueError):
            reparameterize(LatentStats(torch.zeros(3), torch.ones(3)), torch.zeros(2))


class TestGlobalChannelFineTuning:
    def test_zero_value_branch_passes_residual(self):
        gcf = seeded(lambda: GlobalChannelFineTuning(8, 2, 4))
        for p in gcf.value.parameters():
            torch.nn.init.zeros_(p)
        with torch.no_grad():
            gcf.out.weight.copy_(torch.eye(8))
            gcf.out.bias.zero_()
        zr = torch.randn(3, 8)
        assert torch.equal(gcf(zr, torch.randn(3, 2)), zr)

    def test_gate_ranges(self):
        gcf = seeded(lambda: GlobalChannelFineTuning(512, 3, 64))
        mk, _, mq = gcf.gates(100 * torch.randn(5, 512), torch.tensor([[-5.0, 7.0, 19.0]]).expand(5, 3))
        for gate in (mk, mq):
            assert ((gate >= 0) & (gate <= 1)).all()
        mk, _, mq = gcf.gates(torch.randn(5, 512), torch.zeros(5, 3))
        assert ((mk > 0) & (mk < 1)).all() and ((mq > 0) & (mq < 1)).all()

    def test_output_length(self):
        gcf = seeded(lambda: GlobalChannelFineTuning(512, 2, 64))
        assert gcf(torch.randn(2, 512), torch.zeros(2, 2)).shape == (2, 512)


class TestFusion:
    def test_concat_and_unit_power(self, cfg):
        cfe = seeded(lambda: FeatureFusionEncoder(cfg))
        zrs = [torch.randn(4, 512), torch.randn(4, 512)]
        assert cfe.concat(zrs, torch.zeros(4, 2)).shape == (4, 1024)
        z = cfe(zrs, torch.zeros(4, 2))
        assert z.shape == (4, 16)
        assert_allclose(z.pow(2).mean(-1).detach().numpy(), 1.0, atol=1e-6)

    def test_degenerate_output(self):
        cfg = tiny_config()
        cfe = seeded(lambda: FeatureFusionEncoder(cfg))
        for p in cfe.fuse2.parameters():
            torch.nn.init.zeros_(p)
        with pytest.raises(DegenerateSignalError):
            cfe([torch.randn(1, cfg.c2)] * 2, torch.zeros(1, 2))


class TestReceivers:
    def test_head_shapes(self, cfg):
        cfg_h = with_heads(cfg, [HeadSpec("classify", 10), HeadSpec("classify", 2), HeadSpec("recover")])
        model = seeded(lambda: DeepBroadcast(cfg_h)).eval()
        outs = model(torch.rand(2, 3, 32, 32), torch.zeros(3))
        assert outs[0].shape == (2, 10)
        assert outs[1].shape == (2, 2)
        assert outs[2].shape == (2, 3, 32, 32)
        assert ((outs[2] >= 0) & (outs[2] <= 1)).all()

    def test_decode_length_check(self, cfg):
        model = seeded(lambda: build_variant("mtoc", cfg))
        with pytest.raises(ValueError, match="symbols"):
            model.decode(torch.randn(1, 15), 0)


class TestVariants:
    @pytest.mark.parametrize("name", VARIANTS)
    def test_pipeline(self, name, cfg3):
        model = seeded(lambda: build_variant(name, cfg3)).eval()
        tx = model.encode(torch.rand(2, 3, 32, 32), torch.tensor([1.0, 5.0, 9.0]))
        assert len(tx.signals) == 3
        for u, s in enumerate(tx.signals):
            assert s.shape == (2, model.signal_length(u))
            assert_allclose(s.pow(2).mean(-1).detach().numpy(), 1.0, atol=1e-5)

    def test_unicast_symbols(self, cfg, cfg3):
        assert build_variant("unicast", cfg).signal_length(0) == 8
        u3 = build_variant("unicast", cfg3)
        assert u3.signal_length(0) == 6
        assert sum(u3.signal_length(i) for i in range(3)) == 18

    def test_broadcast_length(self, cfg3):
        for name in ("deepbroadcast", "mtoc", "deepbroadcast_e2e"):
            assert build_variant(name, cfg3).signal_length(2) == 16

    def test_e2e_has_no_latent_stats(self, cfg3):
        model = seeded(lambda: build_variant("deepbroadcast_e2e", cfg3))
        assert model.encode(torch.rand(1, 3, 32, 32), torch.zeros(3)).stats is None
        assert not model.has_latent_stats

    def test_ablation_structure(self, cfg):
        wlca = build_variant("mtoc_wlca", cfg)
        wgcf = build_variant("mtoc_wgcf", cfg)
        assert len(wlca.tces[0].lcas) == 3 and len(wlca.cfe.gcfs) == 0
        assert len(wgcf.tces[0].lcas) == 0 and len(wgcf.cfe.gcfs) == 2

    def test_sampling_only_in_training(self):
        model = seeded(lambda: DeepBroadcast(tiny_config()))
        x = torch.rand(2, 3, 8, 8)
        model.eval()
        a, b = model.encode(x, torch.zeros(2)).signals[0], model.encode(x, torch.zeros(2)).signals[0]
        assert torch.equal(a, b)
        model.train()
        g = torch.Generator().manual_seed(0)
        c, d = model.encode(x, torch.zeros(2), generator=g).signals[0], model.encode(x, torch.zeros(2), generator=g).signals[0]
        assert not torch.equal(c, d)

    def test_deterministic_latent_flag(self):
        model = seeded(lambda: DeepBroadcast(tiny_config(deterministic_latent=True))).train()
        x = torch.rand(2, 3, 8, 8)
        assert torch.equal(model.encode(x, torch.zeros(2)).signals[0], model.encode(x, torch.zeros(2)).signals[0])

    def test_forward_bitwise_deterministic(self, cfg3):
        a = seeded(lambda: build_variant("deepbroadcast", cfg3)).eval()
        b = seeded(lambda: build_variant("deepbroadcast", cfg3)).eval()
        x = torch.rand(2, 3, 32, 32)
        for ya, yb in zip(a(x, torch.zeros(3)), b(x, torch.zeros(3))):
            assert torch.equal(ya, yb)

    def test_snr_matrix_shape_check(self, cfg):
        model = seeded(lambda: DeepBroadcast(cfg))
        with pytest.raises(ValueError, match="SNR"):
            model.encode(torch.rand(2, 3, 32, 32), torch.zeros(2, 3))


class TestGradientFlow:
    def test_every_parameter_receives_gradient(self):
        from deepbroadcast.selftest import _tiny_problem

        model, loss_fn = _tiny_problem()
        model.zero_grad()
        loss_fn().backward()
        dead = [n for n, p in model.named_parameters() if p.grad is None or not torch.isfinite(p.grad).all()]
        assert not dead
