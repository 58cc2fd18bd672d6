import numpy as np
import pytest
import torch

from comet.cometnet import BAM, CometNet, NetConfig, load_net, save_net
from comet.diffcore import ShapeError, numeric_grad, rel_error


@pytest.fixture(autouse=True)
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def make_net(cfg=None, seed=0, calibrate=True):
    cfg = cfg or NetConfig.tiny()
    net = CometNet(cfg)
    net.reset_parameters(torch.Generator().manual_seed(seed))
    if calibrate:
        with torch.no_grad():
            net.train()
            for k in range(2):
                net(*inputs(cfg, 2, 4, seed=100 + k, batch=2))
    return net.eval()


def inputs(cfg, m, n, seed=0, batch=1):
    g = torch.Generator().manual_seed(seed)
    S = cfg.input_size
    ref = torch.rand(batch, 3, S, S, generator=g)
    test = torch.rand(batch, 3, S, S, generator=g)
    rb = torch.cat([torch.rand(batch, m, 2, generator=g) * S * 0.4 + 4,
                    torch.rand(batch, m, 2, generator=g) * S * 0.3 + 8], -1)
    tb = torch.cat([torch.rand(batch, n, 2, generator=g) * S * 0.4 + 4,
                    torch.rand(batch, n, 2, generator=g) * S * 0.3 + 8], -1)
    return ref, test, rb, tb


@pytest.mark.parametrize("cfg, spatial, semantic", [
    (NetConfig(), (64, 36, 36), (128, 18, 18)),
    (NetConfig.desk(), (16, 18, 18), (32, 9, 9)),
    (NetConfig.tiny(), (8, 6, 6), (16, 3, 3)),
])
def test_backbone_shapes(cfg, spatial, semantic):
    net = CometNet(cfg).eval()
    with torch.no_grad():
        s, d = net.backbone(torch.zeros(1, 3, cfg.input_size, cfg.input_size))
        f = net.features(torch.zeros(1, 3, cfg.input_size, cfg.input_size))
    assert tuple(s.shape[1:]) == spatial and tuple(d.shape[1:]) == semantic
    assert tuple(f.shape[1:]) == (cfg.fused_channels, *spatial[1:])


def test_forward_shapes_and_zero_image_finite():
    cfg = NetConfig.tiny()
    net = make_net(cfg)
    ref, test, rb, tb = inputs(cfg, 3, 5, batch=2)
    with torch.no_grad():
        pred = net(torch.zeros_like(ref), torch.zeros_like(test), rb, tb)
    assert pred.iou.shape == (2, 3, 5) and pred.cle.shape == (2, 3, 5, 2)
    assert torch.isfinite(pred.iou).all() and torch.isfinite(pred.cle).all()


def test_wrong_input_shape():
    net = make_net(calibrate=False)
    with pytest.raises(ShapeError):
        net.features(torch.zeros(1, 3, 40, 40))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        NetConfig(input_size=100)
    with pytest.raises(ValueError):
        NetConfig.from_dict({**NetConfig.tiny().to_dict(), "lambda": 3})
    assert NetConfig.from_dict(NetConfig.desk().to_dict()) == NetConfig.desk()


def test_semantic_branch_can_be_silenced():
    """Zeroing the last semantic BN leaves MSAF equal to its spatial path alone."""
    cfg = NetConfig.tiny()
    net = make_net(cfg)
    x = torch.rand(1, 3, 48, 48)
    bn = net.msaf.semantic_up.bn
    with torch.no_grad():
        s, d = net.backbone(x)
        bn.weight.zero_()
        bn.bias.zero_()
        assert torch.count_nonzero(net.msaf.semantic_branch(d)) == 0
        fused = net.msaf(s, d)
        alone = net.msaf.fuse(net.msaf.spatial_branch(s))
    assert torch.allclose(fused, alone)


def test_bam_identity_and_doubling():
    x = torch.rand(2, 8, 6, 6)
    assert torch.equal(BAM.apply(x, torch.full_like(x, -torch.inf)), x)
    assert torch.allclose(BAM.apply(x, torch.zeros_like(x)), 1.5 * x)
    assert torch.allclose(BAM.apply(x, torch.full_like(x, 50.0)), 2 * x)


def test_bam_off_preserves_shape():
    cfg = NetConfig.tiny(enable_bam=False)
    net = make_net(cfg)
    with torch.no_grad():
        assert net.features(torch.rand(1, 3, 48, 48)).shape == (1, 8, 6, 6)


def test_modulation_arity_and_duplicates():
    cfg = NetConfig.tiny()
    net = make_net(cfg)
    with torch.no_grad():
        feat = net.features(torch.rand(1, 3, 48, 48))
        box = torch.tensor([[[8.0, 10.0, 20.0, 16.0]]])
        mods = net.reference_modulation(feat, box.expand(1, 3, 4))
    assert mods.shape == (1, 3, 8)
    assert torch.equal(mods[0, 0], mods[0, 1]) and torch.equal(mods[0, 1], mods[0, 2])


def test_modulation_of_constant_map_ignores_box():
    cfg = NetConfig.tiny()
    net = make_net(cfg)
    feat = torch.full((1, 8, 6, 6), 0.7)
    boxes = torch.tensor([[[4.0, 4.0, 10.0, 10.0], [12.0, 8.0, 20.0, 14.0]]])
    with torch.no_grad():
        mods = net.reference_modulation(feat, boxes)
    assert torch.allclose(mods[0, 0], mods[0, 1], atol=1e-12)


def test_grouped_equals_single_reference_loop():
    cfg = NetConfig.tiny()
    net = make_net(cfg)
    ref, test, rb, tb = inputs(cfg, 4, 6, seed=3, batch=2)
    with torch.no_grad():
        grouped = net(ref, test, rb, tb)
        singles = [net(ref, test, rb[:, m:m + 1], tb) for m in range(4)]
    assert torch.allclose(grouped.iou, torch.cat([s.iou for s in singles], 1), atol=1e-12, rtol=0)
    assert torch.allclose(grouped.cle, torch.cat([s.cle for s in singles], 1), atol=1e-12, rtol=0)


def test_box_gradients_match_finite_differences():
    cfg = NetConfig.tiny()
    net = make_net(cfg)
    ref, test, rb, tb = inputs(cfg, 2, 3, seed=5)
    tb.requires_grad_(True)

    def objective():
        p = net(ref, test, rb, tb)
        return p.iou.sum() + 0.3 * p.cle.sum()

    objective().backward()
    num = numeric_grad(objective, tb.data, eps=1e-5)
    assert rel_error(tb.grad.numpy(), num).max() < 1e-4


def test_determinism_and_weight_sharing():
    cfg = NetConfig.tiny()
    a, b = make_net(cfg, seed=4), make_net(cfg, seed=4)
    ref, test, rb, tb = inputs(cfg, 2, 3)
    with torch.no_grad():
        assert torch.equal(a(ref, test, rb, tb).iou, b(ref, test, rb, tb).iou)
        # swapping streams only swaps roles: both go through the same weights
        f_ref = a.features(ref)
        f_both = a.features(torch.cat([test, ref]))
    assert torch.allclose(f_both[1:], f_ref, atol=1e-12)


def test_save_load_roundtrip(tmp_path):
    cfg = NetConfig.tiny()
    net = make_net(cfg).float()
    save_net(tmp_path / "n.ckpt", net, {"note": 1})
    loaded, config = load_net(tmp_path / "n.ckpt")
    assert config["note"] == 1
    for (k, v), (k2, v2) in zip(net.state_dict().items(), loaded.state_dict().items()):
        assert k == k2
        np.testing.assert_array_equal(v.float().numpy(), v2.float().numpy())
