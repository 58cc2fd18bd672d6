import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from comet import boxgeom as bg
from comet import onlinetracker as ot
from comet.cometnet import CometNet, NetConfig
from comet.evalbench.synth import SynthConfig, synth_sequence


def tiny_net(seed=0):
    net = CometNet(NetConfig.tiny())
    net.reset_parameters(torch.Generator().manual_seed(seed))
    return net.eval()


def test_refine_config_invariant():
    ot.RefineConfig(k_best=11, n_proposals=10)
    with pytest.raises(ValueError):
        ot.RefineConfig(k_best=12, n_proposals=10)


def test_iou_step_scaling_rule():
    box = torch.tensor([[0.0, 0.0, 10.0, 20.0]], dtype=torch.float64)
    grad = torch.tensor([[0.1, 0.2, 0.05, 0.05]], dtype=torch.float64)
    delta = ot.iou_step(box, grad, 1.0) - box
    np.testing.assert_allclose(delta.numpy()[0], [1, 4, 0.5, 1], atol=1e-12, rtol=0)


def test_cle_step_scaling_rule():
    box = torch.tensor([[0.0, 0.0, 10.0, 20.0]], dtype=torch.float64)
    grad = torch.tensor([[0.1, 0.2, 0.05, 0.05]], dtype=torch.float64)
    delta = box - ot.cle_step(box, grad, 1.0)
    np.testing.assert_allclose(delta.numpy()[0], [1, 4, 0.05, 0.05], atol=1e-12, rtol=0)


def test_zero_gradient_is_stationary():
    box = torch.tensor([[3.0, 4.0, 10.0, 20.0]])
    zero = torch.zeros_like(box)
    assert torch.equal(ot.iou_step(box, zero, 1.0), box)
    assert torch.equal(ot.cle_step(box, zero, 1.0), box)


def test_refinement_with_zero_step_keeps_boxes():
    net = tiny_net()
    with torch.no_grad():
        feat = net.features(torch.rand(1, 3, 48, 48))
        mod = net.reference_modulation(feat, torch.tensor([[[10.0, 12.0, 16.0, 14.0]]]))
    boxes = np.array([[10.0, 12.0, 16.0, 14.0], [8.0, 9.0, 20.0, 12.0]])
    out, scores = ot.refine_boxes(net, feat, mod, boxes, ot.RefineConfig(beta=0.0))
    np.testing.assert_allclose(out.numpy(), boxes, rtol=0, atol=1e-6)
    assert ((scores >= 0) & (scores <= 1)).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_refinement_keeps_min_size(seed):
    net = tiny_net()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        feat = net.features(torch.rand(1, 3, 48, 48, generator=g))
        mod = net.reference_modulation(feat, torch.tensor([[[10.0, 12.0, 16.0, 14.0]]]))
    boxes = torch.rand(6, 4, generator=g).numpy() * [40, 40, 3, 3]
    out, _ = ot.refine_boxes(net, feat, mod, boxes, ot.RefineConfig(beta=50.0, n_steps=3))
    assert (out[:, 2:] >= 1.0).all()


def test_select_k_best():
    boxes = torch.tensor([[0.0, 0, 10, 10], [2, 2, 10, 10], [4, 4, 10, 10], [6, 6, 10, 10]])
    scores = torch.tensor([0.1, 0.9, 0.5, 0.7])
    assert torch.equal(ot.select_k_best(boxes, scores, 1), boxes[1])
    assert torch.allclose(ot.select_k_best(boxes, scores, 3), boxes[[1, 2, 3]].mean(0))


@given(st.lists(st.integers(0, 1000), min_size=4, max_size=11, unique=True))
def test_selection_invariant_under_monotone_transform(ranks):
    vals = [r / 1000 for r in ranks]
    boxes = torch.arange(len(vals) * 4, dtype=torch.float64).reshape(-1, 4)
    s = torch.tensor(vals, dtype=torch.float64)
    a = ot.select_k_best(boxes, s, 3)
    b = ot.select_k_best(boxes, torch.exp(5 * s) - 2, 3)
    assert torch.equal(a, b)


def test_gt_jitter_zero_sigma_is_exact():
    gt = np.array([[1.0, 2.0, 10.0, 12.0], [3.0, 4.0, 11.0, 13.0]])
    est = ot.GtJitterEstimator(gt, sigma_factor=0.0)
    assert est.estimate(None, None, 1).as_array().tolist() == gt[1].tolist()


def test_gt_jitter_deterministic_per_frame():
    gt = np.tile([20.0, 20.0, 10.0, 10.0], (5, 1))
    a = ot.GtJitterEstimator(gt, seed=3)
    b = ot.GtJitterEstimator(gt, seed=3)
    assert a.estimate(None, None, 4) == b.estimate(None, None, 4)
    assert a.estimate(None, None, 2) != a.estimate(None, None, 3)


def _scene(offset=(0, 0), size=(64, 80)):
    rng = np.random.default_rng(0)
    frame = (rng.random((size[0], size[1], 3)) * 255).astype(np.uint8)
    tmpl = (rng.random((12, 10, 3)) * 255).astype(np.uint8)
    y, x = 20 + offset[1], 30 + offset[0]
    frame[y:y + 12, x:x + 10] = tmpl
    return frame


def test_ncc_finds_translation_at_unit_scale():
    f0, f1 = _scene(), _scene(offset=(4, -3))
    ncc = ot.NCCEstimator()
    ncc.initialize(f0, bg.BoxXYWH(30, 20, 10, 12))
    box = ncc.estimate(f1, bg.BoxXYWH(30, 20, 10, 12), 1)
    assert (box.x, box.y, box.w, box.h) == pytest.approx((34, 17, 10, 12))
    assert ncc.last_scale == 1.0


def test_ncc_rejects_box_outside_frame():
    f0 = _scene()
    ncc = ot.NCCEstimator()
    ncc.initialize(f0, bg.BoxXYWH(30, 20, 10, 12))
    with pytest.raises(ot.EstimatorError):
        ncc.estimate(f0, bg.BoxXYWH(500, 20, 10, 12), 1)


@pytest.fixture(scope="module")
def short_seq():
    return synth_sequence(SynthConfig(frame_size=(96, 96), target_size=(8, 16), length=6, n_clutter=4), seed=7)


def test_init_single_modulation_and_determinism(short_seq):
    net = tiny_net()
    est = ot.GtJitterEstimator(short_seq.gt_boxes)
    a = ot.init(short_seq.frames[0], short_seq.gt_boxes[0], net, est)
    b = ot.init(short_seq.frames[0], short_seq.gt_boxes[0], net, est)
    assert a.modulation.shape == (1, 1, 8)
    assert torch.equal(a.modulation, b.modulation)


def test_init_clamps_partially_outside_box(short_seq):
    net = tiny_net()
    state = ot.init(short_seq.frames[0], (-5.0, -5.0, 20.0, 20.0), net, ot.GtJitterEstimator(short_seq.gt_boxes))
    assert state.prev_box == bg.BoxXYWH(0.0, 0.0, 15.0, 15.0)


def test_track_sequence_contract(short_seq):
    net = tiny_net()
    out1, flags = ot.track_sequence(short_seq, net, ot.GtJitterEstimator(short_seq.gt_boxes), seed=1)
    out2, _ = ot.track_sequence(short_seq, net, ot.GtJitterEstimator(short_seq.gt_boxes), seed=1)
    assert out1.shape == (len(short_seq), 4)
    np.testing.assert_array_equal(out1[0], short_seq.gt_boxes[0])
    np.testing.assert_array_equal(out1, out2)
    W, H = short_seq.frame_size
    assert (out1[:, 2:] >= 1).all()
    assert (out1[:, 0] >= 0).all() and (out1[:, 0] + out1[:, 2] <= W + 1e-9).all()
    assert (out1[:, 1] >= 0).all() and (out1[:, 1] + out1[:, 3] <= H + 1e-9).all()
    assert flags == []


def test_k1_returns_best_refined_box(short_seq, monkeypatch):
    net = tiny_net()
    seen = {}
    orig = ot.refine_boxes

    def spy(*args):
        boxes, scores = orig(*args)
        seen["best"] = boxes[int(torch.argmax(scores))]
        return boxes, scores

    monkeypatch.setattr(ot, "refine_boxes", spy)
    cfg = ot.RefineConfig(k_best=1)
    state = ot.init(short_seq.frames[0], short_seq.gt_boxes[0], net, ot.GtJitterEstimator(short_seq.gt_boxes), cfg)
    crop_est = state.estimator.estimate(None, None, 1)
    box = ot.track_frame(state, short_seq.frames[1])
    crop = bg.crop_spec(bg.clamp_to_frame(crop_est, 96, 96), cfg.area_factor, 48)
    expected = bg.clamp_to_frame(crop.from_crop(seen["best"].numpy()), 96, 96)
    assert box.as_array() == pytest.approx(expected.as_array())


def test_estimator_failure_holds_previous_box(short_seq):
    class Broken:
        def initialize(self, frame0, box):
            pass

        def estimate(self, frame, prev_box, frame_index):
            raise ot.EstimatorError("lost")

    state = ot.init(short_seq.frames[0], short_seq.gt_boxes[0], tiny_net(), Broken())
    prev = state.prev_box
    assert ot.track_frame(state, short_seq.frames[1]) == prev
    assert state.flagged == [(1, "estimator: lost")]


def test_non_finite_gradient_falls_back_to_estimate(short_seq):
    net = tiny_net()
    with torch.no_grad():
        net.iou_head.weight.fill_(float("nan"))
    est = ot.GtJitterEstimator(short_seq.gt_boxes, sigma_factor=0.0)
    state = ot.init(short_seq.frames[0], short_seq.gt_boxes[0], net, est)
    box = ot.track_frame(state, short_seq.frames[1])
    np.testing.assert_allclose(box.as_array(), short_seq.gt_boxes[1])
    assert state.flagged and state.flagged[0][1].startswith("refinement")


def test_ncc_context_tracks_flat_target():
    frame0 = np.full((60, 60, 3), 40, np.uint8)
    frame1 = frame0.copy()
    frame0[20:30, 20:30] = 200
    frame1[23:33, 22:32] = 200
    box = bg.BoxXYWH(20, 20, 10, 10)
    ncc = ot.NCCEstimator(context=0.5)
    ncc.initialize(frame0, box)
    assert ncc.template.shape == (20, 20)
    out = ncc.estimate(frame1, box, 1)
    assert (out.x, out.y) == pytest.approx((22, 23))
