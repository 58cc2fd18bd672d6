import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from comet.evalbench import (REPORT_FILES, SequenceFormatError, SequenceRecord, SynthConfig, aggregate,
                             attribute_breakdown, emit_report, load_sequence, ope_metrics, parse_boxes,
                             synth_sequence, write_boxes, write_sequence)
from comet.imaging import ImageFormatError, read_ppm, write_ppm


def centered(cx, cy, w=10.0, h=10.0):
    return [cx - w / 2, cy - h / 2, w, h]


def test_precision_from_center_errors():
    gt = np.array([centered(50, 50)] * 3)
    pred = np.array([centered(55, 50), centered(50, 75), centered(56, 58)])  # errors 5, 25, 10
    r = ope_metrics(pred, gt)
    np.testing.assert_allclose(r.center_errors, [5, 25, 10])
    assert r.precision_at_20 == 2 / 3
    assert r.precision_curve[4] == 0 and r.precision_curve[5] == 1 / 3 and r.precision_curve[25] == 1


def test_perfect_tracking():
    gt = np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]])
    r = ope_metrics(gt, gt)
    assert (r.precision_curve == 1).all() and (r.success_curve == 1).all() and r.auc == 1.0


def test_success_counts_ties():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]] * 4)
    pred = np.array([[0.0, 0.0, 10.0, 5.0]] * 4)  # iou exactly 0.5
    r = ope_metrics(pred, gt)
    assert r.success_at_0_5 == 1.0 and r.success_curve[26] == 0.0


def test_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        ope_metrics(np.zeros((2, 4)) + 1, np.zeros((3, 4)) + 1)


box_rows = st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(1, 50), st.floats(1, 50)),
                    min_size=1, max_size=30)


@settings(max_examples=60)
@given(box_rows, box_rows)
def test_curves_monotone_and_auc_is_mean(a, b):
    n = min(len(a), len(b))
    r = ope_metrics(np.array(a[:n]), np.array(b[:n]))
    assert (np.diff(r.precision_curve) >= 0).all()
    assert (np.diff(r.success_curve) <= 0).all()
    assert abs(r.auc - r.success_curve.sum() / 51) < 1e-12
    assert 0 <= r.auc <= 1


def test_aggregate_is_order_independent():
    gt = np.array([centered(50, 50)] * 4)
    r1 = ope_metrics(np.array([centered(50, 60)] * 4), gt)
    r2 = ope_metrics(np.array([centered(52, 50)] * 4), gt)
    a = aggregate({"b": r2, "a": r1})
    b = aggregate({"a": r1, "b": r2})
    np.testing.assert_array_equal(a.precision_curve, b.precision_curve)


def _record(name, attrs):
    return SequenceRecord(name, [np.zeros((4, 4, 3), np.uint8)], np.array([[0.0, 0, 1, 1]]), frozenset(attrs))


def _result(p20):
    r = ope_metrics(np.array([[0.0, 0, 1, 1]]), np.array([[0.0, 0, 1, 1]]))
    r.precision_curve = np.full(51, p20)
    return r


def test_attribute_breakdown():
    table = attribute_breakdown({"a": _result(0.8), "b": _result(0.6), "c": _result(0.9)},
                                [_record("a", {"SO"}), _record("b", {"SO", "XYZ"}), _record("c", set())])
    assert table["SO"][0] == pytest.approx(0.7)
    assert table["XYZ"][0] == pytest.approx(0.6)
    assert table["Overall"][0] == pytest.approx((0.8 + 0.6 + 0.9) / 3)
    only = attribute_breakdown({"c": _result(0.9)}, [_record("c", set())])
    assert list(only) == ["Overall"]


def test_parse_boxes_formats_and_errors():
    np.testing.assert_array_equal(parse_boxes("0,0,10,10\r\n1.5,2,3,4\n"), [[0, 0, 10, 10], [1.5, 2, 3, 4]])
    with pytest.raises(SequenceFormatError, match="line 1.*got 3"):
        parse_boxes("1, 2, 3\n")


def _write_raw_seq(root, n_frames, lines):
    (root / "frames").mkdir(parents=True)
    for i in range(n_frames):
        write_ppm(root / "frames" / f"{i:06d}.ppm", np.full((6, 8, 3), i, np.uint8))
    (root / "groundtruth.txt").write_text("".join(f"{ln}\n" for ln in lines))


def test_load_sequence_constant(tmp_path):
    _write_raw_seq(tmp_path / "s", 3, ["0,0,10,10"] * 3)
    rec = load_sequence(tmp_path / "s")
    assert len(rec) == 3 and (rec.gt_boxes == [0, 0, 10, 10]).all()
    assert rec.frames[2][0, 0, 0] == 2 and rec.frame_size == (8, 6)


def test_load_sequence_count_mismatch(tmp_path):
    _write_raw_seq(tmp_path / "s", 3, ["0,0,10,10"] * 2)
    with pytest.raises(SequenceFormatError, match="3.*2"):
        load_sequence(tmp_path / "s")


def test_ppm_roundtrip_and_magic(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    (tmp_path / "b.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ImageFormatError):
        read_ppm(tmp_path / "b.ppm")


def test_synth_static_target():
    rec = synth_sequence(SynthConfig(length=10, velocity_sigma=0, accel_sigma=0, noise_sigma=0), seed=1)
    assert (rec.gt_boxes == rec.gt_boxes[0]).all()


def test_synth_deterministic():
    cfg = SynthConfig(length=5)
    a, b = synth_sequence(cfg, 4), synth_sequence(cfg, 4)
    np.testing.assert_array_equal(a.gt_boxes, b.gt_boxes)
    for i in range(5):
        np.testing.assert_array_equal(a.frames[i], b.frames[i])


def test_synth_occlusion_covers_target():
    kw = dict(length=60, noise_sigma=0, velocity_sigma=0.5)
    plain = synth_sequence(SynthConfig(**kw), seed=9)
    occ = synth_sequence(SynthConfig(occlusions=[(40, 50)], **kw), seed=9)
    np.testing.assert_array_equal(plain.gt_boxes, occ.gt_boxes)
    assert "LO" in occ.attributes
    for t in (39, 40, 45, 50, 51):
        x, y, w, h = occ.gt_boxes[t]
        x0, y0, x1, y1 = int(np.ceil(x)), int(np.ceil(y)), int(np.floor(x + w)), int(np.floor(y + h))
        changed = (plain.frames[t][y0:y1, x0:x1] != occ.frames[t][y0:y1, x0:x1]).any(axis=-1).mean()
        if 40 <= t <= 50:
            assert changed >= 0.5
        else:
            assert changed == 0


def test_synth_rejects_oversized_target():
    with pytest.raises(ValueError):
        SynthConfig(frame_size=(20, 20), target_size=(8, 32))


def test_write_load_roundtrip(tmp_path):
    rec = synth_sequence(SynthConfig(length=4), seed=2, name="s")
    write_sequence(rec, tmp_path / "s")
    back = load_sequence(tmp_path / "s")
    np.testing.assert_allclose(back.gt_boxes, rec.gt_boxes, atol=1e-12)
    np.testing.assert_array_equal(back.frames[3], rec.frames[3])
    assert back.attributes == rec.attributes


def test_emit_report(tmp_path):
    gt = np.array([centered(50, 50)] * 3)
    res = {"s1": ope_metrics(np.array([centered(55, 50), centered(50, 75), centered(56, 58)]), gt),
           "s2": ope_metrics(gt, gt)}
    files = emit_report(res, tmp_path / "rep", [_record("s1", {"SO"}), _record("s2", set())], {"seed": 0})
    assert sorted(p.name for p in (tmp_path / "rep").iterdir()) == sorted(REPORT_FILES)
    assert [p.name for p in files] == list(REPORT_FILES)

    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert report["sequences"]["s1"]["precision_curve"] == res["s1"].precision_curve.tolist()
    assert report["overall"]["precision_at_20"] == pytest.approx((2 / 3 + 1) / 2)
    assert report["config"] == {"seed": 0}

    lines = (tmp_path / "rep" / "curves.csv").read_text().splitlines()
    assert lines[0].startswith("#")
    rows = list(csv.reader(lines[1:]))
    assert len(rows) == 52 and rows[0][0] == "index"
    assert [float(r[2]) for r in rows[1:]] == report["overall"]["precision_curve"]

    for name in ("precision.svg", "success.svg"):
        root = ET.parse(tmp_path / "rep" / name).getroot()
        assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2


def test_write_boxes_matches_annotation_format(tmp_path):
    write_boxes(tmp_path / "o.txt", [[1.0, 2.5, 3.0, 4.125]])
    assert (tmp_path / "o.txt").read_text() == "1,2.5,3,4.125\n"
