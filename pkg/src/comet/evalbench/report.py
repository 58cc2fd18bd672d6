from __future__ import annotations

import json
from pathlib import Path
from xml.sax.saxutils import escape

from comet.evalbench.metrics import (PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, EvalResult, aggregate,
                                     attribute_breakdown)

REPORT_FILES = ("report.json", "curves.csv", "precision.svg", "success.svg")

CSV_NOTE = ("# row i pairs precision threshold i px (0..50) with success threshold i/50 (0..1); "
            "precision = frac(center error <= threshold), success = frac(overlap >= threshold)\n")


def _svg_plot(xs, ys, title, xlabel, x_max) -> str:
    w, h, m = 400, 300, 40
    pw, ph = w - 2 * m, h - 2 * m
    pts = " ".join(f"{m + pw * x / x_max:.2f},{m + ph * (1 - y):.2f}" for x, y in zip(xs, ys))
    axis = f"{m},{m} {m},{m + ph} {m + pw},{m + ph}"
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">\n'
        f'  <title>{escape(title)}</title>\n'
        f'  <polyline points="{axis}" fill="none" stroke="black" stroke-width="1"/>\n'
        f'  <polyline points="{pts}" fill="none" stroke="#c0392b" stroke-width="2"/>\n'
        f'  <text x="{w / 2}" y="{h - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>\n'
        f'  <text x="{w / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>\n'
        f'</svg>\n'
    )


def emit_report(results: dict[str, EvalResult], path, records=None, config: dict | None = None) -> list[Path]:
    """Write report.json, curves.csv, precision.svg and success.svg into directory ``path``."""
    if not results:
        raise ValueError("emit_report needs at least one result")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    overall = aggregate(results)
    report = {
        "config": config or {},
        "overall": overall.to_dict(),
        "sequences": {n: results[n].to_dict() for n in sorted(results)},
        "precision_thresholds": PRECISION_THRESHOLDS.tolist(),
        "success_thresholds": SUCCESS_THRESHOLDS.tolist(),
    }
    if records is not None:
        report["attributes"] = {k: {"precision_at_20": p, "auc": a}
                                for k, (p, a) in attribute_breakdown(results, records).items()}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    rows = [CSV_NOTE, "index,precision_threshold,precision,success_threshold,success\n"]
    for i, (pt, st) in enumerate(zip(PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS)):
        rows.append(f"{i},{pt:g},{float(overall.precision_curve[i])!r},{st:g},{float(overall.success_curve[i])!r}\n")
    (out / "curves.csv").write_text("".join(rows))

    (out / "precision.svg").write_text(_svg_plot(PRECISION_THRESHOLDS, overall.precision_curve,
                                                 f"Precision (p@20 = {overall.precision_at_20:.3f})",
                                                 "location error threshold (px)", 50))
    (out / "success.svg").write_text(_svg_plot(SUCCESS_THRESHOLDS, overall.success_curve,
                                               f"Success (AUC = {overall.auc:.3f})", "overlap threshold", 1))
    return [out / f for f in REPORT_FILES]
