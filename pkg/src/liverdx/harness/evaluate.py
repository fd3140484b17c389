"""End-to-end evaluation: inference on a split, then patient/lesion/pixel metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from liverdx.errors import EmptySplitError
from liverdx.harness.checkpoint import load_checkpoint
from liverdx.harness.config import RunConfig
from liverdx.inference import analyze_head, foreground_mask
from liverdx.metrics import EvalReport, build_report, dice_score
from liverdx.phantom import load_index
from liverdx.segmenter import LesionSegmenter


@dataclass
class EvalResult:
    report: EvalReport
    records: list
    baseline: EvalReport | None = None
    paths: dict = field(default_factory=dict)


@torch.no_grad()
def evaluate_cases(model: LesionSegmenter, cases, cfg: RunConfig, name="model"):
    """Run inference and metrics over in-memory cases; returns (report, pixelcount report, records)."""
    if not cases:
        raise EmptySplitError("no cases to evaluate")
    model.eval()
    results, dices = [], []
    for case in cases:
        head = model.forward_case(case)
        res = analyze_head(head, case.case_id, case.liver_mask, cfg.thresholds, cfg.background)
        results.append(res)
        dices.append(dice_score(foreground_mask(res.detections, case.shape), case.foreground()))
    labels = [c.labels for c in cases]
    dets = [r.detections for r in results]
    gts = [(c.instance_masks, c.labels) for c in cases]
    pick = (lambda r: r.pixelcount) if cfg.flags.inference == "pixelcount" else (lambda r: r.diagnosis)
    report = build_report(name, [pick(r) for r in results], labels, dets, gts, dices,
                          cfg.iou_threshold, cfg.auc2_mode)
    baseline = None
    if cfg.pixelcount_baseline and cfg.flags.inference != "pixelcount":
        baseline = build_report(f"{name}-pixelcount", [r.pixelcount for r in results], labels, dets, gts,
                                dices, cfg.iou_threshold, cfg.auc2_mode)
    records = []
    for r, d in zip(results, dices):
        rec = r.to_dict()
        rec["dice"] = d
        records.append(rec)
    return report, baseline, records


def write_report(report: EvalReport, out_dir, stem="report"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / f"{stem}.json",
        "table": out_dir / f"{stem}.txt",
        "confusion": out_dir / f"{stem}_confusion.csv",
    }
    paths["json"].write_text(report.to_json())
    paths["table"].write_text(report.to_table())
    paths["confusion"].write_text(report.confusion_csv())
    return paths


def run_eval(checkpoint, split, config: RunConfig, out_dir=None, name=None) -> EvalResult:
    cfg = config.resolved().validate(check_paths=True)
    model = load_checkpoint(checkpoint, expected=cfg.model)
    index = load_index(cfg.dataset)
    ids = index.case_ids(split)
    if not ids:
        raise EmptySplitError(f"split {split!r} of {cfg.dataset} is empty")
    cases = [index.load_case(cid) for cid in ids]
    report, baseline, records = evaluate_cases(model, cases, cfg, name or cfg.run_name)
    out_dir = Path(out_dir) if out_dir else cfg.run_path() / f"eval_{split}"
    paths = write_report(report, out_dir)
    if baseline is not None:
        paths.update({f"baseline_{k}": v for k, v in write_report(baseline, out_dir, "report_pixelcount").items()})
    cases_path = out_dir / "cases.jsonl"
    with open(cases_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    paths["cases"] = cases_path
    (out_dir / "manifest.json").write_text(json.dumps(
        {"command": "eval", "checkpoint": str(checkpoint), "split": split,
         "outputs": {k: Path(v).name for k, v in paths.items()}}, indent=2))
    return EvalResult(report, records, baseline, paths)
