"""Patient-, lesion- and pixel-level evaluation.

Undefined quantities (an AUC with a single label class, a ratio with an empty
denominator) are reported as ``None`` and left out of averages.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from liverdx.labels import BENIGN, CLASS_NAMES, MALIGNANT, NUM_CLASSES


def auc(scores, labels):
    """Tie-aware ROC AUC: P(pos > neg) + 0.5 * P(pos == neg); ``None`` if one class is absent."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks resolve ties as half-wins
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class PatientMetrics:
    auc8: float | None
    auc2: float | None
    per_class: dict
    undefined: list


def patient_presence(case_labels):
    """(n_cases, 8) boolean matrix: patient has at least one lesion of each class."""
    present = np.zeros((len(case_labels), NUM_CLASSES), dtype=bool)
    for i, labels in enumerate(case_labels):
        for c in labels:
            present[i, int(c)] = True
    return present


def patient_metrics(diagnoses, case_labels, auc2_mode="mean") -> PatientMetrics:
    """AUC-8 over one-vs-rest lesion classes and AUC-2 over malignant/benign groups.

    ``auc2_mode="mean"`` averages AUC(malignant score, has malignant) and
    AUC(benign score, has benign), counting "others"-only patients as negative
    for both. ``"binary"`` is one malignant-vs-benign AUC over patients that
    have lesions of exactly one of the two groups.
    """
    if len(diagnoses) != len(case_labels) or len(diagnoses) < 2:
        raise ValueError("need at least 2 cases with matching diagnoses and labels")
    present = patient_presence(case_labels)
    scores = np.stack([d.probs for d in diagnoses])
    per_class = {CLASS_NAMES[k]: auc(scores[:, k], present[:, k]) for k in range(NUM_CLASSES)}
    undefined = [k for k, v in per_class.items() if v is None]
    has_mal = present[:, list(MALIGNANT)].any(1)
    has_ben = present[:, list(BENIGN)].any(1)
    mal = np.array([d.malignant for d in diagnoses])
    ben = np.array([d.benign for d in diagnoses])
    if auc2_mode == "mean":
        auc2 = _mean_defined([auc(mal, has_mal), auc(ben, has_ben)])
    elif auc2_mode == "binary":
        keep = has_mal ^ has_ben
        auc2 = auc(mal[keep] - ben[keep], has_mal[keep])
    else:
        raise ValueError(f"unknown auc2_mode {auc2_mode!r}")
    return PatientMetrics(_mean_defined(per_class.values()), auc2, per_class, undefined)


def _iou(a, b):
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


@dataclass
class LesionMetrics:
    precision: float | None
    sensitivity: float | None
    accuracy: float | None
    confusion: np.ndarray
    n_detections: int
    n_ground_truth: int
    n_matched: int


def greedy_match(detections, gt_masks, iou_threshold=0.3):
    """Pairs (detection index, gt index) taken in descending detection confidence."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    free = set(range(len(gt_masks)))
    pairs = []
    for i in order:
        best, best_iou = None, iou_threshold
        for j in sorted(free):
            v = _iou(detections[i].mask, gt_masks[j])
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is not None:
            free.discard(best)
            pairs.append((i, best))
    return pairs


def lesion_metrics(detections_per_case, gt_per_case, iou_threshold=0.3) -> LesionMetrics:
    """Pooled lesion detection and classification metrics.

    ``gt_per_case`` holds one ``(masks, labels)`` pair per case.
    """
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    n_det = n_gt = n_match = 0
    for dets, (masks, labels) in zip(detections_per_case, gt_per_case):
        masks = [np.asarray(m).astype(bool) for m in masks]
        n_det += len(dets)
        n_gt += len(masks)
        for i, j in greedy_match(dets, masks, iou_threshold):
            n_match += 1
            confusion[int(labels[j]), dets[i].label] += 1
    correct = int(np.trace(confusion))
    return LesionMetrics(
        precision=n_match / n_det if n_det else None,
        sensitivity=n_match / n_gt if n_gt else None,
        accuracy=correct / n_match if n_match else None,
        confusion=confusion,
        n_detections=n_det,
        n_ground_truth=n_gt,
        n_matched=n_match,
    )


def dice_score(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


@dataclass
class EvalReport:
    name: str = "model"
    n_cases: int = 0
    auc8: float | None = None
    auc2: float | None = None
    per_class_auc: dict = field(default_factory=dict)
    precision: float | None = None
    sensitivity: float | None = None
    accuracy: float | None = None
    confusion: list = field(default_factory=lambda: [[0] * NUM_CLASSES for _ in range(NUM_CLASSES)])
    dice: float | None = None
    undefined_auc: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_table(self):
        def fmt(v, digits=3):
            return "n/a" if v is None else f"{v:.{digits}f}"

        head = f"{'Method':<16}| {'AUC-8':>6} | {'AUC-2':>6} | {'Prec.':>6} | {'Sens.':>6} | {'Acc.':>6} | {'Dice':>6}"
        row = (f"{self.name:<16}| {fmt(self.auc8):>6} | {fmt(self.auc2):>6} | {fmt(self.precision):>6} | "
               f"{fmt(self.sensitivity):>6} | {fmt(self.accuracy, 4):>6} | {fmt(self.dice):>6}")
        return head + "\n" + "-" * len(head) + "\n" + row + "\n"

    def confusion_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gt\\pred", *CLASS_NAMES])
        for name, row in zip(CLASS_NAMES, self.confusion):
            w.writerow([name, *row])
        return buf.getvalue()


def build_report(name, diagnoses, case_labels, detections_per_case, gt_per_case, dices,
                 iou_threshold=0.3, auc2_mode="mean") -> EvalReport:
    pm = patient_metrics(diagnoses, case_labels, auc2_mode)
    lm = lesion_metrics(detections_per_case, gt_per_case, iou_threshold)
    return EvalReport(
        name=name,
        n_cases=len(diagnoses),
        auc8=pm.auc8,
        auc2=pm.auc2,
        per_class_auc=pm.per_class,
        precision=lm.precision,
        sensitivity=lm.sensitivity,
        accuracy=lm.accuracy,
        confusion=lm.confusion.tolist(),
        dice=float(np.mean(dices)) if len(dices) else None,
        undefined_auc=pm.undefined,
    )
