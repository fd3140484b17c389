"""From query predictions to voxel, lesion and patient level outputs.

Semantic map: each query q spreads its class probabilities over the voxels it
claims, ``s(c, v) = sum_q p_q(c) * sigmoid(m_q(v))`` for the 8 lesion classes.
The background channel comes from one of two rules:

``"noisy_or"`` (default)
    ``b(v) = prod_q (1 - (1 - p_q(none)) * sigmoid(m_q(v)))``, the chance that
    no query claims the voxel.
``"no_object_sum"``
    ``b(v) = sum_q p_q(none)``, uniform no-object mass. With many mostly-idle
    queries this swamps every lesion channel, so it is kept only for ablation.

Scores are normalized per voxel over the 9 channels.

Patient level: LiverMax takes, per lesion class, the maximum probability over
liver voxels. The pixel-count baseline instead reports the fraction of liver
voxels whose argmax is that class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from liverdx.errors import ConfigError, EmptyLiverError
from liverdx.labels import BACKGROUND, BENIGN, CLASS_NAMES, MALIGNANT, NUM_CLASSES


@dataclass
class SemanticMap:
    probs: np.ndarray  # (9, *grid); channel 8 is background

    @property
    def shape(self):
        return self.probs.shape[1:]

    def argmax(self):
        return self.probs.argmax(axis=0)


@dataclass
class PatientDiagnosis:
    probs: np.ndarray  # (8,)
    malignant: float
    benign: float

    @classmethod
    def from_class_scores(cls, scores):
        scores = np.asarray(scores, dtype=np.float64)
        return cls(
            probs=scores,
            malignant=float(scores[list(MALIGNANT)].max()),
            benign=float(scores[list(BENIGN)].max()),
        )

    def to_dict(self):
        return {
            "probabilities": {n: float(p) for n, p in zip(CLASS_NAMES, self.probs)},
            "malignant": self.malignant,
            "benign": self.benign,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array([d["probabilities"][n] for n in CLASS_NAMES]), d["malignant"], d["benign"])


@dataclass
class LesionDetection:
    mask: np.ndarray
    label: int
    score: float
    query: int = -1

    @property
    def voxels(self):
        return int(self.mask.sum())

    def bbox(self):
        idx = np.argwhere(self.mask)
        return [idx.min(0).tolist(), (idx.max(0) + 1).tolist()]

    def to_dict(self):
        return {"class": CLASS_NAMES[self.label], "score": self.score, "voxels": self.voxels, "bbox": self.bbox()}


@dataclass
class DetectionThresholds:
    class_threshold: float = 0.5
    mask_threshold: float = 0.5
    min_voxels: int = 8
    dedup_iou: float = 0.5


def _head_arrays(head):
    cls = head.class_logits.detach()
    masks = head.mask_logits.detach()
    if cls.dim() == 3:
        if cls.shape[0] != 1:
            raise ValueError("inference expects a single-case head output")
        cls, masks = cls[0], masks[0]
    return cls.double(), masks.double()


def semantic_map(head, background="noisy_or") -> SemanticMap:
    cls, masks = _head_arrays(head)
    probs = cls.softmax(-1)  # (Q, 9)
    sig = masks.sigmoid().flatten(1)  # (Q, N)
    scores = torch.empty(NUM_CLASSES + 1, sig.shape[1], dtype=torch.float64)
    scores[:NUM_CLASSES] = probs[:, :NUM_CLASSES].T @ sig
    if background == "noisy_or":
        claim = (1 - probs[:, BACKGROUND])[:, None] * sig
        scores[BACKGROUND] = torch.prod(1 - claim, dim=0)
    elif background == "no_object_sum":
        scores[BACKGROUND] = probs[:, BACKGROUND].sum()
    else:
        raise ConfigError(f"unknown background rule {background!r}")
    total = scores.sum(0, keepdim=True).clamp_min(1e-300)
    out = (scores / total).reshape(NUM_CLASSES + 1, *masks.shape[1:])
    return SemanticMap(out.numpy())


def _liver_voxels(semantic: SemanticMap, liver_mask):
    liver = np.asarray(liver_mask).astype(bool)
    if liver.shape != semantic.shape:
        raise ValueError(f"liver mask shape {liver.shape} differs from map shape {semantic.shape}")
    if not liver.any():
        raise EmptyLiverError("liver mask is empty; the patient volume is invalid")
    return semantic.probs[:, liver]


def livermax(semantic: SemanticMap, liver_mask) -> PatientDiagnosis:
    inside = _liver_voxels(semantic, liver_mask)
    return PatientDiagnosis.from_class_scores(inside[:NUM_CLASSES].max(axis=1))


def pixelcount_diagnosis(semantic: SemanticMap, liver_mask) -> PatientDiagnosis:
    inside = _liver_voxels(semantic, liver_mask)
    winners = inside.argmax(axis=0)
    counts = np.bincount(winners, minlength=NUM_CLASSES + 1)[:NUM_CLASSES]
    return PatientDiagnosis.from_class_scores(counts / inside.shape[1])


def mask_iou(a, b):
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def extract_lesions(head, liver_mask=None, thresholds: DetectionThresholds | None = None):
    """Confident, non-duplicate lesion instances, highest confidence first."""
    th = thresholds or DetectionThresholds()
    cls, masks = _head_arrays(head)
    probs = cls.softmax(-1)[:, :NUM_CLASSES]
    conf, label = probs.max(-1)
    binary = (masks.sigmoid() > th.mask_threshold).numpy()
    liver = None if liver_mask is None else np.asarray(liver_mask).astype(bool)
    candidates = []
    for q in range(probs.shape[0]):
        if conf[q] < th.class_threshold:
            continue
        m = binary[q] & liver if liver is not None else binary[q]
        if m.sum() < th.min_voxels:
            continue
        candidates.append(LesionDetection(m, int(label[q]), float(conf[q]), q))
    candidates.sort(key=lambda d: (-d.score, d.query))
    kept = []
    for det in candidates:
        if all(mask_iou(det.mask, k.mask) <= th.dedup_iou for k in kept):
            kept.append(det)
    return kept


def foreground_mask(detections, shape):
    fg = np.zeros(shape, dtype=bool)
    for d in detections:
        fg |= d.mask
    return fg


@dataclass
class CaseResult:
    case_id: str
    diagnosis: PatientDiagnosis
    pixelcount: PatientDiagnosis
    detections: list = field(default_factory=list)

    def to_dict(self):
        return {
            "case_id": self.case_id,
            **self.diagnosis.to_dict(),
            "pixelcount": self.pixelcount.to_dict(),
            "detections": [d.to_dict() for d in self.detections],
        }


def analyze_head(head, case_id, liver_mask, thresholds=None, background="noisy_or"):
    sem = semantic_map(head, background)
    return CaseResult(
        case_id=case_id,
        diagnosis=livermax(sem, liver_mask),
        pixelcount=pixelcount_diagnosis(sem, liver_mask),
        detections=extract_lesions(head, liver_mask, thresholds),
    )
