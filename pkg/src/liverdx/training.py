"""Query/ground-truth matching, loss terms and the contrastive memory bank.

The training objective per batch is::

    L = w_seg * L_seg + w_focal * L_focal + w_acl * L_acl

``L_seg`` is BCE + Dice on a foreground-enhanced voxel sample, ``L_focal`` is
focal loss over all queries (unmatched queries target the no-object class), and
``L_acl`` is the asymmetric contrastive loss over matched query embeddings:
common-class anchors use supervised contrast (attract same class, repel the
rest), anchors of the rare "others" class are only pushed away from common
classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from liverdx.errors import ConfigError, MatchingError, NormalizationError
from liverdx.labels import NO_OBJECT, NUM_CLASSES, OTHERS
from liverdx.segmenter import case_inputs

UNIT_NORM_TOL = 1e-4
DICE_EPS = 1e-12


@dataclass
class LossConfig:
    seg_weight: float = 5.0
    focal_weight: float = 5.0
    acl_weight: float = 0.01
    temperature: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: tuple | None = None  # optional per-class weights, length 9
    no_object_weight: float = 0.1
    fg_bg_ratio: float = 1.0  # background voxels sampled per foreground voxel
    cost_class: float = 1.0
    cost_ce: float = 1.0
    cost_dice: float = 1.0
    use_focal: bool = True  # False -> plain weighted cross-entropy
    symmetric_contrast: bool = False  # ordinary supervised contrast for every class
    rare_in_common_denominator: bool = True
    bank_size: int = 1024

    def validate(self):
        for name in ("seg_weight", "focal_weight", "acl_weight", "focal_gamma", "no_object_weight",
                     "fg_bg_ratio", "cost_class", "cost_ce", "cost_dice"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.bank_size < 1:
            raise ConfigError("bank_size must be positive")
        if self.focal_alpha is not None and len(self.focal_alpha) != NUM_CLASSES + 1:
            raise ConfigError(f"focal_alpha needs {NUM_CLASSES + 1} entries")
        return self

    def to_dict(self):
        d = asdict(self)
        if d["focal_alpha"] is not None:
            d["focal_alpha"] = list(d["focal_alpha"])
        return d


# ------------------------------------------------------------------ matching

@dataclass
class Assignment:
    gt_indices: np.ndarray  # j
    query_indices: np.ndarray  # q matched to gt_indices[i]

    def __len__(self):
        return len(self.gt_indices)

    def as_dict(self):
        return {int(j): int(q) for j, q in zip(self.gt_indices, self.query_indices)}


def solve_assignment(cost) -> Assignment:
    """Minimum-cost injective map from rows (ground truth) to columns (queries)."""
    cost = np.asarray(cost, dtype=np.float64)
    k, q = cost.shape
    if k > q:
        raise MatchingError(f"{k} ground-truth lesions but only {q} queries; increase num_queries")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    return Assignment(rows[order].astype(np.int64), cols[order].astype(np.int64))


def binary_ce(logits, target):
    """Elementwise BCE for binary targets; exact for +/-inf logits."""
    return torch.where(target > 0.5, F.softplus(-logits), F.softplus(logits))


def dice_coefficient(prob, target, dim=-1):
    inter = (prob * target).sum(dim)
    denom = prob.sum(dim) + target.sum(dim)
    return 2 * inter / denom.clamp_min(DICE_EPS)


def matching_cost(class_logits, mask_logits, gt_masks, gt_labels, cfg: LossConfig):
    """(K, Q) cost of assigning ground truth j to query q for one case."""
    probs = class_logits.softmax(-1)  # (Q, 9)
    logits = mask_logits.flatten(1)  # (Q, N)
    target = gt_masks.flatten(1).to(logits.dtype)  # (K, N)
    labels = torch.as_tensor(gt_labels, dtype=torch.long)
    n = logits.shape[1]
    cost_cls = 1 - probs[:, labels].T
    pos = F.softplus(-logits)
    neg = F.softplus(logits)
    cost_ce = (target @ pos.T + (1 - target) @ neg.T) / n
    sig = logits.sigmoid()
    inter = target @ sig.T
    denom = target.sum(1, keepdim=True) + sig.sum(1)[None]
    cost_dice = 1 - 2 * inter / denom.clamp_min(DICE_EPS)
    return cfg.cost_class * cost_cls + cfg.cost_ce * cost_ce + cfg.cost_dice * cost_dice


@torch.no_grad()
def match(head, gt_masks, gt_labels, cfg: LossConfig) -> Assignment:
    """Optimal matching for a single case (``head`` has batch size 1)."""
    q = head.class_logits.shape[1]
    k = len(gt_labels)
    if k > q:
        raise MatchingError(f"{k} ground-truth lesions but only {q} queries; increase num_queries")
    if k == 0:
        return Assignment(np.zeros(0, np.int64), np.zeros(0, np.int64))
    cost = matching_cost(head.class_logits[0], head.mask_logits[0], _mask_tensor(gt_masks), gt_labels, cfg)
    return solve_assignment(cost.double().cpu().numpy())


def _mask_tensor(masks):
    if isinstance(masks, torch.Tensor):
        return masks
    return torch.from_numpy(np.stack([np.asarray(m) for m in masks]).astype(np.float32))


# -------------------------------------------------------------------- losses

def sample_voxels(target_flat, ratio, generator=None):
    """All foreground indices plus ``ratio`` times as many background indices, without replacement."""
    fg = torch.nonzero(target_flat > 0.5, as_tuple=False).flatten()
    bg = torch.nonzero(target_flat <= 0.5, as_tuple=False).flatten()
    n_bg = min(int(round(ratio * len(fg))), len(bg))
    pick = torch.randperm(len(bg), generator=generator)[:n_bg]
    return torch.cat([fg, bg[pick]])


def seg_loss(head, assignment: Assignment, gt_masks, cfg: LossConfig, generator=None):
    """Mean over matched pairs of BCE + (1 - Dice) on the foreground-enhanced voxel sample."""
    logits = head.mask_logits[0].flatten(1)
    if len(assignment) == 0:
        return logits.sum() * 0.0
    target = _mask_tensor(gt_masks).flatten(1).to(logits.dtype)
    terms = []
    for j, q in zip(assignment.gt_indices, assignment.query_indices):
        idx = sample_voxels(target[j], cfg.fg_bg_ratio, generator)
        x, t = logits[q, idx], target[j, idx]
        terms.append(binary_ce(x, t).mean() + 1 - dice_coefficient(x.sigmoid(), t))
    return torch.stack(terms).mean()


def classification_targets(num_queries, assignment: Assignment, gt_labels, cfg: LossConfig):
    targets = torch.full((num_queries,), NO_OBJECT, dtype=torch.long)
    weights = torch.full((num_queries,), float(cfg.no_object_weight), dtype=torch.float64)
    for j, q in zip(assignment.gt_indices, assignment.query_indices):
        targets[q] = int(gt_labels[j])
        weights[q] = 1.0
    if cfg.focal_alpha is not None:
        weights = weights * torch.as_tensor(cfg.focal_alpha, dtype=torch.float64)[targets]
    return targets, weights


def focal_loss(class_logits, assignment: Assignment, gt_labels, cfg: LossConfig):
    """Weighted focal loss, averaged over all Q queries of one case."""
    logits = class_logits[0] if class_logits.dim() == 3 else class_logits
    targets, weights = classification_targets(logits.shape[0], assignment, gt_labels, cfg)
    log_pt = logits.log_softmax(-1).gather(1, targets[:, None]).squeeze(1)
    gamma = cfg.focal_gamma if cfg.use_focal else 0.0
    modulator = (1 - log_pt.exp()).clamp_min(0) ** gamma if gamma else 1.0
    return (-weights.to(logits.dtype) * modulator * log_pt).mean()


def _check_unit(z, what):
    if z.numel() and torch.any((z.detach().norm(dim=-1) - 1).abs() > UNIT_NORM_TOL):
        raise NormalizationError(f"{what} embeddings must have unit L2 norm")


def supcon_term(anchor, positives, contrast, temperature):
    """Supervised contrastive term of one anchor.

    ``-(1/|P|) * sum_p log(exp(z.z_p/t) / sum_a exp(z.z_a/t))``; zero when P is empty.
    """
    _check_unit(anchor[None], "anchor")
    _check_unit(positives, "positive")
    _check_unit(contrast, "contrast")
    if len(positives) == 0 or len(contrast) == 0:
        return anchor.sum() * 0.0
    log_denom = torch.logsumexp(contrast @ anchor / temperature, dim=0)
    return -(positives @ anchor / temperature - log_denom).mean()


def rare_term(anchor, common, temperature):
    """Repulsion-only term of a rare anchor: ``log sum_a exp(z.z_a/t)`` over common samples."""
    _check_unit(anchor[None], "anchor")
    _check_unit(common, "common")
    if len(common) == 0:
        return anchor.sum() * 0.0
    return torch.logsumexp(common @ anchor / temperature, dim=0)


class MemoryBank:
    """Fixed-capacity FIFO of (unit-norm embedding, label) pairs; entries carry no gradient."""

    def __init__(self, capacity=1024):
        self.capacity = int(capacity)
        self._emb = None
        self._labels = torch.zeros(self.capacity, dtype=torch.long)
        self._order = torch.zeros(self.capacity, dtype=torch.long)
        self._next = 0  # slot to overwrite next
        self._size = 0
        self.total_pushed = 0

    def __len__(self):
        return self._size

    def push(self, embeddings, labels):
        embeddings = embeddings.detach()
        _check_unit(embeddings, "memory bank")
        labels = torch.as_tensor(labels, dtype=torch.long).flatten()
        if self._emb is None:
            self._emb = torch.zeros(self.capacity, embeddings.shape[-1], dtype=embeddings.dtype)
        for z, c in zip(embeddings, labels):
            self._emb[self._next] = z.to(self._emb.dtype)
            self._labels[self._next] = c
            self._order[self._next] = self.total_pushed
            self.total_pushed += 1
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def entries(self):
        """(embeddings, labels, insertion counters), oldest first."""
        if self._size == 0:
            d = 0 if self._emb is None else self._emb.shape[1]
            return torch.zeros(0, d), torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long)
        if self._size < self.capacity:
            idx = torch.arange(self._size)
        else:
            idx = (torch.arange(self.capacity) + self._next) % self.capacity
        return self._emb[idx], self._labels[idx], self._order[idx]

    def state_dict(self):
        emb, labels, order = self.entries()
        return {"capacity": self.capacity, "embeddings": emb.clone(), "labels": labels.clone(),
                "order": order.clone(), "total_pushed": self.total_pushed}

    def load_state_dict(self, state):
        self.__init__(state["capacity"])
        if len(state["labels"]):
            self._emb = torch.zeros(self.capacity, state["embeddings"].shape[1], dtype=state["embeddings"].dtype)
            n = len(state["labels"])
            self._emb[:n] = state["embeddings"]
            self._labels[:n] = state["labels"]
            self._order[:n] = state["order"]
            self._size = n
            self._next = n % self.capacity
        self.total_pushed = int(state["total_pushed"])


def acl_loss(anchors, anchor_labels, bank: MemoryBank | None, cfg: LossConfig, push=True):
    """Asymmetric contrastive loss over matched-query embeddings of one batch.

    Contrast partners are the other batch anchors plus the bank (bank entries
    are constants). The bank is updated after the loss is computed when ``push``.
    """
    labels = torch.as_tensor(anchor_labels, dtype=torch.long).flatten()
    m = len(labels)
    if bank is not None and len(bank):
        bank_z, bank_y, _ = bank.entries()
        bank_z = bank_z.to(anchors.dtype)
    else:
        bank_z = anchors.new_zeros(0, anchors.shape[-1] if anchors.dim() == 2 else 0)
        bank_y = torch.zeros(0, dtype=torch.long)
    all_z = torch.cat([anchors, bank_z]) if m else bank_z
    all_y = torch.cat([labels, bank_y])
    tau = cfg.temperature
    terms = []
    for i in range(m):
        others = torch.ones(len(all_y), dtype=torch.bool)
        others[i] = False
        is_rare = bool(labels[i] == OTHERS)
        if is_rare and not cfg.symmetric_contrast:
            sel = others & (all_y != OTHERS)
            if sel.any():
                terms.append(rare_term(anchors[i], all_z[sel], tau))
            continue
        contrast = others
        if not is_rare and not cfg.rare_in_common_denominator:
            contrast = contrast & (all_y != OTHERS)
        positive = contrast & (all_y == labels[i])
        if positive.any():
            terms.append(supcon_term(anchors[i], all_z[positive], all_z[contrast], tau))
    loss = torch.stack(terms).mean() if terms else anchors.sum() * 0.0
    if push and bank is not None and m:
        bank.push(anchors.detach(), labels)
    return loss


def total_loss(l_seg, l_focal, l_acl, cfg: LossConfig):
    return cfg.seg_weight * l_seg + cfg.focal_weight * l_focal + cfg.acl_weight * l_acl


def matched_embeddings(head, assignment: Assignment, gt_labels):
    emb = head.embeddings[0][torch.as_tensor(assignment.query_indices, dtype=torch.long)]
    labels = torch.as_tensor([int(gt_labels[j]) for j in assignment.gt_indices], dtype=torch.long)
    return emb, labels


def case_terms(head, case, cfg: LossConfig, generator=None):
    """Matching plus per-case loss terms for one case's head output."""
    masks = _mask_tensor(case.instance_masks) if case.num_lesions else torch.zeros(0, *case.shape)
    assignment = match(head, masks, case.labels, cfg)
    l_seg = seg_loss(head, assignment, masks, cfg, generator)
    l_focal = focal_loss(head.class_logits, assignment, case.labels, cfg)
    emb, labels = matched_embeddings(head, assignment, case.labels)
    return {"seg": l_seg, "focal": l_focal, "assignment": assignment, "embeddings": emb, "labels": labels}


@dataclass
class BatchLoss:
    total: torch.Tensor
    stats: dict
    anchors: torch.Tensor
    anchor_labels: torch.Tensor


def case_heads(model, cases, batched=False):
    """Head outputs in case order; ``batched`` stacks cases that share a phase set into one forward."""
    if not batched:
        return [model.forward_case(c) for c in cases]
    heads = [None] * len(cases)
    groups = {}
    for i, c in enumerate(cases):
        groups.setdefault(tuple(c.phases_present), []).append(i)
    for idx in groups.values():
        out = model(case_inputs([cases[i] for i in idx]))
        for b, i in enumerate(idx):
            heads[i] = out.item(b)
    return heads


def batch_loss(model, cases, bank, cfg: LossConfig, generator=None, push=False, batched=False) -> BatchLoss:
    """Forward each case on its own phase path and combine into one objective.

    Per-case seg and focal terms are averaged over the batch; the contrastive
    term is computed once over all matched embeddings of the batch.
    """
    seg, focal, embs, labels = [], [], [], []
    for case, head in zip(cases, case_heads(model, cases, batched)):
        t = case_terms(head, case, cfg, generator)
        seg.append(t["seg"])
        focal.append(t["focal"])
        embs.append(t["embeddings"])
        labels.append(t["labels"])
    l_seg = torch.stack(seg).mean()
    l_focal = torch.stack(focal).mean()
    anchors, anchor_labels = torch.cat(embs), torch.cat(labels)
    l_acl = acl_loss(anchors, anchor_labels, bank, cfg, push=push)
    total = total_loss(l_seg, l_focal, l_acl, cfg)
    stats = {"seg": float(l_seg.detach()), "focal": float(l_focal.detach()),
             "acl": float(l_acl.detach()), "total": float(total.detach())}
    return BatchLoss(total, stats, anchors.detach(), anchor_labels)
