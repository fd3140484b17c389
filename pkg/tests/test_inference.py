import itertools

import numpy as np
import pytest
import torch

from liverdx.errors import ConfigError, EmptyLiverError
from liverdx.inference import (
    DetectionThresholds,
    PatientDiagnosis,
    SemanticMap,
    analyze_head,
    extract_lesions,
    foreground_mask,
    livermax,
    mask_iou,
    pixelcount_diagnosis,
    semantic_map,
)
from liverdx.labels import BACKGROUND, NO_OBJECT, class_index
from liverdx.phantom import PhantomConfig, generate_case
from liverdx.segmenter import HeadOutput


def _head(class_logits, mask_logits):
    q = class_logits.shape[0]
    return HeadOutput(torch.as_tensor(class_logits)[None], torch.as_tensor(mask_logits)[None], torch.zeros(1, q, 2))


def _random_head(q=3, g=4, seed=0):
    rng = np.random.default_rng(seed)
    return _head(torch.from_numpy(rng.normal(size=(q, 9)) * 2), torch.from_numpy(rng.normal(size=(q, g, g, g)) * 3))


def _random_map(g=6, seed=0):
    rng = np.random.default_rng(seed)
    raw = rng.random((9, g, g, g)) ** 4
    return SemanticMap(raw / raw.sum(0, keepdims=True))


# --------------------------------------------------------------- semantic map

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _brute_semantic(head, background):
    cls = head.class_logits[0].double().numpy()
    masks = head.mask_logits[0].double().numpy()
    q, shape = cls.shape[0], masks.shape[1:]
    probs = np.exp(cls - cls.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    out = np.zeros((9, *shape))
    for v in itertools.product(*[range(n) for n in shape]):
        s = np.zeros(9)
        b = 1.0
        for qi in range(q):
            sig = _sigmoid(masks[(qi, *v)])
            for c in range(8):
                s[c] += probs[qi, c] * sig
            b *= 1 - (1 - probs[qi, NO_OBJECT]) * sig
        s[8] = b if background == "noisy_or" else probs[:, NO_OBJECT].sum()
        out[(slice(None), *v)] = s / s.sum()
    return out


@pytest.mark.parametrize("background", ["noisy_or", "no_object_sum"])
def test_semantic_map_equals_brute_force(background):
    for seed in range(5):
        head = _random_head(seed=seed)
        got = semantic_map(head, background).probs
        assert np.allclose(got, _brute_semantic(head, background), rtol=0, atol=1e-12)


def test_semantic_map_normalized():
    sem = semantic_map(_random_head(q=7, g=8, seed=3))
    assert np.allclose(sem.probs.sum(0), 1.0, atol=1e-12)
    assert sem.probs.min() >= 0 and sem.probs.max() <= 1


def test_single_query_one_hot_class():
    c = class_index("FNH")
    cls = torch.full((1, 9), -torch.inf, dtype=torch.float64)
    cls[0, c] = 0.0
    masks = torch.full((1, 4, 4, 4), -torch.inf, dtype=torch.float64)
    masks[0, :2] = torch.inf
    sem = semantic_map(_head(cls, masks)).probs
    assert np.all(sem[c, :2] == 1.0)
    assert np.all(sem[BACKGROUND, 2:] == 1.0)


def test_unknown_background_rule():
    with pytest.raises(ConfigError):
        semantic_map(_random_head(), "mean")


# ------------------------------------------------------------------ livermax

def test_livermax_equals_exhaustive_scan():
    rng = np.random.default_rng(1)
    for seed in range(20):
        sem = _random_map(seed=seed)
        liver = rng.random(sem.shape) < 0.4
        liver[0, 0, 0] = True
        expected = np.zeros(8)
        for v in zip(*np.nonzero(liver)):
            for c in range(8):
                expected[c] = max(expected[c], sem.probs[(c, *v)])
        got = livermax(sem, liver)
        assert np.array_equal(got.probs, expected)
        assert got.malignant == expected[:3].max() and got.benign == expected[3:7].max()


def test_livermax_singleton_and_monotone():
    sem = _random_map(seed=4)
    liver = np.zeros(sem.shape, bool)
    liver[2, 3, 1] = True
    assert np.array_equal(livermax(sem, liver).probs, sem.probs[:8, 2, 3, 1])
    rng = np.random.default_rng(0)
    prev = livermax(sem, liver).probs
    for _ in range(20):
        liver |= rng.random(sem.shape) < 0.05
        cur = livermax(sem, liver).probs
        assert np.all(cur >= prev)
        prev = cur


def test_empty_liver_errors():
    sem = _random_map()
    with pytest.raises(EmptyLiverError):
        livermax(sem, np.zeros(sem.shape, bool))
    with pytest.raises(EmptyLiverError):
        pixelcount_diagnosis(sem, np.zeros(sem.shape, bool))


def test_pixelcount_equals_brute_count():
    rng = np.random.default_rng(2)
    for seed in range(20):
        sem = _random_map(seed=seed)
        liver = rng.random(sem.shape) < 0.5
        liver[1, 1, 1] = True
        counts = np.zeros(9)
        for v in zip(*np.nonzero(liver)):
            counts[int(np.argmax(sem.probs[(slice(None), *v)]))] += 1
        got = pixelcount_diagnosis(sem, liver)
        assert np.array_equal(got.probs, counts[:8] / liver.sum())


def test_pixelcount_examples():
    probs = np.zeros((9, 10, 10, 10))
    probs[BACKGROUND] = 1.0
    liver = np.ones((10, 10, 10), bool)
    assert np.all(pixelcount_diagnosis(SemanticMap(probs), liver).probs == 0)
    hcc = class_index("HCC")
    probs[BACKGROUND, 0, 0, :] = 0.0
    probs[hcc, 0, 0, :] = 1.0
    assert pixelcount_diagnosis(SemanticMap(probs), liver).probs[hcc] == pytest.approx(0.01, abs=0)


def test_diagnosis_round_trip():
    d = PatientDiagnosis.from_class_scores(np.linspace(0, 0.7, 8))
    back = PatientDiagnosis.from_dict(d.to_dict())
    assert np.array_equal(back.probs, d.probs) and back.malignant == d.malignant and back.benign == d.benign


def _tiny_lesion_head(grid=48, voxels=10, confidence=4.0, q=5):
    """One confident query on ``voxels`` voxels; the rest predict no-object everywhere."""
    cls = torch.zeros(q, 9, dtype=torch.float64)
    cls[:, NO_OBJECT] = 6.0
    c = class_index("ICC")
    cls[0] = 0.0
    cls[0, c] = confidence
    masks = torch.full((q, grid, grid, grid), -12.0, dtype=torch.float64)
    mid = grid // 2
    lesion = np.zeros((grid,) * 3, bool)
    lesion[mid, mid, mid - voxels // 2: mid - voxels // 2 + voxels] = True
    masks[0][torch.from_numpy(lesion)] = 12.0
    return _head(cls, masks), lesion, c


def test_livermax_dominates_on_tiny_lesion():
    case = generate_case(PhantomConfig(grid_size=48), 0)
    liver = case.liver_mask.astype(bool)
    head, lesion, c = _tiny_lesion_head()
    assert np.all(liver[lesion])
    sem = semantic_map(head)
    lm = livermax(sem, liver)
    pc = pixelcount_diagnosis(sem, liver)
    assert lm.probs[c] >= 0.5
    assert pc.probs[c] <= lesion.sum() / liver.sum() <= 0.001


# ---------------------------------------------------------------- detections

def _det_head(class_rows, masks):
    cls = torch.from_numpy(np.array(class_rows, dtype=np.float64))
    return _head(cls, torch.where(torch.from_numpy(np.asarray(masks)), 10.0, -10.0).double())


def _logits_for(probs):
    return np.log(np.asarray(probs, dtype=np.float64))


def test_extract_thresholds():
    g = 6
    base = np.zeros((g, g, g), bool)
    big = base.copy()
    big[:2, :2, :2] = True  # 8 voxels
    small = base.copy()
    small[4, 4, :3] = True
    small[4, 5, :4] = True  # 7 voxels
    rows = [
        _logits_for([0.9] + [0.1 / 8] * 7 + [0.1 / 8]),  # confident HCC
        _logits_for([0.1 / 8] * 8 + [0.9]),  # no-object 0.9 -> excluded
        _logits_for([0.02] * 2 + [0.9] + [0.08 / 6] * 6),  # confident but 7 voxels -> dropped
    ]
    dets = extract_lesions(_det_head(rows, [big, big, small]))
    assert len(dets) == 1
    assert dets[0].label == 0 and dets[0].query == 0 and dets[0].voxels == 8


def test_extract_deduplicates():
    g = 6
    m = np.zeros((g, g, g), bool)
    m[1:4, 1:4, 1:4] = True
    other = np.zeros((g, g, g), bool)
    other[4:6, 4:6, 0:3] = True
    rows = [_logits_for([0.7] + [0.3 / 8] * 8), _logits_for([0.9] + [0.1 / 8] * 8),
            _logits_for([0.1 / 8] * 5 + [0.9] + [0.1 / 8] * 3)]
    dets = extract_lesions(_det_head(rows, [m, m, other]))
    assert [d.query for d in dets] == [1, 2]
    assert dets[0].score == pytest.approx(0.9, abs=1e-9)
    for a, b in itertools.combinations(dets, 2):
        assert mask_iou(a.mask, b.mask) <= 0.5


def test_extract_pairwise_iou_property():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        g, q = 8, 10
        cls = torch.from_numpy(rng.normal(size=(q, 9)) * 3)
        cls[:, NO_OBJECT] -= 2
        centers = rng.integers(1, g - 1, size=(q, 3))
        masks = torch.full((q, g, g, g), -5.0, dtype=torch.float64)
        for i, (z, y, x) in enumerate(centers):
            masks[i, max(z - 2, 0):z + 2, max(y - 2, 0):y + 2, max(x - 2, 0):x + 2] = 5.0
        dets = extract_lesions(_head(cls, masks), thresholds=DetectionThresholds(class_threshold=0.3))
        for a, b in itertools.combinations(dets, 2):
            assert mask_iou(a.mask, b.mask) <= 0.5
        assert all(d.voxels >= 8 for d in dets)


def test_extract_respects_liver():
    g = 6
    m = np.zeros((g, g, g), bool)
    m[:, :, :2] = True
    liver = np.zeros((g, g, g), bool)
    liver[:, :, 1:] = True
    dets = extract_lesions(_det_head([_logits_for([0.9] + [0.1 / 8] * 8)], [m]), liver)
    assert dets[0].voxels == g * g
    assert not np.any(dets[0].mask & ~liver)
    fg = foreground_mask(dets, (g, g, g))
    assert fg.sum() == g * g


def test_pipeline_deterministic_and_serializable():
    head = _random_head(q=4, g=8, seed=9)
    liver = np.ones((8, 8, 8), bool)
    a = analyze_head(head, "case_00001", liver).to_dict()
    b = analyze_head(head, "case_00001", liver).to_dict()
    assert a == b
    assert set(a) == {"case_id", "probabilities", "malignant", "benign", "pixelcount", "detections"}
    # voxel order independence: permuting the grid permutes the map, not the diagnosis
    perm_head = HeadOutput(head.class_logits, head.mask_logits.flip(2, 3).transpose(2, 4), head.embeddings)
    p1 = livermax(semantic_map(head), liver).probs
    p2 = livermax(semantic_map(perm_head), liver).probs
    assert np.allclose(p1, p2, rtol=0, atol=0)
