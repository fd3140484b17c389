import pytest
import torch
from torch import nn

from liverdx.errors import PhaseError
from liverdx.fusion import (
    EarlyConcatFusion,
    IterativeFusion,
    PhaseEncoders,
    PhaseFusion,
    iterative_fuse,
    phase_encode,
)

from conftest import gradient_check


def test_phase_encode_shape():
    torch.manual_seed(0)
    enc = PhaseEncoders(16)
    with torch.no_grad():
        out = phase_encode(torch.randn(48, 48, 48), "NC", enc)
    assert out.shape == (1, 16, 48, 48, 48)


def test_phase_encoders_are_unshared():
    torch.manual_seed(0)
    enc = PhaseEncoders(4)
    ids = {p: {id(t) for t in enc.blocks[p].parameters()} for p in enc.blocks}
    phases = list(ids)
    for i, a in enumerate(phases):
        for b in phases[i + 1:]:
            assert ids[a].isdisjoint(ids[b])
    x = torch.randn(8, 8, 8)
    with torch.no_grad():
        assert not torch.allclose(phase_encode(x, "NC", enc), phase_encode(x, "A", enc))


def test_zero_input_zero_output():
    enc = PhaseEncoders(4)
    with torch.no_grad():
        for m in enc.modules():
            if isinstance(m, nn.Conv3d):
                m.bias.zero_()
        out = phase_encode(torch.zeros(8, 8, 8), "V", enc)
    assert torch.count_nonzero(out) == 0


def test_unknown_phase():
    with pytest.raises(PhaseError):
        phase_encode(torch.zeros(8, 8, 8), "PV", PhaseEncoders(2))


@pytest.mark.parametrize("n", [3, 4])
def test_fuse_shape_is_arity_invariant(n):
    torch.manual_seed(0)
    fuse = IterativeFusion(16)
    feats = [torch.randn(1, 16, 48, 48, 48) for _ in range(n)]
    with torch.no_grad():
        assert iterative_fuse(feats, fuse).shape == (1, 16, 48, 48, 48)


@pytest.mark.parametrize("n", [2, 5])
def test_fuse_rejects_bad_arity(n):
    with pytest.raises(PhaseError):
        iterative_fuse([torch.zeros(1, 2, 4, 4, 4)] * n, IterativeFusion(2))


def test_fuse_rejects_mismatched_shapes():
    feats = [torch.zeros(1, 2, 4, 4, 4)] * 2 + [torch.zeros(1, 2, 8, 8, 8)]
    with pytest.raises(PhaseError):
        iterative_fuse(feats, IterativeFusion(2))


def test_fuse_matches_manual_recomposition():
    torch.manual_seed(3)
    fuse = IterativeFusion(4)
    h = [torch.randn(1, 4, 8, 8, 8) for _ in range(3)]
    block = fuse.steps[0]
    with torch.no_grad():
        manual = block(torch.cat([block(torch.cat([h[0], h[1]], 1)), h[2]], 1))
        out = iterative_fuse(h, fuse)
    assert torch.equal(out, manual)


def test_prefix_consistency():
    torch.manual_seed(4)
    fuse = IterativeFusion(4)
    h = [torch.randn(1, 4, 8, 8, 8) for _ in range(4)]
    with torch.no_grad():
        _, history = fuse(h, return_intermediates=True)
        three = fuse(h[:3])
    assert len(history) == 4
    assert torch.equal(history[2], three)


def test_unshared_option_has_three_blocks():
    fuse = IterativeFusion(2, shared=False)
    assert len(fuse.steps) == 3
    assert fuse.step_block(0) is not fuse.step_block(1)
    shared = IterativeFusion(2)
    assert shared.step_block(0) is shared.step_block(2)


def test_phase_fusion_requires_nc_a_v():
    model = PhaseFusion(2)
    with pytest.raises(PhaseError):
        model({"NC": torch.zeros(8, 8, 8), "A": torch.zeros(8, 8, 8)})


def test_early_concat_ignores_delayed():
    torch.manual_seed(0)
    model = EarlyConcatFusion(2)
    vols = {p: torch.randn(1, 1, 8, 8, 8) for p in ("NC", "A", "V")}
    with torch.no_grad():
        a = model(vols)
        b = model({**vols, "D": torch.randn(1, 1, 8, 8, 8)})
    assert torch.equal(a, b)


def test_fusion_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = PhaseFusion(3).double()
    vols = {p: torch.randn(1, 1, 8, 8, 8, dtype=torch.float64) for p in ("NC", "A", "V", "D")}
    readout = torch.randn(1, 3, 8, 8, 8, dtype=torch.float64)

    def fn():
        return (model(vols) * readout).sum()

    worst, report = gradient_check(fn, list(model.named_parameters()), n_entries=3)
    assert worst <= 1e-3, report
