import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prism.histfilter import (
    GateProbs,
    SharpenParams,
    apply_transition_matrix,
    run_filter,
    sharpen,
    transition,
    transition_matrix,
    update_step,
)


def gates(r, i, d, k, copy=None):
    return GateProbs.from_scalars(r, i, d, k, copy)


@st.composite
def gate_and_hist(draw, with_copy=False):
    P = draw(st.integers(2, 12))
    raw = draw(st.lists(st.floats(0, 1), min_size=P, max_size=P))
    h = torch.tensor(raw, dtype=torch.float64) + 1e-3
    h = h / h.sum()
    a = np.array(draw(st.lists(st.floats(0.01, 1), min_size=3, max_size=3)))
    a = a / a.sum()
    r = draw(st.floats(0, 1))
    copy = None
    if with_copy:
        c = np.array(draw(st.lists(st.floats(0.01, 1), min_size=P + 1, max_size=P + 1)))
        copy = c / c.sum()
    return h, gates(r, *a, copy)


def test_shift_right_and_clamp_at_end():
    h = torch.tensor([0.0, 0.25, 0.75], dtype=torch.float64)
    out = transition(h, gates(0, 1, 0, 0))
    assert torch.allclose(out, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))


def test_shift_left_and_clamp_at_zero():
    h = torch.tensor([0.5, 0.5, 0.0], dtype=torch.float64)
    out = transition(h, gates(0, 0, 1, 0))
    assert torch.allclose(out, torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))


def test_reset_routes_to_first_two_cells():
    # reset, then the action: incr lands on cell 1, decr clamps and keep stays on cell 0
    h = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64)
    out = transition(h, gates(1.0, 0.2, 0.3, 0.5))
    assert torch.allclose(out, torch.tensor([0.8, 0.2, 0.0, 0.0], dtype=torch.float64))


def test_partial_reset_mixture():
    h = torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64)
    out = transition(h, gates(0.4, 0.5, 0.25, 0.25))
    want = torch.tensor([0.4 * 0.5 + 0.6 * 0.25, 0.4 * 0.5 + 0.6 * 0.25, 0.6 * 0.5, 0.0], dtype=torch.float64)
    assert torch.allclose(out, want)


def test_copy_branch_mixes_target_distribution():
    h = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    copy = [0.0, 0.0, 0.3, 0.7]  # 30% jump to cell 2, 70% no copy
    out = transition(h, gates(0, 0, 0, 1, copy))
    assert torch.allclose(out, torch.tensor([0.7, 0.0, 0.3], dtype=torch.float64))


def test_copy_length_mismatch_raises():
    h = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    with pytest.raises(ValueError, match="P\\+1"):
        transition(h, gates(0, 0, 0, 1, [0.5, 0.5]))


@pytest.mark.parametrize(
    "bad, match",
    [
        (dict(r=float("nan")), "NaN"),
        (dict(r=1.5), "outside"),
        (dict(i=-0.1, k=0.6 + 0.1), "outside"),
        (dict(i=0.5, d=0.5, k=0.5), "sum to 1"),
    ],
)
def test_invalid_gates_rejected(bad, match):
    v = dict(r=0.1, i=0.5, d=0.0, k=0.5)
    v.update(bad)
    h = torch.tensor([1.0, 0.0], dtype=torch.float64)
    with pytest.raises(ValueError, match=match):
        transition(h, gates(v["r"], v["i"], v["d"], v["k"]))


def test_invalid_histograms_rejected():
    g = gates(0, 1, 0, 0)
    with pytest.raises(ValueError, match="NaN"):
        transition(torch.tensor([float("nan"), 1.0]), g)
    with pytest.raises(ValueError, match="negative"):
        transition(torch.tensor([-0.1, 1.1]), g)
    with pytest.raises(ValueError, match="size >= 2"):
        transition(torch.tensor([1.0]), g)


def test_negative_eps_rejected():
    with pytest.raises(ValueError):
        SharpenParams(2.0, -1.0)


@settings(max_examples=200, deadline=None)
@given(gate_and_hist())
def test_transition_conserves_mass_and_sign(case):
    h, g = case
    out = transition(h, g)
    assert (out >= 0).all()
    assert abs(out.sum().item() - 1.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(gate_and_hist(with_copy=True))
def test_copy_transition_conserves_mass(case):
    h, g = case
    out = transition(h, g)
    assert (out >= 0).all()
    assert abs(out.sum().item() - 1.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(gate_and_hist(), st.floats(1.0, 6.0))
def test_update_step_stays_on_simplex(case, gamma):
    h, g = case
    out = update_step(h, g, SharpenParams(gamma))
    assert (out >= 0).all()
    assert abs(out.sum().item() - 1.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(gate_and_hist())
def test_matches_dense_stochastic_matrix(case):
    h, g = case
    M = transition_matrix(g, h.shape[-1])
    assert torch.allclose(M.sum(-1), torch.ones(h.shape[-1], dtype=torch.float64), atol=1e-12)
    assert torch.allclose(transition(h, g), apply_transition_matrix(h, g), atol=1e-12)


def test_transition_matrix_rejects_copy():
    with pytest.raises(ValueError):
        transition_matrix(gates(0, 1, 0, 0, [0.0, 0.0, 1.0]), 2)


def test_sharpen_gamma_one_is_identity():
    h = torch.tensor([0.1, 0.2, 0.7], dtype=torch.float64)
    assert torch.allclose(sharpen(h, 1.0, 0.0), h, atol=1e-15)


def test_sharpen_power_closed_form():
    h = torch.tensor([0.1, 0.3, 0.6], dtype=torch.float64)
    want = h ** 3 / (h ** 3).sum()
    assert torch.allclose(sharpen(h, 3.0, 0.0), want, atol=1e-15)


def test_sharpen_does_not_underflow():
    h = torch.tensor([1e-300, 1e-300, 0.0], dtype=torch.float64)
    out = sharpen(h, 50.0, 0.0)
    assert torch.isfinite(out).all()
    assert torch.allclose(out, torch.tensor([0.5, 0.5, 0.0], dtype=torch.float64))


def test_sharpen_per_cursor_gamma():
    h = torch.tensor([[0.25, 0.75], [0.25, 0.75]], dtype=torch.float64)
    out = sharpen(h, torch.tensor([1.0, 2.0], dtype=torch.float64), 0.0)
    assert torch.allclose(out[0], h[0])
    assert torch.allclose(out[1], torch.tensor([0.1, 0.9], dtype=torch.float64))


def test_sharpening_concentrates_mass():
    h = torch.tensor([0.2, 0.5, 0.3], dtype=torch.float64)
    entropy = lambda p: -(p * p.log()).sum().item()  # noqa: E731
    assert entropy(sharpen(h, 2.0, 0.0)) < entropy(h)


def test_batched_gates_broadcast():
    C, B, P = 3, 2, 5
    h = torch.softmax(torch.randn(C, B, P, dtype=torch.float64), -1)
    a = torch.softmax(torch.randn(C, B, 3, dtype=torch.float64), -1)
    r = torch.rand(C, B, dtype=torch.float64)
    g = GateProbs(r, a[..., 0], a[..., 1], a[..., 2])
    out = transition(h, g)
    for c in range(C):
        for b in range(B):
            gi = GateProbs(r[c, b], a[c, b, 0], a[c, b, 1], a[c, b, 2])
            assert torch.allclose(out[c, b], transition(h[c, b], gi))


def test_float32_tracks_float64():
    torch.manual_seed(0)
    h = torch.softmax(torch.randn(16, dtype=torch.float64), -1)
    steps = []
    for _ in range(20):
        a = torch.softmax(torch.randn(3, dtype=torch.float64), -1)
        steps.append((float(torch.rand(())), *a.tolist()))
    h64, h32 = h, h.float()
    for s in steps:
        h64 = update_step(h64, gates(*s), SharpenParams(2.0))
        h32 = update_step(h32, GateProbs.from_scalars(*s, dtype=torch.float32), SharpenParams(2.0))
    assert torch.allclose(h32.double(), h64, atol=1e-5)


def test_run_filter_returns_every_marginal():
    seq = [gates(0, 1, 0, 0)] * 3
    marg = run_filter(seq, SharpenParams(1.0, 0.0), P=5)
    assert len(marg) == 4
    for t, h in enumerate(marg):
        assert h.argmax().item() == t and math.isclose(h.max().item(), 1.0)


def test_return_pre():
    h = torch.tensor([0.5, 0.5], dtype=torch.float64)
    out, pre = update_step(h, gates(0, 0.5, 0.0, 0.5), SharpenParams(2.0, 0.0), return_pre=True)
    assert torch.allclose(pre, torch.tensor([0.25, 0.75], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([0.1, 0.9], dtype=torch.float64))


# -- reference examples ---------------------------------------------------------

def test_certain_reset_then_increment_lands_on_one():
    h = torch.zeros(6, dtype=torch.float64)
    h[0] = 1
    out = update_step(h, gates(1, 1, 0, 0), SharpenParams(1.0, 0.0))
    assert torch.equal(out, torch.eye(6, dtype=torch.float64)[1])


@pytest.mark.parametrize("eps, tol", [(0.0, 0.0), (1e-9, 1e-6)])
def test_keep_preserves_one_hot_under_sharpening(eps, tol):
    h = torch.eye(8, dtype=torch.float64)[3]
    out = update_step(h, gates(0, 0, 0, 1), SharpenParams(2.0, eps))
    assert (out - h).abs().max().item() <= tol


def test_pure_right_shift_example():
    h = torch.tensor([0.5, 0.25, 0.25, 0, 0, 0], dtype=torch.float64)
    out = update_step(h, gates(0, 1, 0, 0), SharpenParams(1.0, 0.0))
    assert torch.allclose(out, torch.tensor([0, 0.5, 0.25, 0.25, 0, 0], dtype=torch.float64), atol=1e-15)


def test_sharpen_reference_values():
    h = torch.tensor([0.5, 0.25, 0.25], dtype=torch.float64)
    assert torch.allclose(sharpen(h, 2.0, 0.0), torch.tensor([2 / 3, 1 / 6, 1 / 6], dtype=torch.float64))
    u = torch.full((7,), 1 / 7, dtype=torch.float64)
    for g, e in [(1.5, 0.0), (4.0, 1e-3), (9.0, 1e-9)]:
        assert torch.allclose(sharpen(u, g, e), u, atol=1e-15)


def test_identity_transition():
    M = transition_matrix(gates(0, 0, 0, 1), 5)
    assert torch.equal(M, torch.eye(5, dtype=torch.float64))
    h = torch.softmax(torch.randn(5, dtype=torch.float64), -1)
    assert torch.allclose(transition(h, gates(0, 0, 0, 1)), h, atol=0)


def test_transition_is_linear_in_h():
    g = gates(0.3, 0.2, 0.5, 0.3)
    a = torch.rand(9, dtype=torch.float64)
    b = torch.rand(9, dtype=torch.float64)
    assert torch.allclose(transition(2 * a + 3 * b, g), 2 * transition(a, g) + 3 * transition(b, g), atol=1e-14)


def test_copy_no_copy_delta_is_bitwise_identical():
    torch.manual_seed(0)
    h = torch.softmax(torch.randn(4, 10, dtype=torch.float64), -1)
    a = torch.softmax(torch.randn(4, 3, dtype=torch.float64), -1)
    r = torch.rand(4, dtype=torch.float64)
    plain = GateProbs(r, a[:, 0], a[:, 1], a[:, 2])
    copy = torch.zeros(4, 11, dtype=torch.float64)
    copy[:, -1] = 1
    with_copy = GateProbs(r, a[:, 0], a[:, 1], a[:, 2], copy)
    assert torch.equal(transition(h, plain), transition(h, with_copy))
    p = SharpenParams(2.0)
    assert torch.equal(update_step(h, plain, p), update_step(h, with_copy, p))


def test_copy_collapse_to_target():
    h = torch.softmax(torch.randn(10, dtype=torch.float64), -1)
    copy = torch.zeros(11, dtype=torch.float64)
    copy[6] = 1
    out = transition(h, gates(0.4, 0.3, 0.3, 0.4, copy))
    assert torch.allclose(out, torch.eye(10, dtype=torch.float64)[6], atol=1e-15)


def test_five_step_displacement_from_centre(rng):
    from prism import oracle

    steps = oracle.random_gate_steps(rng, 5, with_resets=False)
    P = 11
    marg = run_filter([gates(0, s.incr, s.decr, s.keep) for s in steps], SharpenParams(1.0, 0.0), P, start=5)
    want = oracle.displacement_pmf_bruteforce(steps).as_array(5)
    assert np.abs(marg[-1].numpy() - want).max() <= 1e-9


def test_cost_grows_at_most_linearly_in_P():
    # per-call overhead dominates small P, so only the upper bound is asserted
    import time

    def clock(P, N=8, iters=300):
        h = torch.softmax(torch.randn(N, P), -1)
        a = torch.softmax(torch.randn(N, 3), -1)
        g = GateProbs(torch.rand(N), a[:, 0], a[:, 1], a[:, 2])
        p = SharpenParams(torch.full((N, 1), 2.0))
        best = math.inf
        with torch.no_grad():
            for _ in range(5):
                t = time.perf_counter()
                for _ in range(iters):
                    update_step(h, g, p)
                best = min(best, time.perf_counter() - t)
        return best

    t = {P: clock(P) for P in (256, 512, 1024, 2048)}
    for P in (256, 512, 1024):
        assert t[2 * P] / t[P] <= 3.0, t
