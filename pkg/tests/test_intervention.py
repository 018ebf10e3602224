import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neuron_auctions import intervention, tinylm
from neuron_auctions.attribution import rank
from neuron_auctions.errors import DegenerateRescaleError
from neuron_auctions.intervention import InterventionPlan, NormTrace, PlanEntry, apply_hook

from toy import random_model

vec = arrays(float, 6, elements=st.floats(-10, 10, allow_nan=False))


def test_hand_evaluated_rescale():
    out = apply_hook(np.array([1.0, 1.0]), [([0], 2.0)])
    f = math.sqrt(2) / math.sqrt(5)
    assert np.allclose(out, [2 * f, f], rtol=0, atol=1e-15)


def test_identity_cases():
    h = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(apply_hook(h, [([0, 2], 1.0)]), h)
    assert apply_hook(h, []) is h
    z = np.zeros(3)
    assert np.array_equal(apply_hook(z, [([1], 3.0)]), z)


def test_degenerate_rescale():
    with pytest.raises(DegenerateRescaleError):
        apply_hook(np.array([2.0, 0.0]), [([0], 0.0)])
    with pytest.raises(ValueError):
        PlanEntry(0, frozenset({(0, 1)}), 0.0)


def test_plan_validation():
    with pytest.raises(ValueError):
        InterventionPlan((PlanEntry(1, frozenset()), PlanEntry(1, frozenset())))
    assert InterventionPlan((PlanEntry(1, frozenset({(0, 1)}), 1.0),)).is_noop()


@settings(max_examples=100, deadline=None)
@given(h=vec, lam=st.floats(0.1, 50), idx=st.sets(st.integers(0, 5), min_size=1))
def test_norm_preserved_and_untouched_scaled_uniformly(h, lam, idx):
    if np.linalg.norm(h) == 0 or np.linalg.norm(h[sorted(idx)]) == 0 and len(idx) == 6:
        return
    out = apply_hook(h, [(sorted(idx), lam)])
    assert abs(np.linalg.norm(out) - np.linalg.norm(h)) <= 1e-9 * np.linalg.norm(h)
    inter = h.copy()
    inter[sorted(idx)] *= lam
    factor = np.linalg.norm(h) / np.linalg.norm(inter)
    rest = [i for i in range(6) if i not in idx]
    assert np.allclose(out[rest], factor * h[rest], rtol=1e-12, atol=1e-300)


@settings(max_examples=100, deadline=None)
@given(h=vec, a=st.floats(1.0, 5), b=st.floats(1.0, 5))
def test_order_independence_and_overlap_composition(h, a, b):
    e1, e2 = ([0, 1, 2], a), ([2, 3], b)
    x, y = apply_hook(h, [e1, e2]), apply_hook(h, [e2, e1])
    assert np.array_equal(x, y)
    single = apply_hook(h, [([0, 1], a), ([3], b), ([2], a * b)])
    assert np.allclose(x, single, rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(h=vec, lam=st.floats(1.0, 5), extra=st.floats(0.01, 5))
def test_larger_lambda_moves_mass_onto_the_set(h, lam, extra):
    idx = [0, 1]
    on, total = np.sum(h[idx] ** 2), np.sum(h ** 2)
    if on == 0 or on == total or on < 1e-12 * total or total - on < 1e-12 * total:
        return
    m1 = np.sum(apply_hook(h, [(idx, lam)])[idx] ** 2)
    m2 = np.sum(apply_hook(h, [(idx, lam + extra)])[idx] ** 2)
    assert m2 > m1


def test_numpy_and_torch_paths_agree():
    h = np.random.default_rng(0).normal(size=(3, 7))
    h[1] = 0.0
    entries = [([1, 4], 2.5), ([4, 6], 0.5)]
    a = apply_hook(h, entries)
    b = apply_hook(torch.as_tensor(h), entries).numpy()
    assert np.allclose(a, b, rtol=1e-14, atol=1e-15)
    assert np.array_equal(b[1], np.zeros(7))


def _plan(entries, rescale=True):
    return InterventionPlan(tuple(PlanEntry(b, frozenset(n), lam) for b, n, lam in entries), rescale)


@pytest.mark.parametrize("decode", [tinylm.GREEDY, tinylm.Decode("temperature", 1.0, 7)])
def test_noop_plans_are_bit_identical(decode):
    model = random_model(1, d_ff=16)
    base = tinylm.generate_batch(model, [1, 2], 6, 3, decode)
    for plan in (InterventionPlan(), _plan([(0, [(0, 1), (1, 3)], 1.0)]), _plan([(0, [], 2.0), (1, [], 3.0)])):
        out = intervention.generate_with_intervention(model, [1, 2], plan, decode, 6, 3)
        assert np.array_equal(out, base)


def test_norm_trace_with_rescale():
    model = random_model(2, d_ff=16)
    plan = _plan([(0, [(l, i) for l in range(2) for i in range(0, 16, 2)], 40.0)])
    trace = NormTrace()
    intervention.generate_with_intervention(model, [1, 2, 3], plan, tinylm.GREEDY, 5, trace=trace)
    assert len(trace.rows) == 5 * 2
    assert trace.max_relative_gap() <= 1e-9
    off = NormTrace()
    intervention.generate_with_intervention(model, [1, 2, 3], InterventionPlan(plan.entries, rescale=False),
                                            tinylm.GREEDY, 5, trace=off)
    assert off.max_relative_gap() > 1.0


def test_joint_plan_uses_one_shared_rescale():
    model = random_model(3, d_ff=8)
    plan = _plan([(0, [(0, 1), (1, 2)], 2.0), (1, [(0, 5), (1, 6)], 3.0)])
    prompt = [4, 5, 6]
    hooked, _ = tinylm.forward(model, prompt, hook=intervention.make_hook(plan))

    mults = {0: np.ones(8), 1: np.ones(8)}
    mults[0][1], mults[1][2], mults[0][5], mults[1][6] = 2.0, 2.0, 3.0, 3.0

    def oracle(layer, h):
        x = h[:, -1:, :].numpy()
        inter = x * mults[layer]
        new = inter * (np.linalg.norm(x, axis=-1, keepdims=True) / np.linalg.norm(inter, axis=-1, keepdims=True))
        return torch.as_tensor(new)

    ref, _ = tinylm.forward(model, prompt, hook=oracle)
    assert np.max(np.abs(hooked - ref)) <= 1e-12


def test_joint_plan_and_json(tmp_path):
    r0 = rank(0, np.arange(8.0).reshape(2, 4), "online")
    r1 = rank(1, -np.arange(8.0).reshape(2, 4), "online")
    plan = intervention.joint_plan([r0, r1], [2, 3], 1.5)
    assert plan.entries[0].neurons == frozenset({(1, 3), (1, 2)})
    assert plan.entries[1].k == 3 and plan.entries[1].lam == 1.5
    intervention.save_plan(plan, tmp_path / "p.json")
    assert intervention.load_plan(tmp_path / "p.json") == plan
