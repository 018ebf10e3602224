"""Joint multi-brand neuron amplification with a shared norm rescale."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .errors import DegenerateRescaleError
from .tinylm import GREEDY, Decode, Hook, TinyLM, generate_batch

DEFAULT_LAMBDA = 2.0
ABLATION_LAMBDAS = (1.5, 2.0, 3.0)


@dataclass(frozen=True)
class PlanEntry:
    brand: int
    neurons: frozenset  # of (layer, index)
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"amplification must be positive, got {self.lam}")
        object.__setattr__(self, "neurons", frozenset((int(l), int(i)) for l, i in self.neurons))

    @property
    def k(self) -> int:
        return len(self.neurons)


@dataclass(frozen=True)
class InterventionPlan:
    entries: tuple[PlanEntry, ...] = ()
    rescale: bool = True

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        brands = [e.brand for e in self.entries]
        if len(set(brands)) != len(brands):
            raise ValueError("a brand may appear at most once in a plan")

    def is_noop(self) -> bool:
        return all(e.k == 0 or e.lam == 1.0 for e in self.entries)

    def layer_entries(self, layer: int) -> list[tuple[list[int], float]]:
        out = []
        for e in self.entries:
            idx = sorted(i for l, i in e.neurons if l == layer)
            if idx:
                out.append((idx, e.lam))
        return out


def multipliers(entries: Sequence[tuple[Sequence[int], float]], d_ff: int) -> np.ndarray:
    """Per-coordinate multiplier; overlapping amplifications compose multiplicatively."""
    mult = np.ones(d_ff)
    for idx, lam in entries:
        mult[list(idx)] *= lam
    return mult


def apply_hook(h_old, entries: Sequence[tuple[Sequence[int], float]], rescale: bool = True):
    """Amplify the listed coordinates, then restore the L2 norm of each row.

    Works on numpy arrays or torch tensors whose last axis is the layer
    vector. Rows with zero norm pass through untouched.
    """
    if not entries:
        return h_old
    is_torch = isinstance(h_old, torch.Tensor)
    d_ff = h_old.shape[-1]
    mult = multipliers(entries, d_ff)
    if is_torch:
        mult = torch.as_tensor(mult, dtype=h_old.dtype)
        inter = h_old * mult
        if not rescale:
            return inter
        n_old = torch.linalg.vector_norm(h_old, dim=-1, keepdim=True)
        n_int = torch.linalg.vector_norm(inter, dim=-1, keepdim=True)
        if bool(((n_int == 0) & (n_old > 0)).any()):
            raise DegenerateRescaleError("intervened vector has zero norm")
        zero = n_old == 0
        factor = torch.where(zero, torch.ones_like(n_old), n_old / torch.where(zero, torch.ones_like(n_int), n_int))
        return torch.where(zero, h_old, factor * inter)
    h_old = np.asarray(h_old, dtype=float)
    inter = h_old * mult
    if not rescale:
        return inter
    n_old = np.linalg.norm(h_old, axis=-1, keepdims=True)
    n_int = np.linalg.norm(inter, axis=-1, keepdims=True)
    if np.any((n_int == 0) & (n_old > 0)):
        raise DegenerateRescaleError("intervened vector has zero norm")
    zero = n_old == 0
    factor = np.where(zero, 1.0, n_old / np.where(zero, 1.0, n_int))
    return np.where(zero, h_old, factor * inter)


@dataclass
class NormTrace:
    """Norms of the last-position vector before and after each hooked call."""

    rows: list[tuple[int, float, float]] = field(default_factory=list)  # (layer, before, after)

    def max_relative_gap(self) -> float:
        gaps = [abs(a - b) / b for _, b, a in self.rows if b > 0]
        return max(gaps) if gaps else 0.0


def make_hook(plan: InterventionPlan, trace: Optional[NormTrace] = None) -> Optional[Hook]:
    if not plan.entries:
        return None
    cache: dict[int, list] = {}

    def hook(layer: int, h: torch.Tensor) -> torch.Tensor:
        if layer not in cache:
            cache[layer] = plan.layer_entries(layer)
        entries = cache[layer]
        if not entries:
            return h
        new = apply_hook(h, entries, plan.rescale)
        if trace is not None:
            before = torch.linalg.vector_norm(h[:, -1, :], dim=-1)
            after = torch.linalg.vector_norm(new[:, -1, :], dim=-1)
            for b, a in zip(before.tolist(), after.tolist()):
                trace.rows.append((layer, b, a))
        return new

    return hook


def generate_with_intervention(model: TinyLM, prompt: Sequence[int], plan: InterventionPlan,
                               decode: Decode = GREEDY, max_new: int = 16, n: int = 1,
                               trace: Optional[NormTrace] = None) -> np.ndarray:
    """(n, max_new) continuations with the plan's hook active at every step."""
    return generate_batch(model, prompt, max_new, n, decode, make_hook(plan, trace))


def plan_to_dict(plan: InterventionPlan) -> dict:
    return {
        "format": "plan-json",
        "version": 1,
        "rescale": plan.rescale,
        "entries": [
            {"brand": e.brand, "lambda": e.lam, "neurons": sorted([l, i] for l, i in e.neurons)}
            for e in plan.entries
        ],
    }


def plan_from_dict(doc: dict) -> InterventionPlan:
    return InterventionPlan(
        entries=tuple(
            PlanEntry(e["brand"], frozenset(tuple(x) for x in e["neurons"]), e["lambda"])
            for e in doc["entries"]
        ),
        rescale=doc.get("rescale", True),
    )


def save_plan(plan: InterventionPlan, path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=1))


def load_plan(path) -> InterventionPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))


def joint_plan(ranked: Iterable, ks: Sequence[int], lam: float = DEFAULT_LAMBDA,
               rescale: bool = True) -> InterventionPlan:
    """Plan taking the top-``k`` prefix of each bidder's ranking."""
    entries = []
    for r, k in zip(ranked, ks):
        entries.append(PlanEntry(r.brand, frozenset(r.neurons[:k]), lam))
    return InterventionPlan(tuple(entries), rescale)
