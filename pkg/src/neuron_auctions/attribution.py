"""Integrated-gradients brand attribution over FFN neurons.

For a cloze prompt ``p`` and brand tokens ``y_1..y_T`` the score of neuron
``(l, i)`` is a sum over target positions of ``h_i`` times the average
gradient of ``log P(y_t | p || y_<t)`` along the path that scales the whole
last-position layer vector from 0 to ``h``. The integral is a right-endpoint
Riemann sum at ``alpha = r/m, r = 1..m``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .brandworld import Brand, World
from .tinylm import TinyLM, ffn_gradients

DEFAULT_STEPS = 20

NeuronId = tuple[int, int]


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Ordered map; results are identical to the serial loop."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def riemann_alphas(m: int) -> list[float]:
    return [r / m for r in range(1, m + 1)]


def token_layer_attribution(model: TinyLM, prefix: Sequence[int], target: int, layer: int,
                            m: int) -> np.ndarray:
    """``(h / m) * sum_r grad(alpha = r/m)`` for one prefix, token and layer."""
    h, grads, _ = ffn_gradients(model, prefix, target, layer, riemann_alphas(m))
    return (h / m) * grads.sum(axis=0)


def attribute_prompt(model: TinyLM, brand: Brand, prompt: Sequence[int], m: int = DEFAULT_STEPS,
                     target_seq: Optional[Sequence[int]] = None) -> np.ndarray:
    """A(b; p) as an (n_layers, d_ff) array.

    ``target_seq`` overrides the brand's own tokens (used to score a
    competitor under the target brand's prompts).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    y = tuple(brand.token_seq if target_seq is None else target_seq)
    cfg = model.config
    out = np.zeros((cfg.n_layers, cfg.d_ff))
    for t in range(len(y)):
        prefix = tuple(prompt) + y[:t]
        for l in range(cfg.n_layers):
            out[l] += token_layer_attribution(model, prefix, y[t], l, m)
    return out


def _mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(arrays[0])
    for a in arrays:
        acc = acc + a
    return acc / len(arrays)


def score_brand(model: TinyLM, brand: Brand, m: int = DEFAULT_STEPS,
                prompts: Optional[Sequence[Sequence[int]]] = None,
                target_seq: Optional[Sequence[int]] = None,
                return_per_prompt: bool = False, jobs: int = 1):
    """Prompt-averaged score S(b); the brand's own prompts unless given."""
    prompts = list(brand.cloze_prompts if prompts is None else prompts)
    if not prompts:
        raise ValueError("prompt set is empty")
    per = parallel_map(lambda p: attribute_prompt(model, brand, p, m, target_seq), prompts, jobs)
    S = _mean(per)
    return (S, per) if return_per_prompt else S


def contrastive_score(S_target: np.ndarray, S_competitors: Sequence[np.ndarray]) -> np.ndarray:
    """S(b) minus the mean competitor score."""
    if len(S_competitors) == 0:
        raise ValueError("competitor list is empty")
    S_target = np.asarray(S_target, dtype=float)
    for s in S_competitors:
        if np.shape(s) != S_target.shape:
            raise ValueError(f"shape mismatch: {np.shape(s)} vs {S_target.shape}")
    return S_target - _mean([np.asarray(s, dtype=float) for s in S_competitors])


@dataclass
class AttributionTable:
    brand: int
    S: np.ndarray
    S_tilde: np.ndarray
    m: int
    per_prompt: Optional[list[np.ndarray]] = None
    competitor_S: Optional[dict[int, np.ndarray]] = None


@dataclass(frozen=True)
class RankedNeurons:
    brand: int
    neurons: tuple[NeuronId, ...]
    scores: tuple[float, ...]
    score_kind: str  # "contrastive" or "online"

    def __len__(self):
        return len(self.neurons)


def rank(brand: int, scores: np.ndarray, score_kind: str) -> RankedNeurons:
    """Descending by score; ties go to the lower layer, then lower index."""
    scores = np.asarray(scores, dtype=float)
    L, D = scores.shape
    layer = np.repeat(np.arange(L), D)
    index = np.tile(np.arange(D), L)
    flat = scores.reshape(-1)
    order = np.lexsort((index, layer, -flat))
    return RankedNeurons(
        brand=brand,
        neurons=tuple((int(layer[o]), int(index[o])) for o in order),
        scores=tuple(float(flat[o]) for o in order),
        score_kind=score_kind,
    )


def build_table(model: TinyLM, world: World, brand_id: int, m: int = DEFAULT_STEPS,
                jobs: int = 1) -> AttributionTable:
    """S, S~ and per-prompt A for one brand.

    Competitors are scored on the target brand's prompts with their own
    token sequence substituted as the target.
    """
    brand = world.brands[brand_id]
    S, per = score_brand(model, brand, m, return_per_prompt=True, jobs=jobs)
    comp = {}
    for c in brand.competitors:
        comp[c] = score_brand(model, brand, m, target_seq=world.brands[c].token_seq, jobs=jobs)
    S_tilde = contrastive_score(S, [comp[c] for c in brand.competitors])
    return AttributionTable(brand_id, S, S_tilde, m, per, comp)


def online_scores(round_tables: dict[int, np.ndarray], target: int) -> np.ndarray:
    """Attr(b_j) = S~(b_j) - sum_{b' != b_j} |S~(b')| / (N - 1); S~ when N = 1."""
    if target not in round_tables:
        raise ValueError(f"brand {target} is not part of the round")
    others = [b for b in sorted(round_tables) if b != target]
    base = np.asarray(round_tables[target], dtype=float)
    if not others:
        return base.copy()
    penalty = np.zeros_like(base)
    for b in others:
        penalty = penalty + np.abs(round_tables[b])
    return base - penalty / len(others)


def online_rank(round_tables: dict[int, np.ndarray], target: int) -> tuple[np.ndarray, RankedNeurons]:
    attr = online_scores(round_tables, target)
    return attr, rank(target, attr, "online")


def top_k(ranked: RankedNeurons, k: int) -> frozenset[NeuronId]:
    if not 0 <= k <= len(ranked):
        raise ValueError(f"k={k} outside [0, {len(ranked)}]")
    return frozenset(ranked.neurons[:k])


def table_to_dict(table: AttributionTable, meta: Optional[dict] = None) -> dict:
    doc = {
        "format": "attribution-json",
        "version": 1,
        "brand": table.brand,
        "m": table.m,
        "S": table.S.tolist(),
        "S_tilde": table.S_tilde.tolist(),
        "A_per_prompt": [a.tolist() for a in table.per_prompt] if table.per_prompt else None,
        "competitor_S": (
            {str(k): v.tolist() for k, v in sorted(table.competitor_S.items())}
            if table.competitor_S else None
        ),
    }
    if meta:
        doc["meta"] = meta
    return doc


def table_from_dict(doc: dict) -> AttributionTable:
    per = doc.get("A_per_prompt")
    comp = doc.get("competitor_S")
    return AttributionTable(
        brand=doc["brand"],
        S=np.asarray(doc["S"], dtype=float),
        S_tilde=np.asarray(doc["S_tilde"], dtype=float),
        m=doc["m"],
        per_prompt=[np.asarray(a, dtype=float) for a in per] if per else None,
        competitor_S={int(k): np.asarray(v, dtype=float) for k, v in comp.items()} if comp else None,
    )


def save_tables(tables: Iterable[AttributionTable], path, meta: Optional[dict] = None) -> None:
    doc = {"tables": [table_to_dict(t) for t in tables], "meta": meta or {}}
    Path(path).write_text(json.dumps(doc))


def load_tables(path) -> dict[int, AttributionTable]:
    doc = json.loads(Path(path).read_text())
    return {t["brand"]: table_from_dict(t) for t in doc["tables"]}
