"""Advertising-effect and user-quality measurements over intervention sweeps.

A sweep generates responses on every cell of a joint ``k`` grid and records
per-brand hit counts and a perplexity-based quality proxy. The tabulated
surface is then reduced to one click-through curve per bidder and one joint
quality grid for the auction.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.interpolate import RegularGridInterpolator
from scipy.stats import spearmanr

from .attribution import RankedNeurons, online_rank, parallel_map
from .brandworld import Brand, count_occurrences
from .errors import DependencyError
from .intervention import DEFAULT_LAMBDA, generate_with_intervention, joint_plan
from .tinylm import Decode, TinyLM, generate

DEFAULT_QUALITY_SCALE = 2.0
WIDE_GRID_TWO = tuple(range(0, 801, 100))
WIDE_GRID_THREE = tuple(range(0, 601, 100))


def hit_count(response: Sequence[int], brand: Brand) -> int:
    return count_occurrences(response, brand.token_seq)


def response_nll(model: TinyLM, prompt: Sequence[int], responses) -> np.ndarray:
    """Mean per-token negative log-likelihood of each response given the prompt."""
    responses = np.atleast_2d(np.asarray(responses, dtype=np.int64))
    if responses.shape[1] == 0:
        raise ValueError("response must be non-empty")
    P = len(prompt)
    seqs = np.concatenate([np.tile(np.asarray(prompt, dtype=np.int64), (len(responses), 1)), responses], axis=1)
    toks = torch.as_tensor(seqs[:, :-1])
    with torch.no_grad():
        logits, _, _ = model.run(toks)
        logp = torch.log_softmax(logits[:, P - 1:, :], dim=-1)
    tgt = torch.as_tensor(responses)
    picked = logp.gather(-1, tgt[..., None])[..., 0]
    return (-picked.mean(dim=1)).numpy()


def quality_from_nll(nll, baseline_nll: float, scale: float = DEFAULT_QUALITY_SCALE):
    return np.exp(-np.maximum(0.0, np.asarray(nll) - baseline_nll) / scale)


def quality_proxy(base_model: TinyLM, prompt: Sequence[int], response: Sequence[int],
                  baseline_responses=None, scale: float = DEFAULT_QUALITY_SCALE) -> float:
    """exp(-max(0, NLL(response) - NLL(baseline)) / scale), NLL in nats/token.

    The baseline is the mean NLL of ``baseline_responses``; by default the
    un-intervened greedy response of the same length.
    """
    if len(response) == 0:
        raise ValueError("response must be non-empty")
    if baseline_responses is None:
        baseline_responses = [generate(base_model, prompt, len(response))]
    base = float(np.mean(response_nll(base_model, prompt, baseline_responses)))
    nll = float(response_nll(base_model, prompt, [response])[0])
    return float(quality_from_nll(nll, base, scale))


@dataclass
class CellStats:
    mean_hits: dict[int, float]
    std_hits: dict[int, float]
    mean_q: float
    n_samples: int


@dataclass
class EffectSurface:
    bidders: list[int]
    levels: list[list[int]]
    cells: dict[tuple[int, ...], CellStats]
    lam: float = DEFAULT_LAMBDA
    meta: dict = field(default_factory=dict)

    @property
    def zero(self) -> tuple[int, ...]:
        return tuple(0 for _ in self.bidders)

    def grid(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*self.levels))

    def hits_array(self, brand: int) -> np.ndarray:
        """Mean hits of ``brand`` as an array indexed by level positions."""
        shape = tuple(len(lv) for lv in self.levels)
        out = np.empty(shape)
        for idx in itertools.product(*(range(s) for s in shape)):
            ks = tuple(self.levels[a][i] for a, i in enumerate(idx))
            out[idx] = self.cells[ks].mean_hits[brand]
        return out

    def q_array(self) -> np.ndarray:
        shape = tuple(len(lv) for lv in self.levels)
        out = np.empty(shape)
        for idx in itertools.product(*(range(s) for s in shape)):
            ks = tuple(self.levels[a][i] for a, i in enumerate(idx))
            out[idx] = self.cells[ks].mean_q
        return out

    def normalized(self, brand: int) -> np.ndarray:
        """Hits shifted by the all-zero cell and scaled so the largest gain is 1."""
        arr = self.hits_array(brand)
        shifted = arr - arr[tuple(0 for _ in self.bidders)]
        top = shifted.max()
        return shifted / top if top > 0 else shifted

    def normalization_meta(self) -> dict:
        out = {}
        for b in self.bidders:
            arr = self.hits_array(b)
            base = float(arr[tuple(0 for _ in self.bidders)])
            out[str(b)] = {"baseline": base, "max_positive_change": float(max(0.0, (arr - base).max()))}
        return out

    def pooled_stats(self, brand: int) -> tuple[float, float]:
        """Mean and std of hit counts pooled over every cell and sample."""
        n = np.array([c.n_samples for c in self.cells.values()], dtype=float)
        mu = np.array([c.mean_hits[brand] for c in self.cells.values()])
        sd = np.array([c.std_hits[brand] for c in self.cells.values()])
        mean = float((n * mu).sum() / n.sum())
        var = float((n * (sd ** 2 + (mu - mean) ** 2)).sum() / n.sum())
        return mean, math.sqrt(var)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class SweepSettings:
    max_new: int = 16
    decode: str = "greedy"  # or "temperature"
    temperature: float = 1.0
    n_samples: int = 1
    quality_scale: float = DEFAULT_QUALITY_SCALE


def run_sweep(model: TinyLM, brands: Sequence[Brand], tables: Optional[dict[int, np.ndarray]],
              prompts: Sequence[Sequence[int]], levels: Sequence[Sequence[int]],
              lam: float = DEFAULT_LAMBDA, seeds: Sequence[int] = (0,),
              settings: SweepSettings = SweepSettings(), jobs: int = 1,
              rankings: Optional[Sequence[RankedNeurons]] = None) -> EffectSurface:
    """Joint sweep over the ``k`` grid for the bidders in ``brands``.

    ``tables`` maps brand id to its contrastive score S~; the per-bidder
    ranking is the online score over this round. Sampling seeds depend on
    (seed, prompt) only, so every cell sees the same random draws.
    """
    ids = [b.id for b in brands]
    if rankings is None:
        if tables is None or any(b not in tables for b in ids):
            missing = [b for b in ids if tables is None or b not in tables]
            raise DependencyError(f"missing attribution tables for brands {missing}")
        round_tables = {b: tables[b] for b in ids}
        rankings = [online_rank(round_tables, b)[1] for b in ids]
    if not prompts:
        raise ValueError("bidders share no compatible prompt")
    levels = [sorted(set(int(k) for k in lv)) for lv in levels]
    if len(levels) != len(ids):
        raise ValueError("one level list per bidder is required")
    if any(lv[0] != 0 for lv in levels):
        raise ValueError("every axis must include k = 0")

    def decode_for(seed: int, p_idx: int) -> Decode:
        if settings.decode == "greedy":
            return Decode("greedy")
        return Decode("temperature", settings.temperature, derive_seed(seed, p_idx))

    n_per = settings.n_samples if settings.decode != "greedy" else 1

    def run_cell(ks):
        plan = joint_plan(rankings, ks, lam)
        outs = []
        for p_idx, p in enumerate(prompts):
            for s in seeds:
                outs.append((p_idx, generate_with_intervention(
                    model, p, plan, decode_for(s, p_idx), settings.max_new, n_per)))
        return outs

    grid = list(itertools.product(*levels))
    results = dict(zip(grid, parallel_map(run_cell, grid, jobs)))

    zero = tuple(0 for _ in ids)
    base_nll = {}
    for p_idx, p in enumerate(prompts):
        resp = np.concatenate([o for i, o in results[zero] if i == p_idx])
        base_nll[p_idx] = float(np.mean(response_nll(model, p, resp)))

    cells = {}
    for ks in grid:
        hits = {b.id: [] for b in brands}
        qs = []
        for p_idx, out in results[ks]:
            for row in out:
                for b in brands:
                    hits[b.id].append(hit_count(row, b))
            nll = response_nll(model, prompts[p_idx], out)
            qs.extend(quality_from_nll(nll, base_nll[p_idx], settings.quality_scale).tolist())
        cells[ks] = CellStats(
            mean_hits={b: float(np.mean(h)) for b, h in hits.items()},
            std_hits={b: float(np.std(h)) for b, h in hits.items()},
            mean_q=float(np.mean(qs)),
            n_samples=len(qs),
        )
    return EffectSurface(ids, [list(lv) for lv in levels], cells, lam)


def effect_summary(surface: EffectSurface) -> dict:
    """Per-bidder own-axis Spearman rho and mean absolute own/cross slopes.

    Rho pairs each cell's own ``k`` with the bidder's mean hits over the
    whole grid. Slopes are mean absolute first differences of the normalized
    surface per grid step, along the bidder's axis and along the others.
    """
    out = {}
    for a, b in enumerate(surface.bidders):
        H = surface.hits_array(b)
        own_k = np.broadcast_to(
            np.asarray(surface.levels[a], dtype=float).reshape([-1 if i == a else 1 for i in range(H.ndim)]),
            H.shape)
        rho = spearmanr(own_k.ravel(), H.ravel())[0] if np.ptp(H) > 0 else 0.0
        N = surface.normalized(b)
        own = float(np.mean(np.abs(np.diff(N, axis=a))))
        cross = [float(np.mean(np.abs(np.diff(N, axis=c)))) for c in range(N.ndim) if c != a]
        out[b] = {"spearman": float(rho), "own_slope": own,
                  "cross_slope": float(np.mean(cross)) if cross else 0.0}
    return out


def pav(y: Sequence[float], w: Optional[Sequence[float]] = None) -> np.ndarray:
    """Least-squares non-decreasing fit by pool-adjacent-violators."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    vals, wts, sizes = [], [], []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            wsum = wts[-2] + wts[-1]
            merged = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / wsum
            size = sizes[-2] + sizes[-1]
            del vals[-1], wts[-1], sizes[-1]
            vals[-1], wts[-1], sizes[-1] = merged, wsum, size
    return np.repeat(vals, sizes)


@dataclass
class CTRCurve:
    bidder: int
    levels: list[int]
    values: list[float]

    def __call__(self, k: int) -> float:
        return self.values[self.levels.index(int(k))]

    def as_array(self, levels: Optional[Sequence[int]] = None) -> np.ndarray:
        levels = self.levels if levels is None else levels
        return np.array([self(k) for k in levels])


def ctr_from_profile(profile: Sequence[float]) -> np.ndarray:
    """Isotonic fit then affine map so C(0) = 0 and C(k_max) = 1."""
    fit = pav(profile)
    span = fit[-1] - fit[0]
    if span <= 0:
        return np.zeros_like(fit)
    return np.clip((fit - fit[0]) / span, 0.0, 1.0)


def fit_ctr(surface: EffectSurface, bidder: int, levels: Optional[Sequence[int]] = None) -> CTRCurve:
    """Own-axis normalized hit change, averaged over the other bidders' axes."""
    a = surface.bidders.index(bidder)
    own = surface.levels[a]
    levels = list(own if levels is None else levels)
    missing = [k for k in levels if k not in own]
    if missing:
        raise ValueError(f"surface does not cover levels {missing} for bidder {bidder}")
    norm = surface.normalized(bidder)
    other_axes = tuple(i for i in range(norm.ndim) if i != a)
    profile = norm.mean(axis=other_axes) if other_axes else norm
    profile = np.array([profile[own.index(k)] for k in levels])
    return CTRCurve(bidder, levels, ctr_from_profile(profile).tolist())


@dataclass
class QualityGrid:
    levels: list[list[int]]
    values: np.ndarray  # indexed by level positions

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self._interp = RegularGridInterpolator(
            [np.asarray(lv, dtype=float) for lv in self.levels], self.values, method="linear")

    def at_index(self, idx: Sequence[int]) -> float:
        return float(self.values[tuple(idx)])

    def __call__(self, ks: Sequence[float]) -> float:
        return float(self._interp(np.asarray(ks, dtype=float)[None, :])[0])


def fit_quality(surface: EffectSurface, levels: Optional[Sequence[Sequence[int]]] = None) -> QualityGrid:
    levels = [list(lv) for lv in (surface.levels if levels is None else levels)]
    raw = surface.q_array()
    sub = raw[np.ix_(*[[surface.levels[a].index(k) for k in lv] for a, lv in enumerate(levels)])]
    ref = raw[tuple(0 for _ in surface.bidders)]
    vals = np.clip(sub / ref, 0.0, 1.0) if ref > 0 else np.ones_like(sub)
    return QualityGrid(levels, vals)


CSV_FIELDS_TAIL = ["brand", "mean_hits", "std_hits", "mean_q", "n_samples"]


def surface_to_csv(surface: EffectSurface) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"k_{a + 1}" for a in range(len(surface.bidders))] + CSV_FIELDS_TAIL)
    for ks in surface.grid():
        c = surface.cells[ks]
        for b in surface.bidders:
            writer.writerow([*ks, b, repr(c.mean_hits[b]), repr(c.std_hits[b]), repr(c.mean_q), c.n_samples])
    return buf.getvalue()


def surface_sidecar(surface: EffectSurface) -> dict:
    return {
        "format": "surface-sidecar",
        "version": 1,
        "bidders": surface.bidders,
        "levels": surface.levels,
        "lambda": surface.lam,
        "normalization": surface.normalization_meta(),
        "meta": surface.meta,
    }


def surface_from_csv(text: str, sidecar: dict) -> EffectSurface:
    bidders = sidecar["bidders"]
    n = len(bidders)
    cells: dict = {}
    for row in csv.DictReader(io.StringIO(text)):
        ks = tuple(int(row[f"k_{a + 1}"]) for a in range(n))
        c = cells.setdefault(ks, CellStats({}, {}, float(row["mean_q"]), int(row["n_samples"])))
        b = int(row["brand"])
        c.mean_hits[b] = float(row["mean_hits"])
        c.std_hits[b] = float(row["std_hits"])
    return EffectSurface(bidders, sidecar["levels"], cells, sidecar["lambda"], sidecar.get("meta", {}))


def save_surface(surface: EffectSurface, csv_path, sidecar_path) -> None:
    Path(csv_path).write_text(surface_to_csv(surface))
    Path(sidecar_path).write_text(json.dumps(surface_sidecar(surface), indent=1, sort_keys=True))


def load_surface(csv_path, sidecar_path) -> EffectSurface:
    return surface_from_csv(Path(csv_path).read_text(), json.loads(Path(sidecar_path).read_text()))


def effects_to_dict(ctrs: Sequence[CTRCurve], quality: QualityGrid) -> dict:
    return {
        "format": "effects-json",
        "version": 1,
        "ctr": [{"bidder": c.bidder, "levels": c.levels, "values": c.values} for c in ctrs],
        "quality": {"levels": quality.levels, "values": quality.values.tolist()},
    }


def effects_from_dict(doc: dict) -> tuple[list[CTRCurve], QualityGrid]:
    ctrs = [CTRCurve(c["bidder"], c["levels"], c["values"]) for c in doc["ctr"]]
    q = QualityGrid(doc["quality"]["levels"], np.asarray(doc["quality"]["values"]))
    return ctrs, q
