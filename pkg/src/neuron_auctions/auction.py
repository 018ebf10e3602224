"""Menu-based neuron auction with learned prices, plus a VCG baseline.

Each bidder ``i`` faces a menu of allocation levels ``k^(j)`` whose prices a
small network computes from the other bidders' values only. The bidder takes
the option maximizing ``v_i * C(k^(j)) - p^(j)``; option 0 (no neurons, no
price) is always on the menu. Training maximizes soft-choice revenue plus
``w_user`` times the expected user quality under the product of soft choices.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .effects import WIDE_GRID_TWO, CTRCurve, QualityGrid
from .errors import ConfigurationError, NumericError, TrainingError

DTYPE = torch.float64
ENUMERATION_LIMIT = 10**4
VCG_LIMIT = 10**6


@dataclass(frozen=True)
class AuctionConfig:
    n_bidders: int = 2
    levels: tuple[int, ...] = WIDE_GRID_TWO
    w_user: float = 0.0
    tau: float = 0.03
    lr: float = 3e-5
    steps: int = 10000
    samples_per_step: int = 3000
    hidden: tuple[int, ...] = (64, 64)
    price_scale: float = 0.5
    budget: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(k) for k in self.levels))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_bidders < 2:
            raise ConfigurationError("menus need at least two bidders (prices depend on v_-i)")
        if len(self.levels) < 2 or self.levels[0] != 0:
            raise ConfigurationError("levels must start at 0 and contain a positive level")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ConfigurationError("levels must be strictly increasing")
        if self.w_user < 0 or self.tau <= 0 or self.lr <= 0:
            raise ConfigurationError("need w_user >= 0, tau > 0, lr > 0")
        if self.steps < 0 or self.samples_per_step < 1:
            raise ConfigurationError("steps must be >= 0 and samples_per_step >= 1")

    @property
    def J(self) -> int:
        return len(self.levels)

    @property
    def total_budget(self) -> int:
        return self.levels[-1] if self.budget is None else self.budget


class PricingNet(torch.nn.Module):
    """v_-i -> J-1 non-negative prices via tanh MLP and a scaled softplus."""

    def __init__(self, n_inputs: int, n_prices: int, hidden: Sequence[int] = (64, 64),
                 price_scale: float = 0.5, seed: int = 0, zero_final: bool = True):
        super().__init__()
        self.descriptor = {
            "n_inputs": n_inputs, "n_prices": n_prices, "hidden": list(hidden),
            "nonlinearity": "tanh", "output": "softplus", "price_scale": price_scale,
        }
        self.price_scale = price_scale
        gen = torch.Generator().manual_seed(seed)
        widths = [n_inputs, *hidden, n_prices]
        self.layers = torch.nn.ModuleList()
        for a, b in zip(widths[:-1], widths[1:]):
            lin = torch.nn.Linear(a, b, dtype=DTYPE)
            with torch.no_grad():
                bound = math.sqrt(6.0 / (a + b))
                lin.weight.copy_((torch.rand(b, a, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
                lin.bias.zero_()
            self.layers.append(lin)
        if zero_final:
            with torch.no_grad():
                self.layers[-1].weight.zero_()

    def forward(self, v_minus: torch.Tensor) -> torch.Tensor:
        x = v_minus
        for lin in self.layers[:-1]:
            x = torch.tanh(lin(x))
        return self.price_scale * F.softplus(self.layers[-1](x))


@dataclass(frozen=True)
class ValuationProfile:
    v: tuple[float, ...]

    def __post_init__(self):
        v = tuple(float(x) for x in self.v)
        if not all(0.0 <= x <= 1.0 for x in v):
            raise ValueError("valuations must lie in [0, 1]")
        object.__setattr__(self, "v", v)

    def minus(self, i: int) -> tuple[float, ...]:
        return self.v[:i] + self.v[i + 1:]


def make_nets(config: AuctionConfig) -> list[PricingNet]:
    return [
        PricingNet(config.n_bidders - 1, config.J - 1, config.hidden, config.price_scale,
                   seed=int(np.random.SeedSequence([config.seed, i]).generate_state(1)[0]))
        for i in range(config.n_bidders)
    ]


@dataclass
class Menu:
    bidder: int
    allocations: list[int]
    prices: np.ndarray

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=float)


def _others(v: np.ndarray, i: int) -> np.ndarray:
    return np.delete(np.asarray(v, dtype=float), i, axis=-1)


def build_menu(net: PricingNet, v_minus_i: Sequence[float], levels: Sequence[int], bidder: int = 0) -> Menu:
    v = np.asarray(v_minus_i, dtype=float)
    if np.any(v < 0) or np.any(v > 1):
        raise ValueError("v_-i entries must lie in [0, 1]")
    with torch.no_grad():
        p = net(torch.as_tensor(v, dtype=DTYPE)[None, :])[0].numpy()
    if not np.all(np.isfinite(p)):
        raise NumericError("pricing network produced a non-finite price")
    return Menu(bidder, list(levels), np.concatenate([[0.0], p]))


def menu_for_profile(nets: Sequence[PricingNet], profile: Sequence[float], bidder: int,
                     levels: Sequence[int]) -> Menu:
    """Bidder's menu given a full reported profile (its own entry is ignored)."""
    return build_menu(nets[bidder], _others(np.asarray(profile), bidder), levels, bidder)


def utilities(menu: Menu, v_i: float, ctr: CTRCurve) -> np.ndarray:
    C = np.array([ctr(k) for k in menu.allocations])
    return v_i * C - menu.prices


def choose(menu: Menu, v_i: float, ctr: CTRCurve) -> int:
    """Utility-maximizing option; ties go to the lowest allocation."""
    u = utilities(menu, v_i, ctr)
    best = np.flatnonzero(u == u.max())
    return int(min(best, key=lambda j: (menu.allocations[j], j)))


def soft_choice(menu: Menu, v_i: float, ctr: CTRCurve, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    u = torch.as_tensor(utilities(menu, v_i, ctr), dtype=DTYPE)
    return torch.softmax(u / tau, dim=0).numpy()


def _ctr_matrix(ctrs: Sequence[CTRCurve], levels: Sequence[int]) -> torch.Tensor:
    return torch.as_tensor(np.stack([c.as_array(levels) for c in ctrs]), dtype=DTYPE)


def _quality_tensor(quality: Optional[QualityGrid], n: int, levels: Sequence[int]) -> torch.Tensor:
    J = len(levels)
    if quality is None:
        return torch.ones((J,) * n, dtype=DTYPE)
    for lv in quality.levels:
        if list(lv) != list(levels):
            raise ConfigurationError("quality grid levels differ from the menu levels")
    return torch.as_tensor(quality.values, dtype=DTYPE)


def expected_quality(zs: Sequence[torch.Tensor], q: torch.Tensor) -> torch.Tensor:
    """E[q] under independent per-bidder choice distributions, exact enumeration."""
    B = zs[0].shape[0]
    J = q.shape[0]
    E = zs[0] @ q.reshape(J, -1)
    for z in zs[1:]:
        E = (z[:, :, None] * E.reshape(B, J, -1)).sum(dim=1)
    return E.reshape(B)


def objective_terms(v: torch.Tensor, nets: Sequence[PricingNet], C: torch.Tensor, q: torch.Tensor,
                    w_user: float, tau: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(J, revenue term, user term), each averaged over the batch ``v`` (B, n)."""
    n = v.shape[1]
    J = C.shape[1]
    if J ** n > ENUMERATION_LIMIT:
        raise ConfigurationError(
            f"J^n = {J ** n} exceeds {ENUMERATION_LIMIT}; use a sampled estimate of the user term")
    zs, revenue = [], torch.zeros(v.shape[0], dtype=DTYPE)
    for i in range(n):
        vm = torch.cat([v[:, :i], v[:, i + 1:]], dim=1)
        prices = torch.cat([torch.zeros(v.shape[0], 1, dtype=DTYPE), nets[i](vm)], dim=1)
        u = v[:, i:i + 1] * C[i][None, :] - prices
        z = torch.softmax(u / tau, dim=1)
        zs.append(z)
        revenue = revenue + (z * prices).sum(dim=1)
    user = expected_quality(zs, q) if w_user != 0 else torch.zeros_like(revenue)
    rev, usr = revenue.mean(), user.mean()
    return rev + w_user * usr, rev, usr


def objective(batch, nets: Sequence[PricingNet], levels: Sequence[int], ctrs: Sequence[CTRCurve],
              quality: Optional[QualityGrid], w_user: float, tau: float):
    """Platform objective and its gradient w.r.t. every network's parameters.

    Returns ``(value, grads)`` where ``grads[i]`` is a list of arrays matching
    ``nets[i].parameters()``.
    """
    v = torch.as_tensor(np.atleast_2d(batch), dtype=DTYPE)
    if v.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    C = _ctr_matrix(ctrs, levels)
    q = _quality_tensor(quality, v.shape[1], levels)
    params = [list(n.parameters()) for n in nets]
    with torch.enable_grad():
        val, _, _ = objective_terms(v, nets, C, q, w_user, tau)
        flat = torch.autograd.grad(val, [p for ps in params for p in ps])
    grads, pos = [], 0
    for ps in params:
        grads.append([g.numpy().copy() for g in flat[pos:pos + len(ps)]])
        pos += len(ps)
    return float(val.detach()), grads


def sample_profiles(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    return rng.random((count, n))


@dataclass
class TrainingLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)  # step, J, revenue, user

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "objective", "revenue_term", "user_term"])
        for s, j, r, u in self.rows:
            w.writerow([s, repr(j), repr(r), repr(u)])
        return buf.getvalue()


def train_menu(config: AuctionConfig, ctrs: Sequence[CTRCurve], quality: Optional[QualityGrid],
               nets: Optional[list[PricingNet]] = None, log_every: int = 1) -> tuple[list[PricingNet], TrainingLog]:
    """Per-bidder Adam on -J with fresh uniform value profiles every step.

    The log holds the objective measured on each step's batch before the
    update, plus a final row at ``step = config.steps``.
    """
    if len(ctrs) != config.n_bidders:
        raise ConfigurationError("one CTR curve per bidder is required")
    nets = make_nets(config) if nets is None else nets
    C = _ctr_matrix(ctrs, config.levels)
    q = _quality_tensor(quality, config.n_bidders, config.levels)
    opts = [torch.optim.Adam(n.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8) for n in nets]
    rng = np.random.Generator(np.random.Philox(config.seed))
    log = TrainingLog()
    for step in range(config.steps + 1):
        v = torch.as_tensor(sample_profiles(rng, config.samples_per_step, config.n_bidders), dtype=DTYPE)
        with torch.enable_grad():
            val, rev, usr = objective_terms(v, nets, C, q, config.w_user, config.tau)
            if not torch.isfinite(val):
                raise TrainingError(f"objective is not finite at step {step}", step=step)
            if step % log_every == 0 or step == config.steps:
                log.rows.append((step, float(val.detach()), float(rev.detach()), float(usr.detach())))
            if step == config.steps:
                break
            for o in opts:
                o.zero_grad()
            (-val).backward()
        for o in opts:
            o.step()
        for net in nets:
            for prm in net.parameters():
                if not torch.isfinite(prm).all():
                    raise TrainingError(f"non-finite network parameters after step {step}", step=step)
    return nets, log


def _price_table(nets: Sequence[PricingNet], V: np.ndarray) -> list[np.ndarray]:
    out = []
    with torch.no_grad():
        for i, net in enumerate(nets):
            vm = torch.as_tensor(_others(V, i), dtype=DTYPE)
            p = net(vm).numpy()
            out.append(np.concatenate([np.zeros((len(V), 1)), p], axis=1))
    return out


def hard_choices(nets: Sequence[PricingNet], ctrs: Sequence[CTRCurve], levels: Sequence[int],
                 V: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chosen option index, paid price and realized utility per (profile, bidder)."""
    prices = _price_table(nets, V)
    B, n = V.shape
    idx = np.empty((B, n), dtype=int)
    paid = np.empty((B, n))
    util = np.empty((B, n))
    for i in range(n):
        C = ctrs[i].as_array(levels)
        u = V[:, i:i + 1] * C[None, :] - prices[i]
        # first maximum = lowest allocation since levels increase
        j = np.argmax(u, axis=1)
        idx[:, i] = j
        paid[:, i] = prices[i][np.arange(B), j]
        util[:, i] = u[np.arange(B), j]
    return idx, paid, util


def _mean_se(x: np.ndarray) -> dict:
    x = np.asarray(x, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return {"mean": float(x.mean()), "se": se}


def evaluate_mechanism(nets: Sequence[PricingNet], ctrs: Sequence[CTRCurve], quality: Optional[QualityGrid],
                       n_eval: int = 10000, seed: int = 0, levels: Optional[Sequence[int]] = None) -> dict:
    """Hard-choice revenue, bidder utility and user utility with standard errors."""
    levels = ctrs[0].levels if levels is None else levels
    V = sample_profiles(np.random.Generator(np.random.Philox(seed)), n_eval, len(nets))
    idx, paid, util = hard_choices(nets, ctrs, levels, V)
    q = _quality_tensor(quality, len(nets), levels).numpy()
    user = q[tuple(idx[:, i] for i in range(len(nets)))]
    return {
        "revenue": _mean_se(paid.sum(axis=1)),
        "bidder_utility": _mean_se(util.sum(axis=1)),
        "user_utility": _mean_se(user),
        "n_eval": n_eval,
    }


@dataclass
class VCGOutcome:
    allocation: tuple[int, ...]
    payments: tuple[float, ...]
    welfare: float


def _feasible_tuples(levels: Sequence[int], n: int, budget: float) -> list[tuple[int, ...]]:
    J = len(levels)
    if J ** n > VCG_LIMIT:
        raise ConfigurationError(f"grid product {J ** n} exceeds {VCG_LIMIT} tuples")
    return [t for t in itertools.product(range(J), repeat=n) if sum(levels[j] for j in t) <= budget]


def vcg_baseline(ctrs: Sequence[CTRCurve], profile: Sequence[float], levels: Sequence[int],
                 budget: float, quality: Optional[QualityGrid] = None) -> VCGOutcome:
    """Welfare-maximizing allocation under sum(k) <= budget with Clarke pivot payments.

    Welfare counts bidder value only (the ``w_user = 0`` comparison point);
    ``quality`` is accepted for interface symmetry and ignored. Ties prefer
    the smaller total allocation, then the lexicographically smaller tuple.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    v = np.asarray(profile.v if isinstance(profile, ValuationProfile) else profile, dtype=float)
    n = len(v)
    C = np.stack([c.as_array(levels) for c in ctrs])
    tuples = _feasible_tuples(levels, n, budget)
    T = np.array(tuples)
    contrib = v[None, :] * C[np.arange(n)[None, :], T]  # (n_tuples, n)
    welfare = contrib.sum(axis=1)

    def best(mask: np.ndarray, values: np.ndarray) -> int:
        cand = np.flatnonzero(mask & (values == values[mask].max()))
        return int(min(cand, key=lambda r: (sum(levels[j] for j in tuples[r]), tuples[r])))

    everyone = np.ones(len(tuples), dtype=bool)
    r = best(everyone, welfare)
    pays = []
    for i in range(n):
        others = welfare - contrib[:, i]
        without_i = T[:, i] == 0
        pays.append(float(others[without_i].max() - others[r]))
    return VCGOutcome(tuple(levels[j] for j in tuples[r]), tuple(pays), float(welfare[r]))


def vcg_revenue(ctrs: Sequence[CTRCurve], levels: Sequence[int], budget: float,
                n_eval: int = 10000, seed: int = 0) -> dict:
    """Mean VCG revenue over the same profiles ``evaluate_mechanism`` draws."""
    n = len(ctrs)
    V = sample_profiles(np.random.Generator(np.random.Philox(seed)), n_eval, n)
    C = np.stack([c.as_array(levels) for c in ctrs])
    tuples = _feasible_tuples(levels, n, budget)
    T = np.array(tuples)
    Ct = C[np.arange(n)[None, :], T]  # (n_tuples, n)
    contrib = V[:, None, :] * Ct[None, :, :]  # (B, n_tuples, n)
    welfare = contrib.sum(axis=2)
    # tie order: smaller total allocation, then lexicographic tuple
    order = sorted(range(len(tuples)), key=lambda r: (sum(levels[j] for j in tuples[r]), tuples[r]))
    W = welfare[:, order]
    r = np.asarray(order)[np.argmax(W, axis=1)]
    rows = np.arange(len(V))
    revenue = np.zeros(len(V))
    utility = np.zeros(len(V))
    for i in range(n):
        others = welfare - contrib[:, :, i]
        without_i = T[:, i] == 0
        pay = others[:, without_i].max(axis=1) - others[rows, r]
        revenue += pay
        utility += contrib[rows, r, i] - pay
    return {"revenue": _mean_se(revenue), "bidder_utility": _mean_se(utility), "n_eval": n_eval,
            "budget": budget}


def dsic_check(nets: Sequence[PricingNet], ctrs: Sequence[CTRCurve], n_trials: int = 10000, seed: int = 0,
               levels: Optional[Sequence[int]] = None) -> dict:
    """Count menu-invariance, truthfulness and IR violations over random misreports."""
    levels = ctrs[0].levels if levels is None else levels
    rng = np.random.Generator(np.random.Philox(seed))
    n = len(nets)
    counts = {"menu_changed": 0, "misreport_gain": 0, "ir": 0, "others_not_optimal": 0}
    min_utility = math.inf
    for _ in range(n_trials):
        v = rng.random(n)
        i = int(rng.integers(n))
        lie = v.copy()
        lie[i] = rng.random()
        truthful_menu = menu_for_profile(nets, v, i, levels)
        lied_menu = menu_for_profile(nets, lie, i, levels)
        if not np.array_equal(truthful_menu.prices, lied_menu.prices):
            counts["menu_changed"] += 1
        u = utilities(truthful_menu, v[i], ctrs[i])
        j_true = choose(truthful_menu, v[i], ctrs[i])
        j_lie = choose(lied_menu, lie[i], ctrs[i])
        u_lie = utilities(lied_menu, v[i], ctrs[i])[j_lie]
        if u[j_true] < u_lie:
            counts["misreport_gain"] += 1
        if u[j_true] < 0:
            counts["ir"] += 1
        min_utility = min(min_utility, float(u[j_true]))
        for j in range(n):
            if j == i:
                continue
            m = menu_for_profile(nets, lie, j, levels)
            uj = utilities(m, v[j], ctrs[j])
            if uj[choose(m, v[j], ctrs[j])] < uj.max():
                counts["others_not_optimal"] += 1
    return {"n_trials": n_trials, "violations": counts, "total_violations": sum(counts.values()),
            "min_realized_utility": min_utility}


def mechanism_to_dict(nets: Sequence[PricingNet], config: AuctionConfig, meta: Optional[dict] = None) -> dict:
    cfg = asdict(config)
    return {
        "format": "mechanism-json",
        "version": 1,
        "config": cfg,
        "grid": list(config.levels),
        "networks": [
            {
                "bidder": i,
                "architecture": net.descriptor,
                "parameters": [
                    {"name": name, "shape": list(p.shape), "data": p.detach().reshape(-1).tolist()}
                    for name, p in net.named_parameters()
                ],
            }
            for i, net in enumerate(nets)
        ],
        "meta": meta or {},
    }


def mechanism_from_dict(doc: dict) -> tuple[list[PricingNet], AuctionConfig]:
    cfg = dict(doc["config"])
    config = AuctionConfig(**cfg)
    nets = []
    for entry in doc["networks"]:
        a = entry["architecture"]
        net = PricingNet(a["n_inputs"], a["n_prices"], a["hidden"], a["price_scale"])
        named = dict(net.named_parameters())
        with torch.no_grad():
            for p in entry["parameters"]:
                t = named[p["name"]]
                if list(t.shape) != p["shape"]:
                    raise ValueError(f"shape mismatch for {p['name']}")
                t.copy_(torch.as_tensor(p["data"], dtype=DTYPE).reshape(t.shape))
        nets.append(net)
    return nets, config


def save_mechanism(nets, config, path, meta=None) -> None:
    Path(path).write_text(json.dumps(mechanism_to_dict(nets, config, meta)))


def load_mechanism(path):
    return mechanism_from_dict(json.loads(Path(path).read_text()))
