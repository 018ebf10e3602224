"""A small pre-norm decoder-only transformer with an FFN activation tape.

The FFN intermediate ``h = act(x @ W_in + b_in)`` of every layer is the
vector that attribution differentiates against and that interventions
rescale. Hooks receive that vector for the trailing positions of a pass
and return its replacement; the replacement is what ``W_out`` consumes and
what the tape records.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    ContextOverflowError,
    LengthError,
    NumericError,
    TrainingError,
    VocabularyError,
)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "tinylm-json"
CHECKPOINT_VERSION = 1

# hook(layer, h) -> h', where h has shape (batch, positions, d_ff)
Hook = Callable[[int, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 32
    seed: int = 0
    activation_kind: str = "gelu"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.activation_kind not in ("gelu", "relu"):
            raise ValueError(f"unknown activation_kind {self.activation_kind!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_neurons(self) -> int:
        return self.n_layers * self.d_ff


@dataclass
class ActivationTape:
    """Per-layer FFN intermediates recorded during one pass.

    ``last[l]`` is the (post-hook) vector at the final position; ``full[l]``
    holds every position when a full tape was requested.
    """

    last: list[np.ndarray]
    full: Optional[list[np.ndarray]] = None


def _param_names(n_layers: int) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for l in range(n_layers):
        names += [
            f"blocks.{l}.ln1_g", f"blocks.{l}.ln1_b",
            f"blocks.{l}.w_qkv", f"blocks.{l}.b_qkv",
            f"blocks.{l}.w_o", f"blocks.{l}.b_o",
            f"blocks.{l}.ln2_g", f"blocks.{l}.ln2_b",
            f"blocks.{l}.w_in", f"blocks.{l}.b_in",
            f"blocks.{l}.w_out", f"blocks.{l}.b_out",
        ]
    return names + ["lnf_g", "lnf_b", "unembed"]


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq_len, d)}
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "w_qkv": (d, 3 * d), p + "b_qkv": (3 * d,),
            p + "w_o": (d, d), p + "b_o": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w_in": (d, f), p + "b_in": (f,),
            p + "w_out": (f, d), p + "b_out": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "unembed": (d, cfg.vocab_size)})
    return shapes


class TinyLM(torch.nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.history: dict = {}
        gen = torch.Generator().manual_seed(config.seed)
        shapes = _param_shapes(config)
        self.params = torch.nn.ParameterDict()
        for name in _param_names(config.n_layers):
            shape = shapes[name]
            key = name.replace(".", "__")
            if name.endswith(("_g",)):
                t = torch.ones(shape, dtype=DTYPE)
            elif len(shape) == 1:
                t = torch.zeros(shape, dtype=DTYPE)
            else:
                std = 0.02 if name.startswith(("tok_emb", "pos_emb")) else 1.0 / math.sqrt(shape[0])
                t = torch.randn(shape, generator=gen, dtype=DTYPE) * std
            self.params[key] = torch.nn.Parameter(t)

    def p(self, name: str) -> torch.Tensor:
        return self.params[name.replace(".", "__")]

    def named_flat(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, self.p(n)) for n in _param_names(self.config.n_layers)]

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.activation_kind == "relu":
            return torch.relu(x)
        return F.gelu(x)

    def check_tokens(self, tokens: torch.Tensor) -> None:
        T = tokens.shape[-1]
        if T < 1 or T > self.config.max_seq_len:
            raise LengthError(f"sequence length {T} outside [1, {self.config.max_seq_len}]")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size):
            raise VocabularyError(f"token id outside [0, {self.config.vocab_size})")

    def run(
        self,
        tokens: torch.Tensor,
        hook: Optional[Hook] = None,
        hook_from: Optional[int] = None,
        record_full: bool = False,
    ) -> tuple[torch.Tensor, list[torch.Tensor], Optional[list[torch.Tensor]]]:
        """Batched pass over ``tokens`` of shape (B, T).

        Returns logits (B, T, V), the last-position intermediates per layer
        (each (B, d_ff)), and optionally the full per-position intermediates.
        ``hook`` sees positions ``hook_from..T-1`` (default: only T-1).
        """
        cfg = self.config
        B, T = tokens.shape
        self.check_tokens(tokens)
        start = T - 1 if hook_from is None else hook_from
        H = cfg.n_heads
        dh = cfg.d_model // H
        x = self.p("tok_emb")[tokens] + self.p("pos_emb")[:T]
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        last, full = [], ([] if record_full else None)
        for l in range(cfg.n_layers):
            pre = f"blocks.{l}."
            a = F.layer_norm(x, (cfg.d_model,), self.p(pre + "ln1_g"), self.p(pre + "ln1_b"))
            qkv = a @ self.p(pre + "w_qkv") + self.p(pre + "b_qkv")
            q, k, v = qkv.split(cfg.d_model, dim=-1)
            q = q.view(B, T, H, dh).transpose(1, 2)
            k = k.view(B, T, H, dh).transpose(1, 2)
            v = v.view(B, T, H, dh).transpose(1, 2)
            att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
            att = att.masked_fill(~causal, float("-inf"))
            att = torch.softmax(att, dim=-1)
            y = (att @ v).transpose(1, 2).reshape(B, T, cfg.d_model)
            x = x + y @ self.p(pre + "w_o") + self.p(pre + "b_o")
            f = F.layer_norm(x, (cfg.d_model,), self.p(pre + "ln2_g"), self.p(pre + "ln2_b"))
            h = self._act(f @ self.p(pre + "w_in") + self.p(pre + "b_in"))
            if hook is not None:
                hooked = hook(l, h[:, start:, :])
                h = torch.cat([h[:, :start, :], hooked], dim=1)
            last.append(h[:, -1, :])
            if record_full:
                full.append(h)
            x = x + h @ self.p(pre + "w_out") + self.p(pre + "b_out")
        x = F.layer_norm(x, (cfg.d_model,), self.p("lnf_g"), self.p("lnf_b"))
        logits = x @ self.p("unembed")
        return logits, last, full


def _as_tensor(tokens: Sequence[int]) -> torch.Tensor:
    return torch.as_tensor(list(tokens), dtype=torch.long).unsqueeze(0)


def forward(model: TinyLM, tokens: Sequence[int], hook: Optional[Hook] = None,
            hook_from: Optional[int] = None, full_tape: bool = False):
    """Logits for every position of one sequence plus its activation tape."""
    with torch.no_grad():
        logits, last, full = model.run(_as_tensor(tokens), hook, hook_from, record_full=full_tape)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")
    tape = ActivationTape(
        last=[h[0].numpy().copy() for h in last],
        full=[h[0].numpy().copy() for h in full] if full is not None else None,
    )
    return logits[0].numpy().copy(), tape


def log_prob_sequence(model: TinyLM, prompt: Sequence[int], target: Sequence[int],
                      hook: Optional[Hook] = None) -> tuple[np.ndarray, float]:
    """Per-token ``log P(y_t | prompt || y_<t)`` and their sum.

    One pass scores every target token; with a hook the pass uses
    ``hook_from`` at the last prompt token so each predicting position is
    hooked, as it would be during decoding.
    """
    if len(target) == 0:
        raise ValueError("target must be non-empty")
    seq = list(prompt) + list(target)[:-1]
    if len(seq) > model.config.max_seq_len:
        raise LengthError("prompt + target exceeds max_seq_len")
    with torch.no_grad():
        logits, _, _ = model.run(_as_tensor(seq), hook, hook_from=len(prompt) - 1)
    logp = torch.log_softmax(logits[0], dim=-1)
    pos = torch.arange(len(prompt) - 1, len(seq))
    per = logp[pos, torch.as_tensor(list(target))].numpy().copy()
    total = 0.0
    for v in per:
        total += float(v)
    return per, total


def ffn_gradients(model: TinyLM, prefix: Sequence[int], target_token: int, layer: int,
                  alphas: Sequence[float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``log P(target | prefix)`` w.r.t. the scaled layer vector.

    For every alpha the last-position intermediate of ``layer`` is replaced by
    ``alpha * h`` (h from the unscaled pass) and the exact gradient with
    respect to that replaced vector is returned.

    Returns ``(h, grads, logps)`` with shapes (d_ff,), (len(alphas), d_ff),
    (len(alphas),).
    """
    cfg = model.config
    if not 0 <= layer < cfg.n_layers:
        raise ValueError(f"layer {layer} outside [0, {cfg.n_layers})")
    toks = _as_tensor(prefix)
    model.check_tokens(toks)
    if not 0 <= target_token < cfg.vocab_size:
        raise VocabularyError(f"target token {target_token} out of range")
    with torch.no_grad():
        _, last, _ = model.run(toks)
    h = last[layer][0]
    if not torch.isfinite(h).all():
        raise NumericError(f"non-finite FFN intermediate at layer {layer}")
    a = torch.as_tensor(list(alphas), dtype=DTYPE)
    scaled = (a[:, None] * h[None, :]).detach().requires_grad_(True)

    def replace(l, hs):
        if l != layer:
            return hs
        return torch.cat([hs[:, :-1, :], scaled[:, None, :]], dim=1)

    batch = toks.expand(len(a), -1)
    with torch.enable_grad():
        logits, _, _ = model.run(batch, replace)
        logp = torch.log_softmax(logits[:, -1, :], dim=-1)[:, target_token]
        (grads,) = torch.autograd.grad(logp.sum(), scaled)
    return h.numpy().copy(), grads.numpy().copy(), logp.detach().numpy().copy()


def grad_logp_wrt_ffn(model: TinyLM, prefix: Sequence[int], target_token: int, layer: int,
                      alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    _, grads, _ = ffn_gradients(model, prefix, target_token, layer, [alpha])
    return grads[0]


@dataclass(frozen=True)
class Decode:
    """Decoding rule: ``greedy`` or ``temperature`` sampling with a seed."""

    kind: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature"):
            raise ValueError(f"unknown decode kind {self.kind!r}")
        if self.kind == "temperature" and self.temperature <= 0:
            raise ValueError("temperature must be positive")


GREEDY = Decode()


def generate_batch(model: TinyLM, prompt: Sequence[int], max_new: int, n: int = 1,
                   decode: Decode = GREEDY, hook: Optional[Hook] = None) -> np.ndarray:
    """Generate ``n`` continuations of one prompt; returns (n, max_new) ids.

    There is no KV cache: each step re-runs the whole prefix. The hook is
    applied to every position from the last prompt token onward, which is
    exactly the set of positions a cached decoder would have hooked when each
    of them was the newest token.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if len(prompt) < 1:
        raise LengthError("prompt must be non-empty")
    if len(prompt) + max_new - 1 > model.config.max_seq_len:
        raise ContextOverflowError(
            f"prompt of {len(prompt)} tokens + {max_new} new tokens overflows "
            f"max_seq_len={model.config.max_seq_len}")
    rng = np.random.Generator(np.random.Philox(decode.seed)) if decode.kind == "temperature" else None
    seqs = torch.as_tensor(list(prompt), dtype=torch.long).unsqueeze(0).repeat(n, 1)
    hook_from = len(prompt) - 1
    out = np.empty((n, max_new), dtype=np.int64)
    with torch.no_grad():
        for step in range(max_new):
            logits, _, _ = model.run(seqs, hook, hook_from)
            nxt = logits[:, -1, :]
            if not torch.isfinite(nxt).all():
                raise NumericError("non-finite logits during generation")
            if rng is None:
                ids = torch.argmax(nxt, dim=-1).numpy()
            else:
                probs = torch.softmax(nxt / decode.temperature, dim=-1).numpy()
                u = rng.random(n)
                ids = np.array([min(int(np.searchsorted(np.cumsum(row), x, side="right")), len(row) - 1)
                                for row, x in zip(probs, u)])
            out[:, step] = ids
            seqs = torch.cat([seqs, torch.as_tensor(ids, dtype=torch.long)[:, None]], dim=1)
    return out


def generate(model: TinyLM, prompt: Sequence[int], max_new: int, decode: Decode = GREEDY,
             hook: Optional[Hook] = None) -> list[int]:
    return generate_batch(model, prompt, max_new, 1, decode, hook)[0].tolist()


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 3e-3
    steps: int = 600
    batch: int = 32
    seed: int = 0
    heldout_fraction: float = 0.1


def _pad(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    T = max(len(s) for s in seqs)
    toks = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), T), dtype=torch.bool)
    for r, s in enumerate(seqs):
        toks[r, : len(s)] = torch.as_tensor(list(s))
        mask[r, : len(s)] = True
    return toks, mask


def sequence_loss(model: TinyLM, toks: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over the unpadded targets."""
    logits, _, _ = model.run(toks[:, :-1])
    tgt = toks[:, 1:]
    m = mask[:, 1:]
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), reduction="none")
    return (nll * m.reshape(-1)).sum() / m.sum()


def train_lm(corpus: Sequence[Sequence[int]], config: ModelConfig,
             hyper: TrainHyper = TrainHyper(), pad_id: int = 0) -> TinyLM:
    """Fit a fresh model on ``corpus`` with Adam; deterministic given seeds.

    The trailing ``heldout_fraction`` of the corpus is held out; its loss at
    initialization and after training lands in ``model.history``.
    """
    if len(corpus) == 0:
        raise ValueError("corpus must be non-empty")
    model = TinyLM(config)
    n_held = int(len(corpus) * hyper.heldout_fraction)
    train = list(corpus[: len(corpus) - n_held]) if n_held else list(corpus)
    held = list(corpus[len(corpus) - n_held:]) if n_held else list(corpus)
    held_toks, held_mask = _pad(held, pad_id)
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.Generator(np.random.Philox(hyper.seed))
    with torch.no_grad():
        initial = float(sequence_loss(model, held_toks, held_mask))
    losses = []
    for step in range(hyper.steps):
        idx = rng.integers(0, len(train), size=min(hyper.batch, len(train)))
        toks, mask = _pad([train[i] for i in idx], pad_id)
        loss = sequence_loss(model, toks, mask)
        if not torch.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        for _, prm in model.named_parameters():
            if not torch.isfinite(prm).all():
                raise TrainingError(f"non-finite parameters after step {step}", step=step)
        losses.append(float(loss.detach()))
    with torch.no_grad():
        final = float(sequence_loss(model, held_toks, held_mask))
    model.history = {"heldout_initial": initial, "heldout_final": final, "train_loss": losses}
    model.requires_grad_(False)
    return model


def model_to_dict(model: TinyLM) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "params": [
            {"name": n, "shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
            for n, t in model.named_flat()
        ],
    }


def model_from_dict(doc: dict) -> TinyLM:
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint format/version")
    cfg = ModelConfig(**doc["config"])
    model = TinyLM(cfg)
    shapes = _param_shapes(cfg)
    names = _param_names(cfg.n_layers)
    if [p["name"] for p in doc["params"]] != names:
        raise ValueError("checkpoint parameter order does not match the declared order")
    with torch.no_grad():
        for entry in doc["params"]:
            shape = tuple(entry["shape"])
            if shape != shapes[entry["name"]] or len(entry["data"]) != math.prod(shape):
                raise ValueError(f"shape mismatch for {entry['name']}")
            model.p(entry["name"]).copy_(torch.as_tensor(entry["data"], dtype=DTYPE).reshape(shape))
    model.requires_grad_(False)
    return model


def save_model(model: TinyLM, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> TinyLM:
    return model_from_dict(json.loads(Path(path).read_text()))
