"""Synthetic brand world: vocabulary, brands, cloze prompts and a corpus.

Brands live in categories (hotel, airline, ...). Each brand owns two
attribute words that its cloze prompts mention, so a prompt like
``for a crimson hotel , the best choice is`` identifies one brand. Every
category also has brand-neutral "compatible" prompts whose continuation can
be any brand of the category, and every ordered tuple of two or three
categories has "round" prompts (``i need a hotel and a airline . i
suggest``) answered with one brand per category. Joint intervention sweeps
run on those shared prompts.

A fraction of the brands are multi-token: their surface word is split into
a head piece and a ``##``-prefixed tail piece, and neither piece is used
anywhere else.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, VocabularyError

PAD, BOS = "<pad>", "<bos>"

FUNCTION_WORDS = (
    ".", ",", "?", "a", "and", "or", "for", "the", "is", "i", "if", "you", "my",
    "when", "people", "want", "need", "best", "choice", "always", "recommend",
    "try", "favorite", "which", "should", "pick", "suggest", "good", "many",
    "choose", "looking", "consider", "love", "makes", "great", "also", "like",
    "trip", "with",
)

CATEGORIES = (
    "hotel", "airline", "shoe", "watch", "phone", "car", "coffee", "bank",
    "laptop", "camera", "bike", "charity",
)

ATTRIBUTES = (
    "crimson", "swift", "quiet", "golden", "sturdy", "bright", "gentle", "bold",
    "silver", "cozy", "sleek", "rugged", "classic", "modern", "humble", "royal",
    "nimble", "mellow", "vivid", "frugal", "polished", "breezy", "earthy", "lucid",
    "radiant", "steady", "tidy", "lavish", "brisk", "serene", "amber", "cobalt",
    "dusky", "fresh", "grand", "jolly", "keen", "lively", "misty", "noble",
)

HEADS = (
    "vel", "kor", "zan", "mir", "tal", "bro", "quen", "dax", "lum", "sor",
    "fen", "gral", "hox", "jiv", "nel", "pry", "rud", "wex", "yol", "cav",
)
TAILS = (
    "ora", "ix", "ent", "ula", "ano", "ist", "eva", "ond", "ari", "ux",
    "elle", "ivo", "ath", "ene", "opa", "uri", "esk", "ima", "oth", "ado",
)

BRAND_TEMPLATES = (
    "{bos} for a {a1} {cat} , the best choice is",
    "{bos} when people want a {a2} {cat} , i always recommend",
    "{bos} if you need a {a1} and {a2} {cat} , try",
    "{bos} my favorite {a2} {cat} is",
)

COMPATIBLE_TEMPLATES = (
    "{bos} which {cat} should i pick ? i suggest",
    "{bos} for a good {cat} , many people choose",
    "{bos} looking for a {cat} ? consider",
)

# multi-category rounds; {cats} renders as "a hotel and a airline" etc.
ROUND_TEMPLATES = (
    "{bos} i need {cats} . i suggest",
    "{bos} for a trip with {cats} , choose",
    "{bos} looking for {cats} ? consider",
)

FOLLOWUPS = (
    "{b} is {a1} and {a2} .",
    "many people love {b} .",
    "{b} makes a great {cat} .",
    "i also like {b} .",
)


@dataclass(frozen=True)
class WorldConfig:
    n_brands: int = 8
    multi_token_fraction: float = 0.25
    prompts_per_brand: int = 3
    n_competitors: int = 3
    brands_per_category: int = 4
    corpus_size: int = 3000
    comention_fraction: float = 0.1
    min_mentions: int = 20
    max_vocab: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.n_brands < 2:
            raise ValueError("n_brands must be >= 2")
        if not 0.0 <= self.multi_token_fraction <= 1.0:
            raise ValueError("multi_token_fraction must lie in [0, 1]")
        if self.prompts_per_brand < 1 or self.n_competitors < 1:
            raise ValueError("prompts_per_brand and n_competitors must be >= 1")
        if self.brands_per_category < 2:
            raise ValueError("brands_per_category must be >= 2")


class Tokenizer:
    """Word-level tokenizer; multi-token brand words map to several pieces."""

    def __init__(self, vocabulary: Sequence[str], splits: dict[str, Sequence[str]] | None = None):
        self.vocabulary = list(vocabulary)
        self.ids = {w: i for i, w in enumerate(self.vocabulary)}
        if len(self.ids) != len(self.vocabulary):
            raise ValueError("duplicate vocabulary entries")
        self.splits = {w: tuple(p) for w, p in (splits or {}).items()}

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def bos_id(self) -> int:
        return self.ids[BOS]

    def tokenize(self, text: str) -> list[int]:
        out = []
        for word in text.split():
            pieces = self.splits.get(word, (word,))
            for piece in pieces:
                if piece not in self.ids:
                    raise VocabularyError(f"unknown word {piece!r}")
                out.append(self.ids[piece])
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        words: list[str] = []
        for i in ids:
            piece = self.vocabulary[int(i)]
            if piece.startswith("##") and words:
                words[-1] += piece[2:]
            else:
                words.append(piece)
        return " ".join(words)


@dataclass(frozen=True)
class Brand:
    id: int
    name: str
    token_seq: tuple[int, ...]
    cloze_prompts: tuple[tuple[int, ...], ...]
    competitors: tuple[int, ...]
    category: str
    attributes: tuple[str, str]

    @property
    def T(self) -> int:
        return len(self.token_seq)


@dataclass
class World:
    config: WorldConfig
    tokenizer: Tokenizer
    brands: list[Brand]
    corpus: list[tuple[int, ...]]
    compatible_prompts: dict[str, list[tuple[int, ...]]] = field(default_factory=dict)
    round_prompts: dict[tuple[str, ...], list[tuple[int, ...]]] = field(default_factory=dict)

    def __iter__(self):
        # allows ``tokenizer, brands, corpus = make_world(cfg)``
        return iter((self.tokenizer, self.brands, self.corpus))

    def brand(self, name_or_id) -> Brand:
        for b in self.brands:
            if b.id == name_or_id or b.name == name_or_id:
                return b
        raise KeyError(name_or_id)

    def shared_prompts(self, brand_ids: Sequence[int]) -> list[tuple[int, ...]]:
        """Prompts compatible with every brand of a joint round.

        Same-category rounds use the category prompts; rounds with one brand
        per category use the multi-category prompts listing the categories in
        bidder order. Any other mix has no shared prompt.
        """
        cats = tuple(self.brands[i].category for i in brand_ids)
        if len(set(cats)) == 1:
            return list(self.compatible_prompts[cats[0]])
        return list(self.round_prompts.get(cats, []))

    def max_prompt_len(self) -> int:
        lens = [len(p) for b in self.brands for p in b.cloze_prompts]
        lens += [len(p) for ps in self.compatible_prompts.values() for p in ps]
        lens += [len(p) for ps in self.round_prompts.values() for p in ps]
        return max(lens)

    def max_doc_len(self) -> int:
        return max(len(d) for d in self.corpus)


def _render(template: str, **kw) -> str:
    return template.format(bos=BOS, **kw)


def _join(items: Sequence[str]) -> str:
    if len(items) == 1:
        return items[0]
    return " , ".join(items[:-1]) + " and " + items[-1]


def make_world(config: WorldConfig = WorldConfig()) -> World:
    """Build the world; a pure function of ``config``."""
    rng = np.random.Generator(np.random.Philox(config.seed))
    n = config.n_brands
    n_categories = max(1, n // config.brands_per_category)
    if n_categories > len(CATEGORIES):
        raise CapacityError(f"{n_categories} categories requested, {len(CATEGORIES)} available")
    if 2 * n > len(ATTRIBUTES):
        raise CapacityError(f"{n} brands need {2 * n} attribute words, {len(ATTRIBUTES)} available")
    if n > min(len(HEADS), len(TAILS)):
        raise CapacityError(f"at most {min(len(HEADS), len(TAILS))} brand names available")
    if config.prompts_per_brand > len(BRAND_TEMPLATES):
        raise CapacityError(f"at most {len(BRAND_TEMPLATES)} cloze prompts per brand")

    cats = list(CATEGORIES[:n_categories])
    heads = rng.permutation(len(HEADS))[:n]
    tails = rng.permutation(len(TAILS))[:n]
    attrs = rng.permutation(len(ATTRIBUTES))[: 2 * n]
    n_multi = int(round(config.multi_token_fraction * n))
    if config.multi_token_fraction > 0:
        n_multi = max(n_multi, 1)
    multi = set(rng.permutation(n)[:n_multi].tolist())

    names, splits, pieces = [], {}, []
    for b in range(n):
        head, tail = HEADS[heads[b]], TAILS[tails[b]]
        name = head + tail
        names.append(name)
        if b in multi:
            splits[name] = (head, "##" + tail)
            pieces += [head, "##" + tail]
        else:
            pieces.append(name)

    vocab = [PAD, BOS, *FUNCTION_WORDS, *cats, *(ATTRIBUTES[i] for i in attrs), *pieces]
    if len(vocab) > config.max_vocab:
        raise CapacityError(f"vocabulary of {len(vocab)} exceeds max_vocab={config.max_vocab}")
    tok = Tokenizer(vocab, splits)

    category = [cats[b % n_categories] for b in range(n)]
    attr_words = [(ATTRIBUTES[attrs[2 * b]], ATTRIBUTES[attrs[2 * b + 1]]) for b in range(n)]
    by_cat = {c: [b for b in range(n) if category[b] == c] for c in cats}

    brands = []
    for b in range(n):
        a1, a2 = attr_words[b]
        prompts = tuple(
            tuple(tok.tokenize(_render(t, a1=a1, a2=a2, cat=category[b])))
            for t in BRAND_TEMPLATES[: config.prompts_per_brand]
        )
        others = [o for o in by_cat[category[b]] if o != b]
        k = min(config.n_competitors, len(others))
        comp = tuple(sorted(int(x) for x in rng.choice(others, size=k, replace=False)))
        brands.append(Brand(
            id=b, name=names[b], token_seq=tuple(tok.tokenize(names[b])),
            cloze_prompts=prompts, competitors=comp, category=category[b], attributes=(a1, a2),
        ))

    compatible = {
        c: [tuple(tok.tokenize(_render(t, cat=c))) for t in COMPATIBLE_TEMPLATES] for c in cats
    }
    round_keys = [
        combo for r in range(2, min(3, n_categories) + 1) for combo in itertools.permutations(cats, r)
    ]

    def round_text(t: str, combo: Sequence[str]) -> str:
        return _render(t, cats=_join([f"a {c}" for c in combo]))

    rounds = {
        combo: [tuple(tok.tokenize(round_text(t, combo))) for t in ROUND_TEMPLATES]
        for combo in round_keys
    }

    def followup(b: int) -> str:
        a1, a2 = attr_words[b]
        f = FOLLOWUPS[int(rng.integers(len(FOLLOWUPS)))]
        return f.format(b=names[b], a1=a1, a2=a2, cat=category[b])

    def followups(b: int) -> str:
        return " ".join(followup(b) for _ in range(int(rng.integers(1, 3))))

    def specific_doc(b: int, t: str) -> str:
        a1, a2 = attr_words[b]
        return f"{_render(t, a1=a1, a2=a2, cat=category[b])} {names[b]} . {followups(b)}"

    def round_doc(combo: Sequence[str], t: str) -> str:
        picks = [by_cat[c][int(rng.integers(len(by_cat[c])))] for c in combo]
        tails_ = [followup(b) for b in picks]
        tails_ = [tails_[i] for i in rng.permutation(len(tails_))]
        return f"{round_text(t, combo)} {_join([names[b] for b in picks])} . {' '.join(tails_)}"

    texts = []
    # every cloze prompt completed with its brand, then the pairwise co-mentions
    for b in range(n):
        for t in BRAND_TEMPLATES[: config.prompts_per_brand]:
            texts.append(specific_doc(b, t))
    for c, members in by_cat.items():
        for i, b1 in enumerate(members):
            for b2 in members[i + 1:]:
                t = COMPATIBLE_TEMPLATES[0]
                texts.append(f"{_render(t, cat=c)} {names[b1]} or {names[b2]} . {followups(b1)}")

    remaining = config.corpus_size - len(texts)
    if remaining < 0:
        raise CapacityError("corpus_size too small for the mandatory documents")
    n_specific = remaining // 3 if round_keys else remaining // 2
    n_round = remaining // 3 if round_keys else 0
    for _ in range(n_specific):
        b = int(rng.integers(n))
        texts.append(specific_doc(b, BRAND_TEMPLATES[int(rng.integers(config.prompts_per_brand))]))
    for _ in range(n_round):
        combo = round_keys[int(rng.integers(len(round_keys)))]
        texts.append(round_doc(combo, ROUND_TEMPLATES[int(rng.integers(len(ROUND_TEMPLATES)))]))
    for _ in range(remaining - n_specific - n_round):
        c = cats[int(rng.integers(n_categories))]
        members = by_cat[c]
        b = members[int(rng.integers(len(members)))]
        t = COMPATIBLE_TEMPLATES[int(rng.integers(len(COMPATIBLE_TEMPLATES)))]
        if rng.random() < config.comention_fraction:
            b2 = members[int(rng.integers(len(members)))]
            if b2 != b:
                texts.append(f"{_render(t, cat=c)} {names[b]} or {names[b2]} . {followups(b)}")
                continue
        texts.append(f"{_render(t, cat=c)} {names[b]} . {followups(b)}")

    order = rng.permutation(len(texts))
    corpus = [tuple(tok.tokenize(texts[i])) for i in order]
    for br in brands:
        c = sum(count_occurrences(doc, br.token_seq) for doc in corpus)
        if c < config.min_mentions:
            raise CapacityError(
                f"brand {br.name} occurs {c} times, below min_mentions={config.min_mentions}")
    return World(config, tok, brands, corpus, compatible, rounds)


def count_occurrences(seq: Sequence[int], pattern: Sequence[int]) -> int:
    """Non-overlapping left-to-right greedy matches of ``pattern`` in ``seq``."""
    seq, pattern = list(seq), list(pattern)
    T = len(pattern)
    if T == 0:
        return 0
    i = hits = 0
    while i + T <= len(seq):
        if seq[i:i + T] == pattern:
            hits += 1
            i += T
        else:
            i += 1
    return hits


def cloze_instances(brand: Brand) -> list[tuple[tuple[int, ...], int, int]]:
    """``(prefix p'_t, target y_t, t)`` for every prompt and 1-based t."""
    out = []
    for p in brand.cloze_prompts:
        for t in range(1, brand.T + 1):
            out.append((tuple(p) + brand.token_seq[: t - 1], brand.token_seq[t - 1], t))
    return out


def world_to_dict(world: World) -> dict:
    tok = world.tokenizer
    return {
        "format": "brandworld-json",
        "version": 1,
        "config": asdict(world.config),
        "vocabulary": tok.vocabulary,
        "splits": {w: list(p) for w, p in sorted(tok.splits.items())},
        "brands": [
            {
                "id": b.id, "name": b.name, "token_ids": list(b.token_seq),
                "prompt_ids": [list(p) for p in b.cloze_prompts],
                "competitors": list(b.competitors), "category": b.category,
                "attributes": list(b.attributes),
            }
            for b in world.brands
        ],
        "compatible_prompts": {c: [list(p) for p in ps] for c, ps in world.compatible_prompts.items()},
        "round_prompts": {"|".join(k): [list(p) for p in ps] for k, ps in world.round_prompts.items()},
        "corpus": [list(d) for d in world.corpus],
    }


def world_from_dict(doc: dict) -> World:
    tok = Tokenizer(doc["vocabulary"], doc["splits"])
    brands = [
        Brand(
            id=r["id"], name=r["name"], token_seq=tuple(r["token_ids"]),
            cloze_prompts=tuple(tuple(p) for p in r["prompt_ids"]),
            competitors=tuple(r["competitors"]), category=r["category"],
            attributes=tuple(r["attributes"]),
        )
        for r in doc["brands"]
    ]
    compatible = {c: [tuple(p) for p in ps] for c, ps in doc["compatible_prompts"].items()}
    rounds = {tuple(k.split("|")): [tuple(p) for p in ps] for k, ps in doc.get("round_prompts", {}).items()}
    return World(WorldConfig(**doc["config"]), tok, brands, [tuple(d) for d in doc["corpus"]],
                 compatible, rounds)


def save_world(world: World, path) -> None:
    Path(path).write_text(json.dumps(world_to_dict(world)))


def load_world(path) -> World:
    return world_from_dict(json.loads(Path(path).read_text()))


def world_checksum(world: World) -> str:
    return hashlib.sha256(json.dumps(world_to_dict(world), sort_keys=True).encode()).hexdigest()
