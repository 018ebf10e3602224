"""Staged experiment pipeline with checksummed, provenance-carrying artifacts.

Every stage reads its inputs from the run directory, refuses stale ones, and
writes a JSON artifact of the form ``{"artifact", "provenance", "payload"}``.
Provenance holds the stage's config section and the sha256 of every input,
so a downstream stage can tell when an upstream file was rebuilt or its
config edited without rerunning the stages in between.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from filelock import FileLock

from . import attribution, auction, brandworld, effects, heatmap, tinylm
from .errors import ArtifactExistsError, ConfigurationError, DependencyError

DEFAULT_CONFIG = """\
[pipeline]
out_dir = run
seed = 0
jobs = 1

[world]
n_brands = 8
multi_token_fraction = 0.25
prompts_per_brand = 3
n_competitors = 3
brands_per_category = 4
corpus_size = 3000
comention_fraction = 0.1
min_mentions = 20
max_vocab = 512

[model]
d_model = 32
n_layers = 2
n_heads = 4
d_ff = 512
max_seq_len = 48
activation_kind = relu
lr = 0.003
steps = 600
batch = 32
heldout_fraction = 0.1

[attribution]
m = 20

[sweep]
bidders = auto
levels = 0,16,32,48,64,80,96,112,128
lambda = 2.0
n_seeds = 1
decode = temperature
temperature = 1.0
n_samples = 16
max_new = 16
quality_scale = 2.0

[auction]
w_user = 0.0
tau = 0.03
lr = 3e-5
steps = 10000
samples_per_step = 3000
hidden = 64,64
price_scale = 0.5
budget = auto

[eval]
n_eval = 10000
dsic_trials = 10000
w_user_sweep = 0,0.25,0.5,0.75,1.0

[paths]
"""

ARTIFACT_FILES = {
    "world": "world.json",
    "model": "model.json",
    "attribution": "attribution.json",
    "surface": "surface.json",
    "effects": "effects.json",
    "mechanism": "mechanism.json",
    "eval": "eval.json",
    "report": "report.json",
}

STAGE_SECTIONS = {
    "world": ["world"],
    "model": ["model"],
    "attribution": ["attribution"],
    "surface": ["sweep"],
    "effects": [],
    "mechanism": ["auction"],
    "eval": ["eval"],
    "report": [],
}

PRODUCER = {
    "world": "make-world", "model": "train-lm", "attribution": "attribute", "surface": "sweep",
    "effects": "fit-effects", "mechanism": "train-menu", "eval": "eval", "report": "report",
}


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(" ", "").split(",") if x]


@dataclass
class PipelineConfig:
    parser: configparser.ConfigParser
    overrides: dict = field(default_factory=dict)

    def get(self, section: str, key: str) -> str:
        try:
            return self.parser.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError) as e:
            raise ConfigurationError(str(e)) from e

    def _typed(self, section: str, key: str, kind: Callable):
        raw = self.get(section, key)
        try:
            return kind(raw)
        except ValueError as e:
            raise ConfigurationError(f"[{section}] {key} = {raw!r}: {e}") from e

    @property
    def seed(self) -> int:
        return self._typed("pipeline", "seed", int)

    @property
    def jobs(self) -> int:
        return self._typed("pipeline", "jobs", int)

    @property
    def out_dir(self) -> Path:
        return Path(self.get("pipeline", "out_dir"))

    def path(self, name: str) -> Path:
        if self.parser.has_option("paths", name):
            return Path(self.parser.get("paths", name))
        return self.out_dir / ARTIFACT_FILES[name]

    def side_path(self, filename: str) -> Path:
        return self.out_dir / filename

    def section_record(self, name: str) -> dict:
        """Config that determines an artifact: its sections plus the seed."""
        rec = {"seed": str(self.seed)}
        for sec in STAGE_SECTIONS[name]:
            rec[sec] = dict(sorted(self.parser.items(sec)))
        return rec

    # typed stage configs

    def world_config(self) -> brandworld.WorldConfig:
        t = lambda k, f: self._typed("world", k, f)
        return brandworld.WorldConfig(
            n_brands=t("n_brands", int), multi_token_fraction=t("multi_token_fraction", float),
            prompts_per_brand=t("prompts_per_brand", int), n_competitors=t("n_competitors", int),
            brands_per_category=t("brands_per_category", int), corpus_size=t("corpus_size", int),
            comention_fraction=t("comention_fraction", float), min_mentions=t("min_mentions", int),
            max_vocab=t("max_vocab", int), seed=self.seed,
        )

    def model_config(self, vocab_size: int) -> tuple[tinylm.ModelConfig, tinylm.TrainHyper]:
        t = lambda k, f: self._typed("model", k, f)
        cfg = tinylm.ModelConfig(
            vocab_size=vocab_size, d_model=t("d_model", int), n_layers=t("n_layers", int),
            n_heads=t("n_heads", int), d_ff=t("d_ff", int), max_seq_len=t("max_seq_len", int),
            seed=self.seed, activation_kind=self.get("model", "activation_kind"),
        )
        hyper = tinylm.TrainHyper(lr=t("lr", float), steps=t("steps", int), batch=t("batch", int),
                                  seed=self.seed, heldout_fraction=t("heldout_fraction", float))
        return cfg, hyper

    def sweep_settings(self) -> effects.SweepSettings:
        t = lambda k, f: self._typed("sweep", k, f)
        return effects.SweepSettings(
            max_new=t("max_new", int), decode=self.get("sweep", "decode"),
            temperature=t("temperature", float), n_samples=t("n_samples", int),
            quality_scale=t("quality_scale", float),
        )

    def auction_config(self, n_bidders: int, levels) -> auction.AuctionConfig:
        t = lambda k, f: self._typed("auction", k, f)
        budget = self.get("auction", "budget")
        return auction.AuctionConfig(
            n_bidders=n_bidders, levels=tuple(levels), w_user=t("w_user", float), tau=t("tau", float),
            lr=t("lr", float), steps=t("steps", int), samples_per_step=t("samples_per_step", int),
            hidden=tuple(t("hidden", _ints)), price_scale=t("price_scale", float),
            budget=None if budget == "auto" else int(budget), seed=self.seed,
        )


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> PipelineConfig:
    """Defaults, then the optional INI file, then ``{"section.key": value}`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(DEFAULT_CONFIG)
    if path is not None:
        if not Path(path).exists():
            raise ConfigurationError(f"config file {path} does not exist")
        parser.read(path)
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigurationError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        if not parser.has_section(sec):
            raise ConfigurationError(f"unknown config section [{sec}]")
        parser.set(sec, key, str(value))
    return PipelineConfig(parser, dict(overrides or {}))


# artifact I/O

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _dumps(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode()


class Stage:
    """Write guard for one artifact: existence check, lock, provenance."""

    def __init__(self, cfg: PipelineConfig, name: str, inputs: list[str], force: bool):
        self.cfg, self.name, self.inputs, self.force = cfg, name, inputs, force
        self.path = cfg.path(name)
        self.side_files: dict[str, bytes] = {}
        self.docs = {n: read_artifact(cfg, n) for n in inputs}

    def __enter__(self):
        if self.path.exists() and not self.force:
            raise ArtifactExistsError(f"{self.path} exists; pass --force to overwrite")
        if not self.path.parent.is_dir():
            raise FileNotFoundError(f"output directory {self.path.parent} does not exist")
        self.lock = FileLock(str(self.path) + ".lock")
        self.lock.acquire()
        return self

    def __exit__(self, *exc):
        self.lock.release()
        return False

    def add_file(self, filename: str, data: str | bytes) -> None:
        self.side_files[filename] = data.encode() if isinstance(data, str) else data

    def write(self, payload: dict) -> dict:
        provenance = {
            "config": self.cfg.section_record(self.name),
            "inputs": {n: {"file": self.cfg.path(n).name, "sha256": sha256_file(self.cfg.path(n))}
                       for n in self.inputs},
            "outputs": {f: hashlib.sha256(d).hexdigest() for f, d in sorted(self.side_files.items())},
        }
        for f, d in sorted(self.side_files.items()):
            _atomic_write(self.cfg.side_path(f), d)
        doc = {"artifact": self.name, "provenance": provenance, "payload": payload}
        _atomic_write(self.path, _dumps(doc))
        return doc


def read_artifact(cfg: PipelineConfig, name: str) -> dict:
    """Load an artifact after checking it against its own recorded provenance."""
    path = cfg.path(name)
    if not path.exists():
        raise DependencyError(f"missing artifact {name} ({path}); run `{PRODUCER[name]}` first")
    doc = json.loads(path.read_text())
    prov = doc.get("provenance", {})
    for up, rec in prov.get("inputs", {}).items():
        up_path = cfg.path(up)
        if not up_path.exists() or sha256_file(up_path) != rec["sha256"]:
            raise DependencyError(f"stale artifact {name} ({path}): input {up} changed since it was built; "
                                  f"rerun `{PRODUCER[name]}` with --force")
    if prov.get("config") != cfg.section_record(name):
        raise DependencyError(f"stale artifact {name} ({path}): its config section changed; "
                              f"rerun `{PRODUCER[name]}` with --force")
    for f, digest in prov.get("outputs", {}).items():
        fp = cfg.side_path(f)
        if not fp.exists() or sha256_file(fp) != digest:
            raise DependencyError(f"stale artifact {name}: companion file {f} is missing or modified")
    return doc


# stages

def cmd_make_world(cfg: PipelineConfig, force: bool = False) -> dict:
    with Stage(cfg, "world", [], force) as st:
        world = brandworld.make_world(cfg.world_config())
        return st.write(brandworld.world_to_dict(world))


def _world(doc: dict) -> brandworld.World:
    return brandworld.world_from_dict(doc["payload"])


def cmd_train_lm(cfg: PipelineConfig, force: bool = False) -> dict:
    with Stage(cfg, "model", ["world"], force) as st:
        world = _world(st.docs["world"])
        mcfg, hyper = cfg.model_config(world.tokenizer.vocab_size)
        need = world.max_prompt_len() + max(b.T for b in world.brands)
        if mcfg.max_seq_len < need:
            raise ConfigurationError(f"max_seq_len {mcfg.max_seq_len} < longest prompt plus brand ({need})")
        model = tinylm.train_lm(world.corpus, mcfg, hyper, pad_id=world.tokenizer.pad_id)
        payload = tinylm.model_to_dict(model)
        payload["history"] = {"heldout_initial": model.history["heldout_initial"],
                              "heldout_final": model.history["heldout_final"]}
        return st.write(payload)


def _model(doc: dict) -> tinylm.TinyLM:
    return tinylm.model_from_dict(doc["payload"])


def cmd_attribute(cfg: PipelineConfig, force: bool = False) -> dict:
    with Stage(cfg, "attribution", ["world", "model"], force) as st:
        world, model = _world(st.docs["world"]), _model(st.docs["model"])
        m = cfg._typed("attribution", "m", int)
        tables = [attribution.build_table(model, world, b.id, m, jobs=cfg.jobs) for b in world.brands]
        return st.write({"tables": [attribution.table_to_dict(t) for t in tables]})


def _tables(doc: dict) -> dict[int, attribution.AttributionTable]:
    return {t["brand"]: attribution.table_from_dict(t) for t in doc["payload"]["tables"]}


def resolve_bidders(cfg: PipelineConfig, world: brandworld.World) -> list[int]:
    spec = cfg.get("sweep", "bidders")
    if spec == "auto":
        first = world.brands[0]
        other = next((b.id for b in world.brands if b.category != first.category), None)
        return [first.id, other if other is not None else world.brands[1].id]
    ids = _ints(spec)
    if not 2 <= len(ids) <= 3 or len(set(ids)) != len(ids):
        raise ConfigurationError("sweep.bidders must list 2 or 3 distinct brand ids")
    if any(not 0 <= b < len(world.brands) for b in ids):
        raise ConfigurationError(f"sweep.bidders {ids} outside the world's brand ids")
    return ids


def cmd_sweep(cfg: PipelineConfig, force: bool = False) -> dict:
    with Stage(cfg, "surface", ["world", "model", "attribution"], force) as st:
        world, model = _world(st.docs["world"]), _model(st.docs["model"])
        tables = _tables(st.docs["attribution"])
        bidders = resolve_bidders(cfg, world)
        prompts = world.shared_prompts(bidders)
        if not prompts:
            raise ConfigurationError(f"bidders {bidders} share no compatible prompt")
        levels = cfg._typed("sweep", "levels", _ints)
        n_seeds = cfg._typed("sweep", "n_seeds", int)
        seeds = [effects.derive_seed(cfg.seed, j) for j in range(n_seeds)]
        surface = effects.run_sweep(
            model, [world.brands[b] for b in bidders], {b: tables[b].S_tilde for b in bidders},
            prompts, [levels] * len(bidders), cfg._typed("sweep", "lambda", float), seeds,
            cfg.sweep_settings(), jobs=cfg.jobs)
        surface.meta = {"n_prompts": len(prompts), "seeds": seeds}
        st.add_file("surface.csv", effects.surface_to_csv(surface))
        names = [f"k_{world.brands[b].name}" for b in bidders]
        for b in bidders:
            st.add_file(f"heatmap_brand{b}.svg", heatmap.render(
                surface.normalized(b), surface.levels,
                f"normalized hit change: {world.brands[b].name} (lambda={surface.lam})", names))
        st.add_file("heatmap_quality.svg", heatmap.render(
            surface.q_array(), surface.levels, "mean quality proxy", names))
        return st.write(effects.surface_sidecar(surface))


def _surface(cfg: PipelineConfig, doc: dict) -> effects.EffectSurface:
    return effects.surface_from_csv(cfg.side_path("surface.csv").read_text(), doc["payload"])


def cmd_fit_effects(cfg: PipelineConfig, force: bool = False) -> dict:
    with Stage(cfg, "effects", ["surface"], force) as st:
        surface = _surface(cfg, st.docs["surface"])
        ctrs = [effects.fit_ctr(surface, b) for b in surface.bidders]
        quality = effects.fit_quality(surface)
        payload = effects.effects_to_dict(ctrs, quality)
        payload["summary"] = {str(b): v for b, v in effects.effect_summary(surface).items()}
        return st.write(payload)


def _effects(doc: dict):
    return effects.effects_from_dict(doc["payload"])


def cmd_train_menu(cfg: PipelineConfig, force: bool = False) -> dict:
    with Stage(cfg, "mechanism", ["effects"], force) as st:
        ctrs, quality = _effects(st.docs["effects"])
        levels = ctrs[0].levels
        if any(c.levels != levels for c in ctrs):
            raise ConfigurationError("menus need one allocation grid shared by all bidders")
        acfg = cfg.auction_config(len(ctrs), levels)
        nets, log = auction.train_menu(acfg, ctrs, quality)
        st.add_file("training_log.csv", log.to_csv())
        return st.write(auction.mechanism_to_dict(nets, acfg))


def _row(w: float, ev: dict) -> dict:
    return {"w_user": w, **{k: ev[k] for k in ("revenue", "bidder_utility", "user_utility")}}


def cmd_eval(cfg: PipelineConfig, force: bool = False) -> dict:
    with Stage(cfg, "eval", ["effects", "mechanism"], force) as st:
        ctrs, quality = _effects(st.docs["effects"])
        nets, acfg = auction.mechanism_from_dict(st.docs["mechanism"]["payload"])
        n_eval = cfg._typed("eval", "n_eval", int)
        eval_seed = effects.derive_seed(cfg.seed, 1)
        main = auction.evaluate_mechanism(nets, ctrs, quality, n_eval, eval_seed)
        vcg = auction.vcg_revenue(ctrs, acfg.levels, acfg.total_budget, n_eval, eval_seed)
        dsic = auction.dsic_check(nets, ctrs, cfg._typed("eval", "dsic_trials", int),
                                  effects.derive_seed(cfg.seed, 2))
        table = []
        for w in cfg._typed("eval", "w_user_sweep", _floats):
            trained = nets if w == acfg.w_user else auction.train_menu(replace(acfg, w_user=w), ctrs, quality)[0]
            table.append(_row(w, auction.evaluate_mechanism(trained, ctrs, quality, n_eval, eval_seed)))
        return st.write({
            "mechanism": main,
            "vcg": vcg,
            "revenue_minus_vcg": main["revenue"]["mean"] - vcg["revenue"]["mean"],
            "dsic": dsic,
            "w_user_sweep": table,
        })


def cmd_report(cfg: PipelineConfig, force: bool = False) -> dict:
    names = ["world", "model", "attribution", "surface", "effects", "mechanism", "eval"]
    with Stage(cfg, "report", names, force) as st:
        docs = st.docs
        world = docs["world"]["payload"]
        ev = docs["eval"]["payload"]
        eff = docs["effects"]["payload"]
        surface = docs["surface"]["payload"]
        chain = {
            n: {"file": cfg.path(n).name, "sha256": sha256_file(cfg.path(n)),
                "inputs": docs[n]["provenance"]["inputs"], "outputs": docs[n]["provenance"]["outputs"]}
            for n in names
        }
        return st.write({
            "seed": cfg.seed,
            "world": {"n_brands": len(world["brands"]), "vocab_size": len(world["vocabulary"]),
                      "corpus_docs": len(world["corpus"])},
            "model": docs["model"]["payload"]["history"],
            "bidders": surface["bidders"],
            "levels": surface["levels"],
            "lambda": surface["lambda"],
            "effects": eff["summary"],
            "ctr": eff["ctr"],
            "mechanism": ev["mechanism"],
            "vcg": ev["vcg"],
            "dsic_violations": ev["dsic"]["total_violations"],
            "w_user_sweep": ev["w_user_sweep"],
            "provenance": chain,
        })


COMMANDS: dict[str, Callable[[PipelineConfig, bool], dict]] = {
    "make-world": cmd_make_world,
    "train-lm": cmd_train_lm,
    "attribute": cmd_attribute,
    "sweep": cmd_sweep,
    "fit-effects": cmd_fit_effects,
    "train-menu": cmd_train_menu,
    "eval": cmd_eval,
    "report": cmd_report,
}


def run_all(cfg: PipelineConfig, force: bool = False) -> dict:
    doc = {}
    for fn in COMMANDS.values():
        doc = fn(cfg, force)
    return doc


def summarize_report(payload: dict) -> str:
    """Plain-text view of a report payload."""
    lines = [f"seed {payload['seed']}  bidders {payload['bidders']}  lambda {payload['lambda']}"]
    for b, s in payload["effects"].items():
        lines.append(f"brand {b}: spearman {s['spearman']:.3f}  own slope {s['own_slope']:.3f}  "
                     f"cross slope {s['cross_slope']:.3f}")
    m, v = payload["mechanism"], payload["vcg"]
    lines.append(f"mechanism revenue {m['revenue']['mean']:.4f} +- {m['revenue']['se']:.4f}   "
                 f"VCG revenue {v['revenue']['mean']:.4f} +- {v['revenue']['se']:.4f}")
    lines.append(f"DSIC/IR violations: {payload['dsic_violations']}")
    lines.append(f"{'w_user':>7} {'revenue':>9} {'bidder_u':>9} {'user_u':>9}")
    for r in payload["w_user_sweep"]:
        lines.append(f"{r['w_user']:>7.2f} {r['revenue']['mean']:>9.4f} {r['bidder_utility']['mean']:>9.4f} "
                     f"{r['user_utility']['mean']:>9.4f}")
    return "\n".join(lines)
