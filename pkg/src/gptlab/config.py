"""Documented key=value run-configuration files.

One ``key = value`` pair per line, ``#`` comments, keys namespaced with
dots. Paths are resolved relative to the config file so config trees can
be shipped and moved as a unit.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .training import RunConfig, ScheduleConfig, make_run_config

KNOWN_KEYS = {
    "mode", "seed",
    "data.corpus", "data.vocab", "data.split",
    "vocab.out", "corpus.out",
    "model.layers", "model.heads", "model.hidden", "model.max_len",
    "model.dropout", "model.lexical", "model.entity",
    "train.batch_size", "train.epochs", "train.clip", "train.weight_decay",
    "train.beta1", "train.beta2", "train.eps",
    "lr.peak", "lr.min", "lr.warmup_steps", "lr.decay_end_step",
    "loss_mask", "backbone", "splice",
    "ptune.v_p", "sweep.counts",
    "tagger.nouns", "tagger.adjectives", "tagger.verbs",
    "eval.every", "eval.checkpoint", "eval.part",
    "checkpoint.every",
    "lexicon.symptoms", "lexicon.diseases", "lexicon.drugs",
    "corpus.count", "corpus.turns_min", "corpus.turns_max",
    "corpus.style", "corpus.mentions",
    "generate.checkpoint", "generate.index", "generate.strategy",
    "generate.max_new", "generate.top_k",
    "ppl",  # emitted by the eval command; kept readable by read_kv
}


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def write_kv(path, mapping: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(mapping):
            fh.write(f"{key} = {mapping[key]}\n")


class KV:
    """Typed access to a parsed config, with paths anchored at the file."""

    def __init__(self, table: dict[str, str], base: Path):
        self.table = table
        self.base = base

    @classmethod
    def load(cls, path) -> "KV":
        path = Path(path)
        return cls(read_kv(path), path.parent)

    def has(self, key: str) -> bool:
        return key in self.table

    def str_(self, key: str, default: Optional[str] = None) -> str:
        if key in self.table:
            return self.table[key]
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    def int_(self, key: str, default: Optional[int] = None) -> int:
        raw = self.str_(key, None if default is None else str(default))
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: {raw!r} is not an integer") from exc

    def float_(self, key: str, default: Optional[float] = None) -> float:
        raw = self.str_(key, None if default is None else repr(default))
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: {raw!r} is not a number") from exc

    def bool_(self, key: str, default: Optional[bool] = None) -> bool:
        raw = self.str_(key, None if default is None else str(default)).lower()
        if raw in ("true", "yes", "1", "on"):
            return True
        if raw in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"key {key!r}: {raw!r} is not a boolean")

    def path_(self, key: str, default: Optional[str] = None) -> Path:
        return (self.base / self.str_(key, default)).resolve()

    def paths_(self, key: str) -> tuple[Path, ...]:
        if key not in self.table:
            return ()
        return tuple((self.base / part.strip()).resolve()
                     for part in self.table[key].split(",") if part.strip())


def parse_ratio(raw: str) -> tuple[int, int]:
    parts = raw.split(":")
    if len(parts) != 2:
        raise ConfigError(f"split ratio must look like '100:1', got {raw!r}")
    try:
        a, b = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"split ratio must be integers, got {raw!r}") from exc
    return a, b


def parse_counts(raw: str) -> list[int]:
    try:
        counts = [int(p.strip()) for p in raw.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"counts must be integers, got {raw!r}") from exc
    if not counts:
        raise ConfigError("empty counts list")
    return counts


def model_config_from(kv: KV) -> ModelConfig:
    return ModelConfig(
        n_layers=kv.int_("model.layers"),
        n_heads=kv.int_("model.heads"),
        hidden=kv.int_("model.hidden"),
        vocab_size=0,  # derived from the vocabulary at train time
        max_len=kv.int_("model.max_len"),
        dropout=kv.float_("model.dropout", 0.1),
        use_lexical=kv.bool_("model.lexical", True),
        use_entity=kv.bool_("model.entity", True),
    )


def schedule_from(kv: KV, default_peak: float) -> ScheduleConfig:
    return ScheduleConfig(
        peak_lr=kv.float_("lr.peak", default_peak),
        min_lr=kv.float_("lr.min", 5e-6),
        warmup_steps=kv.int_("lr.warmup_steps", 2000),
        decay_end_step=kv.int_("lr.decay_end_step", 100_000),
    )


def load_run_config(path, mode: str, out_dir,
                    seed_override: Optional[int] = None) -> RunConfig:
    """Build a RunConfig for one of the training subcommands."""
    kv = KV.load(path)
    if kv.has("mode") and kv.str_("mode") != mode:
        raise ConfigError(
            f"config declares mode {kv.str_('mode')!r} but the "
            f"{mode!r} command was invoked")
    base = make_run_config(
        mode,
        corpus_path=kv.path_("data.corpus"),
        vocab_path=kv.path_("data.vocab"),
        out_dir=Path(out_dir),
    )
    default_peak = base.sched.peak_lr
    run = base
    run.seed = seed_override if seed_override is not None else kv.int_("seed", 0)
    if kv.has("data.split"):
        run.split_ratio = parse_ratio(kv.str_("data.split"))
    run.batch_size = kv.int_("train.batch_size", 32)
    run.epochs = kv.int_("train.epochs", run.epochs)
    run.sched = schedule_from(kv, default_peak)
    run.clip = kv.float_("train.clip", 0.5)
    run.weight_decay = kv.float_("train.weight_decay", 0.1)
    run.beta1 = kv.float_("train.beta1", 0.9)
    run.beta2 = kv.float_("train.beta2", 0.95)
    run.eps = kv.float_("train.eps", 1e-8)
    run.loss_mask_policy = kv.str_("loss_mask", run.loss_mask_policy)
    run.eval_every = kv.int_("eval.every", 0)
    run.ckpt_every = kv.int_("checkpoint.every", 0)
    run.splice = kv.bool_("splice", False)
    run.noun_lexicons = kv.paths_("tagger.nouns")
    run.adj_lexicons = kv.paths_("tagger.adjectives")
    run.verb_lexicons = kv.paths_("tagger.verbs")
    if mode == "pretrain":
        run.model = model_config_from(kv)
    else:
        run.backbone_path = kv.path_("backbone")
        if kv.has("model.lexical"):
            run.use_lexical = kv.bool_("model.lexical")
        if kv.has("model.entity"):
            run.use_entity = kv.bool_("model.entity")
        if kv.has("model.dropout"):
            run.dropout = kv.float_("model.dropout")
    if mode == "ptune":
        run.v_p = kv.int_("ptune.v_p", 8)
    run.validate()
    return run
