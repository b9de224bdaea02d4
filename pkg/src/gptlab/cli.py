"""Command-line surface: reproducible experiments driven by config files.

Every command takes --config/--out (--seed overrides the config seed) and
writes its artifacts into the output directory, refusing to reuse a
non-empty one without --force. Exit codes: 0 success, 2 config error,
3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import (KV, load_run_config, parse_counts, parse_ratio, write_kv)
from .corpus import (SyntheticSpec, TokenSequence, generate_synthetic,
                     load_corpus, save_corpus, split)
from .errors import ConfigError, DataError, GptLabError, NumericError
from .model import generate as model_generate
from .model import load_checkpoint
from .prompts import sweep_prompt_counts
from .training import (build_tagger_from_files, evaluate_ppl,
                       prepare_sequences, read_lexicon, spawn_seeds,
                       split_loaded_tensors, train)
from .vocab import build_vocab, decode, load_vocab, save_vocab

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ABLATION_VARIANTS = (
    # name, use_lexical, use_entity, splice
    ("none", False, False, False),
    ("lexical", True, False, False),
    ("entity", False, True, False),
    ("both", True, True, False),
    ("splice", False, False, True),
)


def prepare_out_dir(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(
            f"output directory {out} is not empty (pass --force to reuse)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(kv: KV, out: Path, seed) -> None:
    table = dict(kv.table)
    if seed is not None:
        table["seed"] = str(seed)
    write_kv(out / "config.kv", table)


def _seed(kv: KV, args) -> int:
    return args.seed if args.seed is not None else kv.int_("seed", 0)


def cmd_gen_synthetic(args) -> int:
    kv = KV.load(args.config)
    out = prepare_out_dir(args.out, args.force)
    seed = _seed(kv, args)
    spec = SyntheticSpec(
        symptoms=read_lexicon(kv.path_("lexicon.symptoms")),
        diseases=read_lexicon(kv.path_("lexicon.diseases")),
        drugs=read_lexicon(kv.path_("lexicon.drugs")),
        n_dialogues=kv.int_("corpus.count"),
        turns_min=kv.int_("corpus.turns_min", 2),
        turns_max=kv.int_("corpus.turns_max", 4),
        style=kv.str_("corpus.style", "clinic"),
        n_mentions=kv.int_("corpus.mentions", 4),
    )
    corpus = generate_synthetic(spec, seed)
    path = out / kv.str_("corpus.out", "corpus.jsonl")
    save_corpus(corpus, path)
    _echo_config(kv, out, seed)
    print(f"wrote {len(corpus)} dialogues to {path}")
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    kv = KV.load(args.config)
    out = prepare_out_dir(args.out, args.force)
    corpus_paths = kv.paths_("data.corpus")
    if not corpus_paths:
        raise ConfigError("build-vocab needs data.corpus")
    dialogues = []
    for p in corpus_paths:
        dialogues.extend(load_corpus(p))
    vocab = build_vocab(dialogues)
    path = out / kv.str_("vocab.out", "vocab.txt")
    save_vocab(vocab, path)
    _echo_config(kv, out, None)
    print(f"wrote vocabulary of size {len(vocab)} to {path}")
    return EXIT_OK


def _cmd_train(mode: str, args) -> int:
    kv = KV.load(args.config)
    out = prepare_out_dir(args.out, args.force)
    run = load_run_config(args.config, mode, out, seed_override=args.seed)
    _echo_config(kv, out, run.seed)
    result = train(run)
    print(f"{mode}: {len(result.metrics.rows)} steps, "
          f"final eval ppl {result.final_eval_ppl:.4f}, "
          f"checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _cmd_train("pretrain", args)


def cmd_finetune(args) -> int:
    return _cmd_train("finetune", args)


def cmd_ptune(args) -> int:
    return _cmd_train("ptune", args)


def _load_eval_pieces(kv: KV, ckpt_key: str):
    """Checkpoint + vocab + channel overrides shared by eval/generate."""
    config, tensors = load_checkpoint(kv.path_(ckpt_key))
    backbone, prompts = split_loaded_tensors(tensors)
    vocab = load_vocab(kv.path_("data.vocab"))
    if config.vocab_size != len(vocab):
        raise DataError(
            f"checkpoint vocab_size={config.vocab_size} disagrees with "
            f"vocabulary of size {len(vocab)}")
    if kv.has("model.lexical"):
        config = replace(config, use_lexical=kv.bool_("model.lexical"))
    if kv.has("model.entity"):
        config = replace(config, use_entity=kv.bool_("model.entity"))
    tagger = build_tagger_from_files(kv.paths_("tagger.nouns"),
                                     kv.paths_("tagger.adjectives"),
                                     kv.paths_("tagger.verbs"))
    return config, backbone, prompts, vocab, tagger


def cmd_eval(args) -> int:
    kv = KV.load(args.config)
    out = prepare_out_dir(args.out, args.force)
    seed = _seed(kv, args)
    config, backbone, prompts, vocab, tagger = _load_eval_pieces(
        kv, "eval.checkpoint")
    corpus = load_corpus(kv.path_("data.corpus"))
    part = kv.str_("eval.part", "test")
    if part not in ("train", "test", "all"):
        raise ConfigError(f"eval.part must be train/test/all, got {part!r}")
    if part != "all":
        if not kv.has("data.split"):
            raise ConfigError("eval.part needs data.split")
        split_seed = spawn_seeds(seed)[1]
        tr, te = split(corpus, parse_ratio(kv.str_("data.split")), split_seed)
        corpus = tr if part == "train" else te
    policy = kv.str_("loss_mask", "response")
    seqs = prepare_sequences(corpus, vocab, config.max_len, policy,
                             kv.bool_("splice", False), tagger)
    ppl = evaluate_ppl(backbone, config, seqs, prompts=prompts)
    write_kv(out / "eval.txt", {"ppl": repr(ppl)})
    _echo_config(kv, out, seed)
    print(f"eval ppl {ppl:.6f} over {len(seqs)} dialogues ({part})")
    return EXIT_OK


def cmd_generate(args) -> int:
    kv = KV.load(args.config)
    out = prepare_out_dir(args.out, args.force)
    seed = _seed(kv, args)
    config, backbone, prompts, vocab, tagger = _load_eval_pieces(
        kv, "generate.checkpoint")
    corpus = load_corpus(kv.path_("data.corpus"))
    index = kv.int_("generate.index", 0)
    if not (0 <= index < len(corpus)):
        raise DataError(f"generate.index {index} outside corpus of {len(corpus)}")
    dlg = corpus[index]
    seq = prepare_sequences([dlg], vocab, config.max_len, "response",
                            False, tagger)[0]
    # keep history + the final doctor marker; drop the reply text and EOS
    keep = len(seq) - (len(dlg.turns[-1].text) + 1)
    history_seq = TokenSequence(ids=seq.ids[:keep],
                                lexical_tags=seq.lexical_tags[:keep],
                                entity_flags=seq.entity_flags[:keep],
                                loss_mask=seq.loss_mask[:keep],
                                position_ids=seq.position_ids[:keep])
    new_ids = model_generate(
        history_seq, backbone, config,
        strategy=kv.str_("generate.strategy", "greedy"),
        max_new=kv.int_("generate.max_new", 64),
        seed=seed,
        prompts=prompts.matrix if prompts is not None else None,
        top_k=kv.int_("generate.top_k", 5),
        eos_id=vocab.eos_id)
    lines = [
        f"dialogue = {dlg.id}",
        f"history = {decode(history_seq.ids, vocab)}",
        f"reference = {dlg.turns[-1].text}",
        f"generated = {decode(new_ids, vocab)}",
    ]
    (out / "generation.txt").write_text("\n".join(lines) + "\n",
                                        encoding="utf-8")
    _echo_config(kv, out, seed)
    print(lines[-1])
    return EXIT_OK


def cmd_sweep_prompts(args) -> int:
    kv = KV.load(args.config)
    out = prepare_out_dir(args.out, args.force)
    run = load_run_config(args.config, "ptune", out, seed_override=args.seed)
    counts = parse_counts(kv.str_("sweep.counts", "1,25,50,75,100"))
    rows = sweep_prompt_counts(counts, run, out_dir=out)
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("v_p,ppl\n")
        for v_p, ppl in rows:
            fh.write(f"{v_p},{ppl!r}\n")
    _echo_config(kv, out, run.seed)
    for v_p, ppl in rows:
        print(f"v_p={v_p:>4d}  test ppl {ppl:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    kv = KV.load(args.config)
    out = prepare_out_dir(args.out, args.force)
    base = load_run_config(args.config, "ptune", out, seed_override=args.seed)
    rows = []
    for name, lex, ent, splice in ABLATION_VARIANTS:
        run = replace(base, use_lexical=lex, use_entity=ent, splice=splice,
                      out_dir=out / name)
        result = train(run)
        rows.append((name, result.final_eval_ppl))
    with open(out / "ablation.csv", "w", encoding="utf-8") as fh:
        fh.write("variant,ppl\n")
        for name, ppl in rows:
            fh.write(f"{name},{ppl!r}\n")
    _echo_config(kv, out, base.seed)
    for name, ppl in rows:
        print(f"{name:>8s}  test ppl {ppl:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gptlab",
        description="deterministic experiments for an entity-aware dialogue LM")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-synthetic": (cmd_gen_synthetic, "generate an annotated corpus"),
        "build-vocab": (cmd_build_vocab, "build a character vocabulary"),
        "pretrain": (cmd_pretrain, "train a model from scratch"),
        "finetune": (cmd_finetune, "tune every backbone parameter"),
        "ptune": (cmd_ptune, "tune prefix prompts against a frozen backbone"),
        "sweep-prompts": (cmd_sweep_prompts, "p-tune at several prompt counts"),
        "eval": (cmd_eval, "perplexity of a checkpoint on a corpus"),
        "generate": (cmd_generate, "decode a reply for one dialogue"),
        "ablate": (cmd_ablate, "run the five knowledge-channel variants"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty output directory")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except DataError as exc:
        return _fail("data", exc, EXIT_DATA)
    except NumericError as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except GptLabError as exc:
        return _fail("internal", exc, EXIT_ERROR)


def _fail(category: str, exc: Exception, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"error: {category}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
