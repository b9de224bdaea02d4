"""End-to-end command surface tests on a miniature pipeline."""
import pytest

from gptlab.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from gptlab.config import read_kv
from gptlab.corpus import load_corpus
from gptlab.training import load_metrics
from gptlab.vocab import load_vocab

GEN = """
lexicon.symptoms = lex/symptoms.txt
lexicon.diseases = lex/diseases.txt
lexicon.drugs = lex/drugs.txt
corpus.style = {style}
corpus.count = {count}
corpus.turns_min = 2
corpus.turns_max = 4
corpus.mentions = 3
seed = {seed}
"""

TRAIN = """
mode = {mode}
data.corpus = {corpus}
data.vocab = runs/vocab/vocab.txt
data.split = {split}
{extra}
train.batch_size = 8
train.epochs = {epochs}
lr.peak = 2e-3
lr.min = 2e-4
lr.warmup_steps = 5
lr.decay_end_step = 60
seed = 1
"""

MODEL_BLOCK = """
model.layers = 1
model.heads = 2
model.hidden = 24
model.max_len = 160
model.dropout = 0.0
loss_mask = all
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small but complete project tree: lexicons, corpora, vocab, pretrain."""
    root = tmp_path_factory.mktemp("cli")
    lex = root / "lex"
    lex.mkdir()
    (lex / "symptoms.txt").write_text(
        "headache\nfever\ncough\nnausea\n", encoding="utf-8")
    (lex / "diseases.txt").write_text(
        "flu\ngout\nmumps\npolio\n", encoding="utf-8")
    (lex / "drugs.txt").write_text(
        "zinc\niron\nsalbex\ntaxol\n", encoding="utf-8")

    (root / "gen_a.kv").write_text(
        GEN.format(style="clinic", count=40, seed=1), encoding="utf-8")
    (root / "gen_b.kv").write_text(
        GEN.format(style="followup", count=30, seed=2), encoding="utf-8")
    (root / "vocab.kv").write_text(
        "data.corpus = runs/a/corpus.jsonl, runs/b/corpus.jsonl\n",
        encoding="utf-8")
    (root / "pretrain.kv").write_text(
        TRAIN.format(mode="pretrain", corpus="runs/a/corpus.jsonl",
                     split="4:1", epochs=4, extra=MODEL_BLOCK),
        encoding="utf-8")
    (root / "ptune.kv").write_text(
        TRAIN.format(mode="ptune", corpus="runs/b/corpus.jsonl",
                     split="8:2", epochs=2,
                     extra=("backbone = runs/pretrain/final.ckpt\n"
                            "ptune.v_p = 2\nloss_mask = response\n")),
        encoding="utf-8")

    def run(cmd, config, out, *more):
        return main([cmd, "--config", str(root / config),
                     "--out", str(root / "runs" / out), *more])

    assert run("gen-synthetic", "gen_a.kv", "a") == EXIT_OK
    assert run("gen-synthetic", "gen_b.kv", "b") == EXIT_OK
    assert run("build-vocab", "vocab.kv", "vocab") == EXIT_OK
    assert run("pretrain", "pretrain.kv", "pretrain") == EXIT_OK
    return root, run


def test_pipeline_artifacts_are_self_consumable(workspace):
    root, run = workspace
    corpus = load_corpus(root / "runs" / "a" / "corpus.jsonl")
    assert len(corpus) == 40
    vocab = load_vocab(root / "runs" / "vocab" / "vocab.txt")
    assert len(vocab) > 6
    metrics = load_metrics(root / "runs" / "pretrain" / "metrics.csv")
    assert metrics.rows
    assert (root / "runs" / "pretrain" / "final.ckpt").exists()
    echoed = read_kv(root / "runs" / "pretrain" / "config.kv")
    assert echoed["mode"] == "pretrain"


def test_ptune_then_eval_and_generate(workspace):
    root, run = workspace
    assert run("ptune", "ptune.kv", "ptune") == EXIT_OK

    (root / "eval.kv").write_text(
        "eval.checkpoint = runs/ptune/final.ckpt\n"
        "data.corpus = runs/b/corpus.jsonl\n"
        "data.vocab = runs/vocab/vocab.txt\n"
        "data.split = 8:2\n"
        "eval.part = test\n"
        "loss_mask = response\n"
        "seed = 1\n", encoding="utf-8")
    assert run("eval", "eval.kv", "eval") == EXIT_OK
    ppl = float(read_kv(root / "runs" / "eval" / "eval.txt")["ppl"])
    assert ppl > 1.0

    (root / "generate.kv").write_text(
        "generate.checkpoint = runs/ptune/final.ckpt\n"
        "data.corpus = runs/b/corpus.jsonl\n"
        "data.vocab = runs/vocab/vocab.txt\n"
        "generate.index = 0\n"
        "generate.max_new = 16\n"
        "seed = 1\n", encoding="utf-8")
    assert run("generate", "generate.kv", "generate") == EXIT_OK
    text = (root / "runs" / "generate" / "generation.txt").read_text()
    assert "generated = " in text


def test_rerun_reproduces_byte_identical_artifacts(workspace):
    root, run = workspace
    assert run("ptune", "ptune.kv", "rerun1") == EXIT_OK
    assert run("ptune", "ptune.kv", "rerun2") == EXIT_OK
    m1 = (root / "runs" / "rerun1" / "metrics.csv").read_bytes()
    m2 = (root / "runs" / "rerun2" / "metrics.csv").read_bytes()
    assert m1 == m2
    c1 = (root / "runs" / "rerun1" / "final.ckpt").read_bytes()
    c2 = (root / "runs" / "rerun2" / "final.ckpt").read_bytes()
    assert c1 == c2


def test_seed_override_changes_results(workspace):
    root, run = workspace
    assert run("ptune", "ptune.kv", "seeded", "--seed", "99") == EXIT_OK
    base = (root / "runs" / "rerun1" / "metrics.csv").read_bytes()
    other = (root / "runs" / "seeded" / "metrics.csv").read_bytes()
    assert base != other
    assert read_kv(root / "runs" / "seeded" / "config.kv")["seed"] == "99"


def test_out_dir_protection_and_force(workspace):
    root, run = workspace
    assert run("gen-synthetic", "gen_a.kv", "a") == EXIT_CONFIG
    assert run("gen-synthetic", "gen_a.kv", "a", "--force") == EXIT_OK


def test_missing_config_is_config_error(workspace, capsys):
    root, run = workspace
    assert run("pretrain", "nope.kv", "x1") == EXIT_CONFIG
    err = capsys.readouterr().err
    assert err.startswith("error: config:")
    assert "\n" not in err.strip()


def test_unknown_key_is_config_error(workspace, tmp_path):
    root, run = workspace
    bad = root / "bad.kv"
    bad.write_text("mode = pretrain\nmodle.hidden = 8\n", encoding="utf-8")
    assert run("pretrain", "bad.kv", "x2") == EXIT_CONFIG


def test_vocab_mismatch_is_data_error(workspace):
    root, run = workspace
    # a vocabulary of a different size must be rejected against the checkpoint
    tiny = root / "runs" / "tiny.jsonl"
    tiny.write_text(
        '{"id": "t", "turns": [{"speaker": "patient", "text": "ab"}, '
        '{"speaker": "doctor", "text": "ba"}]}\n', encoding="utf-8")
    (root / "vocab_tiny.kv").write_text(
        "data.corpus = runs/tiny.jsonl\n", encoding="utf-8")
    assert run("build-vocab", "vocab_tiny.kv", "vocab-tiny") == EXIT_OK
    (root / "eval_bad.kv").write_text(
        "eval.checkpoint = runs/pretrain/final.ckpt\n"
        "data.corpus = runs/b/corpus.jsonl\n"
        "data.vocab = runs/vocab-tiny/vocab.txt\n"
        "eval.part = all\n"
        "seed = 1\n", encoding="utf-8")
    assert run("eval", "eval_bad.kv", "x3") == EXIT_DATA


def test_corrupt_corpus_is_data_error(workspace):
    root, run = workspace
    bad_corpus = root / "runs" / "corrupt.jsonl"
    bad_corpus.write_text('{"id": "x"}\n', encoding="utf-8")
    (root / "vocab_bad.kv").write_text(
        "data.corpus = runs/corrupt.jsonl\n", encoding="utf-8")
    assert run("build-vocab", "vocab_bad.kv", "x4") == EXIT_DATA


def test_ablate_and_sweep_tables(workspace):
    root, run = workspace
    (root / "ablate.kv").write_text(
        (root / "ptune.kv").read_text(), encoding="utf-8")
    assert run("ablate", "ablate.kv", "ablate") == EXIT_OK
    lines = (root / "runs" / "ablate" / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,ppl"
    assert [l.split(",")[0] for l in lines[1:]] == [
        "none", "lexical", "entity", "both", "splice"]
    for line in lines[1:]:
        float(line.split(",")[1])  # parseable ppl

    (root / "sweep.kv").write_text(
        (root / "ptune.kv").read_text() + "sweep.counts = 1, 3\n",
        encoding="utf-8")
    assert run("sweep-prompts", "sweep.kv", "sweep") == EXIT_OK
    lines = (root / "runs" / "sweep" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "v_p,ppl"
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "3"]
