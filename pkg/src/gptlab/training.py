"""Training loop: AdamW with decoupled decay, global-norm clipping,
warmup-cosine learning rate, epoch scheduling, checkpoints, PPL eval.

Everything is deterministic under RunConfig.seed: initialization, data
order, dropout and prompt init all derive from spawned sub-seeds, and the
loop is strictly single-threaded.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .annotation import dictionary_tagger, splice_entities
from .autodiff import Tensor
from .corpus import Dialogue, TokenSequence, linearize, load_corpus, split
from .errors import ConfigError, DataError, EmptyLossError, NumericError
from .model import (ModelConfig, init_parameters, lm_loss, load_checkpoint,
                    save_checkpoint)
from .prompts import (PROMPT_PARAM_NAME, FreezeSpec, PromptEmbeddings,
                      apply_freeze, init_prompts)
from .vocab import load_vocab

MODES = ("pretrain", "finetune", "ptune")


@dataclass
class ScheduleConfig:
    peak_lr: float = 1e-4
    min_lr: float = 5e-6
    warmup_steps: int = 2000
    decay_end_step: int = 100_000

    def __post_init__(self):
        if not (0 < self.min_lr <= self.peak_lr):
            raise ConfigError("need 0 < min_lr <= peak_lr")
        if not (0 <= self.warmup_steps < self.decay_end_step):
            raise ConfigError("need 0 <= warmup_steps < decay_end_step")


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear warmup to the peak, half-cosine decay to the floor, then flat."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    if step <= sched.warmup_steps:
        if sched.warmup_steps == 0:
            return sched.peak_lr
        return sched.peak_lr * step / sched.warmup_steps
    if step >= sched.decay_end_step:
        return sched.min_lr
    progress = (step - sched.warmup_steps) / (sched.decay_end_step - sched.warmup_steps)
    span = sched.peak_lr - sched.min_lr
    return sched.min_lr + span * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """First/second moment tables addressed by parameter name."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_grad_norm(grads: dict[str, np.ndarray], threshold: float) -> float:
    """Scale all gradients so their global L2 norm is at most threshold;
    returns the scale that was applied."""
    if threshold <= 0:
        raise ConfigError("clip threshold must be > 0")
    sq = 0.0
    for g in grads.values():
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient; aborting step")
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if norm <= threshold:
        return 1.0
    scale = threshold / norm
    for g in grads.values():
        g *= scale
    return scale


def _decays(name: str) -> bool:
    # norm gains/offsets and biases are exempt; embeddings, maps and the
    # prompt matrix decay
    return not name.endswith((".gamma", ".beta", ".b"))


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, beta1: float = 0.9,
               beta2: float = 0.95, eps: float = 1e-8,
               weight_decay: float = 0.1) -> None:
    """Bias-corrected Adam update plus decoupled decay w -= lr*wd*w.

    Parameters without a gradient entry are skipped entirely, so frozen
    tensors are untouched no matter how many steps run.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        if name not in grads:
            continue
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay and _decays(name):
            update = update + lr * weight_decay * p.data
        if not np.isfinite(update).all():
            raise NumericError(f"non-finite update for {name}")
        p.data = p.data - update


@dataclass
class RunConfig:
    """Full description of one training run; defaults follow the reference
    regimen (batch 32, clip 0.5, wd 0.1, warmup-cosine 2000->100k)."""
    mode: str
    corpus_path: Path
    vocab_path: Path
    out_dir: Path
    model: Optional[ModelConfig] = None      # pretrain architecture
    backbone_path: Optional[Path] = None     # finetune/ptune start point
    use_lexical: Optional[bool] = None       # channel overrides at tune time
    use_entity: Optional[bool] = None
    dropout: Optional[float] = None
    seed: int = 0
    split_ratio: tuple[int, int] = (100, 1)
    batch_size: int = 32
    epochs: int = 3
    sched: ScheduleConfig = field(default_factory=ScheduleConfig)
    clip: float = 0.5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    loss_mask_policy: str = "all"            # all | response
    v_p: int = 8
    splice: bool = False
    noun_lexicons: tuple[Path, ...] = ()
    adj_lexicons: tuple[Path, ...] = ()
    verb_lexicons: tuple[Path, ...] = ()
    eval_every: int = 0                      # 0 = final eval only
    ckpt_every: int = 0                      # 0 = final checkpoint only

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "pretrain" and self.model is None:
            raise ConfigError("pretrain needs a model configuration")
        if self.mode in ("finetune", "ptune") and self.backbone_path is None:
            raise ConfigError(f"{self.mode} needs a backbone checkpoint")
        if self.mode == "ptune" and self.v_p < 1:
            raise ConfigError("ptune needs v_p >= 1")
        if self.loss_mask_policy not in ("all", "response"):
            raise ConfigError(f"unknown loss-mask policy {self.loss_mask_policy!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


def make_run_config(mode: str, **kw) -> RunConfig:
    """RunConfig with the per-mode reference defaults filled in."""
    defaults = {
        "pretrain": dict(split_ratio=(100, 1), epochs=3,
                         loss_mask_policy="all",
                         sched=ScheduleConfig(peak_lr=1e-4)),
        "finetune": dict(split_ratio=(8, 2), epochs=6,
                         loss_mask_policy="response",
                         sched=ScheduleConfig(peak_lr=5e-5)),
        "ptune": dict(split_ratio=(8, 2), epochs=6,
                      loss_mask_policy="response",
                      sched=ScheduleConfig(peak_lr=5e-5)),
    }
    if mode not in defaults:
        raise ConfigError(f"unknown mode {mode!r}")
    merged = {**defaults[mode], **kw}
    return RunConfig(mode=mode, **merged)


@dataclass
class MetricsRow:
    step: int
    lr: float
    loss: float
    ppl: float
    eval_ppl: Optional[float] = None
    seconds: Optional[float] = None


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, row: MetricsRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ConfigError("metrics steps must be strictly increasing")
        self.rows.append(row)


METRICS_HEADER = "step,lr,loss,ppl,eval_ppl,seconds"


def save_metrics(log: MetricsLog, path) -> None:
    """CSV per the documented schema. The seconds column is left empty so
    that reruns with the same seed produce byte-identical files."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in log.rows:
            eval_s = repr(r.eval_ppl) if r.eval_ppl is not None else ""
            fh.write(f"{r.step},{r.lr!r},{r.loss!r},{r.ppl!r},{eval_s},\n")


def load_metrics(path) -> MetricsLog:
    log = MetricsLog()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise DataError(f"{path}: unexpected metrics header {header!r}")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            if len(parts) != 6:
                raise DataError(f"{path}: bad metrics row {line!r}")
            log.add(MetricsRow(
                step=int(parts[0]), lr=float(parts[1]), loss=float(parts[2]),
                ppl=float(parts[3]),
                eval_ppl=float(parts[4]) if parts[4] else None,
                seconds=float(parts[5]) if parts[5] else None))
    return log


@dataclass
class TrainResult:
    config: ModelConfig
    params: dict[str, Tensor]
    prompts: Optional[PromptEmbeddings]
    metrics: MetricsLog
    checkpoint_path: Path
    final_eval_ppl: float


def history_entity_texts(dlg: Dialogue) -> list[str]:
    """Entity mention strings from every turn before the final one."""
    out = []
    for turn in dlg.turns[:-1]:
        for span in turn.entities:
            out.append(turn.text[span.start:span.end])
    return out


def read_lexicon(path) -> list[str]:
    """One term per line; blanks ignored."""
    try:
        with open(path, encoding="utf-8") as fh:
            return [t.strip() for t in fh if t.strip()]
    except OSError as exc:
        raise DataError(f"cannot open lexicon {path}: {exc}") from exc


def build_tagger_from_files(noun_paths, adj_paths, verb_paths):
    if not (noun_paths or adj_paths or verb_paths):
        return None

    def read_terms(ps):
        terms = []
        for p in ps:
            terms.extend(read_lexicon(p))
        return terms

    return dictionary_tagger(read_terms(noun_paths), read_terms(adj_paths),
                             read_terms(verb_paths))


def _build_tagger(run: RunConfig):
    return build_tagger_from_files(run.noun_lexicons, run.adj_lexicons,
                                   run.verb_lexicons)


def spawn_seeds(seed: int) -> tuple[int, int, int, int, int]:
    """init, split, shuffle, dropout, prompt sub-seeds for one run seed."""
    children = np.random.SeedSequence(seed).spawn(5)
    return tuple(int(s.generate_state(1)[0]) for s in children)


def prepare_sequences(dialogues, vocab, max_len: int, policy: str,
                      splice: bool, tagger) -> list[TokenSequence]:
    mode = "pretrain" if policy == "all" else "tune"
    seqs = []
    for dlg in dialogues:
        seq = linearize(dlg, vocab, max_len, mode=mode, tagger=tagger)
        if splice:
            seq = splice_entities(seq, history_entity_texts(dlg), vocab,
                                  max_len)
        seqs.append(seq)
    return seqs


def split_loaded_tensors(tensors: dict[str, Tensor]
                         ) -> tuple[dict[str, Tensor], Optional[PromptEmbeddings]]:
    """Separate a loaded checkpoint into backbone and optional prompts."""
    prompts = None
    backbone = {}
    for name, t in tensors.items():
        if name == PROMPT_PARAM_NAME:
            prompts = PromptEmbeddings(t)
        else:
            backbone[name] = t
    return backbone, prompts


def _effective_config(run: RunConfig, vocab_size: int
                      ) -> tuple[ModelConfig, dict[str, Tensor]]:
    """Resolve architecture + starting parameters for the run's mode."""
    if run.mode == "pretrain":
        config = run.model
        if config.vocab_size == 0:
            config = replace(config, vocab_size=vocab_size)
        if config.vocab_size != vocab_size:
            raise DataError(
                f"model vocab_size={config.vocab_size} disagrees with "
                f"vocabulary of size {vocab_size}")
        return config, {}
    ckpt_config, tensors = load_checkpoint(run.backbone_path)
    if ckpt_config.vocab_size != vocab_size:
        raise DataError(
            f"checkpoint vocab_size={ckpt_config.vocab_size} disagrees with "
            f"vocabulary of size {vocab_size}")
    config = ckpt_config
    if run.use_lexical is not None:
        config = replace(config, use_lexical=run.use_lexical)
    if run.use_entity is not None:
        config = replace(config, use_entity=run.use_entity)
    if run.dropout is not None:
        config = replace(config, dropout=run.dropout)
    backbone, _ = split_loaded_tensors(tensors)
    return config, backbone


def evaluate_ppl(params: dict[str, Tensor], config: ModelConfig,
                 seqs: list[TokenSequence],
                 prompts: Optional[PromptEmbeddings] = None,
                 weighting: str = "token") -> float:
    """exp of the mean masked NLL over the dataset.

    "token" weights every unmasked token equally across the dataset;
    "dialogue" averages the per-dialogue mean NLLs instead.
    """
    if weighting not in ("token", "dialogue"):
        raise ConfigError(f"unknown PPL weighting {weighting!r}")
    if not seqs:
        raise DataError("cannot evaluate perplexity on an empty dataset")
    total_nll = 0.0
    total_weight = 0
    prompt_matrix = prompts.matrix if prompts is not None else None
    with ad.no_grad():
        for seq in seqs:
            n = sum(bool(m) for m in seq.loss_mask[1:])
            if n == 0:
                continue
            loss = lm_loss(seq, params, config, prompts=prompt_matrix)
            w = n if weighting == "token" else 1
            total_nll += float(loss.data) * w
            total_weight += w
    if total_weight == 0:
        raise EmptyLossError("no loss-contributing tokens in the dataset")
    return math.exp(total_nll / total_weight)


def _mean_loss(losses):
    total = losses[0]
    for l in losses[1:]:
        total = ad.add(total, l)
    return ad.mul(total, 1.0 / len(losses))


def train(run: RunConfig) -> TrainResult:
    """Run one complete experiment; deterministic under run.seed."""
    run.validate()
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    init_seed, split_seed, shuffle_seed, drop_seed, prompt_seed = (
        spawn_seeds(run.seed))

    vocab = load_vocab(run.vocab_path)
    corpus = load_corpus(run.corpus_path)
    train_dlgs, test_dlgs = split(corpus, run.split_ratio, split_seed)

    config, params = _effective_config(run, len(vocab))
    if run.mode == "pretrain":
        params = init_parameters(config, init_seed)

    tagger = _build_tagger(run)
    train_seqs = prepare_sequences(train_dlgs, vocab, config.max_len,
                                   run.loss_mask_policy, run.splice, tagger)
    test_seqs = prepare_sequences(test_dlgs, vocab, config.max_len,
                                  run.loss_mask_policy, run.splice, tagger)

    prompts = None
    if run.mode == "ptune":
        prompts = init_prompts(run.v_p, config.hidden, prompt_seed)
        freeze = FreezeSpec.ptune()
    else:
        freeze = FreezeSpec.all_backbone(params)
    trainable = apply_freeze(params, prompts, freeze)
    prompt_matrix = prompts.matrix if prompts is not None else None

    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seed))
    drop_rng = np.random.Generator(np.random.PCG64(drop_seed))

    state = OptimizerState()
    metrics = MetricsLog()
    ckpt_path = out_dir / "final.ckpt"
    step = 0
    t0 = time.perf_counter()

    def save_now(path) -> None:
        tensors = dict(params)
        if prompts is not None:
            tensors[PROMPT_PARAM_NAME] = prompts.matrix
        save_checkpoint(path, config, tensors)

    try:
        for _epoch in range(run.epochs):
            order = shuffle_rng.permutation(len(train_seqs))
            for lo in range(0, len(order), run.batch_size):
                batch = order[lo:lo + run.batch_size]
                ad.reset_tape()
                losses = [lm_loss(train_seqs[i], params, config,
                                  prompts=prompt_matrix, train=True,
                                  rng=drop_rng)
                          for i in batch]
                loss = _mean_loss(losses)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise NumericError(f"loss diverged at step {step + 1}")
                ad.backward(loss)
                grads = {name: t.grad for name, t in trainable.items()
                         if t.grad is not None}
                clip_grad_norm(grads, run.clip)
                step += 1
                lr = lr_at(step, run.sched)
                adamw_step(trainable, grads, state, lr,
                           beta1=run.beta1, beta2=run.beta2, eps=run.eps,
                           weight_decay=run.weight_decay)
                for t in trainable.values():
                    t.zero_grad()
                eval_ppl = None
                if run.eval_every and step % run.eval_every == 0 and test_seqs:
                    eval_ppl = evaluate_ppl(params, config, test_seqs,
                                            prompts=prompts)
                metrics.add(MetricsRow(step=step, lr=lr, loss=loss_val,
                                       ppl=float(np.exp(loss_val)),
                                       eval_ppl=eval_ppl,
                                       seconds=time.perf_counter() - t0))
                if run.ckpt_every and step % run.ckpt_every == 0:
                    save_now(out_dir / f"step{step}.ckpt")
    except NumericError:
        save_metrics(metrics, out_dir / "metrics.csv")
        raise

    final_ppl = evaluate_ppl(params, config, test_seqs, prompts=prompts)
    if metrics.rows:
        metrics.rows[-1].eval_ppl = final_ppl
    save_metrics(metrics, out_dir / "metrics.csv")
    save_now(ckpt_path)
    return TrainResult(config=config, params=params, prompts=prompts,
                       metrics=metrics, checkpoint_path=ckpt_path,
                       final_eval_ppl=final_ppl)
