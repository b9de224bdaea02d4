"""Decoder-only transformer with four-channel input embedding fusion.

The input embedding is the elementwise sum of word, position, lexical-tag
and entity-flag lookups; a disabled channel contributes exactly zero.
Blocks are pre-norm with residual connections; the LM head is tied to the
word embedding table.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .annotation import ENTITY_TABLE_SIZE, LEX_TABLE_SIZE
from .autodiff import Tensor
from .corpus import TokenSequence
from .errors import CheckpointError, ConfigError, ShapeError

LN_EPS = 1e-5
INIT_STD = 0.02

CHECKPOINT_MAGIC = b"GLCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    hidden: int
    vocab_size: int
    max_len: int
    dropout: float = 0.1
    use_lexical: bool = True
    use_entity: bool = True
    lex_table_size: int = LEX_TABLE_SIZE
    entity_table_size: int = ENTITY_TABLE_SIZE

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ConfigError(
                f"hidden={self.hidden} not divisible by n_heads={self.n_heads}")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    @property
    def ffw_dim(self) -> int:
        return 4 * self.hidden

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "hidden": self.hidden, "vocab_size": self.vocab_size,
            "max_len": self.max_len, "dropout": self.dropout,
            "use_lexical": self.use_lexical, "use_entity": self.use_entity,
            "lex_table_size": self.lex_table_size,
            "entity_table_size": self.entity_table_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named backbone tensor and its shape, in canonical order."""
    h, dk = config.hidden, config.head_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, h),
        "pos_emb": (config.max_len, h),
        "lex_emb": (config.lex_table_size, h),
        "ent_emb": (config.entity_table_size, h),
    }
    for i in range(config.n_layers):
        p = f"layer{i}"
        shapes[f"{p}.ln1.gamma"] = (h,)
        shapes[f"{p}.ln1.beta"] = (h,)
        for j in range(config.n_heads):
            shapes[f"{p}.head{j}.wq"] = (h, dk)
            shapes[f"{p}.head{j}.wk"] = (h, dk)
            shapes[f"{p}.head{j}.wv"] = (h, dk)
        shapes[f"{p}.attn_out"] = (h, h)
        shapes[f"{p}.ln2.gamma"] = (h,)
        shapes[f"{p}.ln2.beta"] = (h,)
        shapes[f"{p}.ffw_in.w"] = (h, config.ffw_dim)
        shapes[f"{p}.ffw_in.b"] = (config.ffw_dim,)
        shapes[f"{p}.ffw_out.w"] = (config.ffw_dim, h)
        shapes[f"{p}.ffw_out.b"] = (h,)
    shapes["ln_f.gamma"] = (h,)
    shapes["ln_f.beta"] = (h,)
    return shapes


def init_parameters(config: ModelConfig, seed: int,
                    dtype=np.float32) -> dict[str, Tensor]:
    """normal(0, 0.02) weights, ones for norm gains, zeros for offsets/biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith((".beta", ".b")):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


def embed(seq: TokenSequence, params: dict[str, Tensor],
          config: ModelConfig) -> Tensor:
    """Sum of the four channel lookups; disabled channels add nothing."""
    seq.check()
    if len(seq) > config.max_len:
        raise ShapeError(
            f"sequence length {len(seq)} exceeds max_len {config.max_len}")
    x = ad.add(ad.take_rows(params["tok_emb"], seq.ids),
               ad.take_rows(params["pos_emb"], seq.position_ids))
    if config.use_lexical:
        x = ad.add(x, ad.take_rows(params["lex_emb"], seq.lexical_tags))
    if config.use_entity:
        x = ad.add(x, ad.take_rows(params["ent_emb"], seq.entity_flags))
    return x


def attention_head(h_in: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                   mask: np.ndarray) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d_k)) V for one head under a causal mask."""
    q = ad.matmul(h_in, wq)
    k = ad.matmul(h_in, wk)
    v = ad.matmul(h_in, wv)
    dk = wq.shape[1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dk))
    attn = ad.softmax_rows(scores, mask=mask)
    return ad.matmul(attn, v)


def multi_head(h_in: Tensor, head_weights, w_out: Tensor,
               mask: np.ndarray) -> Tensor:
    """Concat(head_1 .. head_h) followed by the output map."""
    heads = [attention_head(h_in, wq, wk, wv, mask)
             for (wq, wk, wv) in head_weights]
    return ad.matmul(ad.concat_cols(heads), w_out)


def _block(x: Tensor, params: dict[str, Tensor], layer: int,
           config: ModelConfig, mask: np.ndarray, train: bool,
           rng: Optional[np.random.Generator]) -> Tensor:
    p = f"layer{layer}"
    normed = ad.layer_norm(x, params[f"{p}.ln1.gamma"],
                           params[f"{p}.ln1.beta"], LN_EPS)
    head_weights = [(params[f"{p}.head{j}.wq"], params[f"{p}.head{j}.wk"],
                     params[f"{p}.head{j}.wv"])
                    for j in range(config.n_heads)]
    attn = multi_head(normed, head_weights, params[f"{p}.attn_out"], mask)
    if train:
        attn = _dropout(attn, config.dropout, rng)
    x = ad.add(x, attn)
    normed = ad.layer_norm(x, params[f"{p}.ln2.gamma"],
                           params[f"{p}.ln2.beta"], LN_EPS)
    hidden = ad.gelu(ad.add(ad.matmul(normed, params[f"{p}.ffw_in.w"]),
                            params[f"{p}.ffw_in.b"]))
    out = ad.add(ad.matmul(hidden, params[f"{p}.ffw_out.w"]),
                 params[f"{p}.ffw_out.b"])
    if train:
        out = _dropout(out, config.dropout, rng)
    return ad.add(x, out)


def forward(seq: TokenSequence, params: dict[str, Tensor],
            config: ModelConfig, prompts: Optional[Tensor] = None,
            train: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits over the vocabulary, one row per (prompt or real) position.

    With a prompt matrix the rows are prepended before the embedded
    sequence: prompts get no positional/lexical/entity additions, and
    every real token can attend to every prompt row.
    """
    x = embed(seq, params, config)
    if train:
        x = _dropout(x, config.dropout, rng)
    n_prompt = 0
    if prompts is not None:
        n_prompt = prompts.shape[0]
        x = ad.concat_rows([prompts, x])
    mask = causal_mask(n_prompt + len(seq))
    for layer in range(config.n_layers):
        x = _block(x, params, layer, config, mask, train, rng)
    x = ad.layer_norm(x, params["ln_f.gamma"], params["ln_f.beta"], LN_EPS)
    return ad.matmul(x, ad.transpose(params["tok_emb"]))  # tied LM head


def shifted_targets(seq: TokenSequence, n_prompt: int = 0
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Targets/mask aligned to logit rows: row r predicts real token r+1-P.

    Prompt rows and the final row never carry loss; token j contributes
    when its loss_mask is set, via the logit row just before it.
    """
    total = n_prompt + len(seq)
    targets = np.zeros(total, dtype=np.int64)
    mask = np.zeros(total, dtype=bool)
    for j in range(1, len(seq)):
        targets[n_prompt + j - 1] = seq.ids[j]
        mask[n_prompt + j - 1] = seq.loss_mask[j]
    return targets, mask


def lm_loss(seq: TokenSequence, params: dict[str, Tensor],
            config: ModelConfig, prompts: Optional[Tensor] = None,
            train: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Mean next-token NLL over the sequence's unmasked positions."""
    logits = forward(seq, params, config, prompts=prompts, train=train, rng=rng)
    n_prompt = prompts.shape[0] if prompts is not None else 0
    targets, mask = shifted_targets(seq, n_prompt)
    return ad.cross_entropy(logits, targets, mask)


def generate(history: TokenSequence, params: dict[str, Tensor],
             config: ModelConfig, strategy: str = "greedy",
             max_new: int = 32, seed: int = 0,
             prompts: Optional[Tensor] = None, top_k: int = 5,
             eos_id: Optional[int] = None) -> list[int]:
    """Autoregressive decoding; greedy is deterministic, top-k is
    deterministic under seed. New tokens are annotated OTHER/0."""
    if strategy not in ("greedy", "top_k"):
        raise ConfigError(f"unknown decoding strategy {strategy!r}")
    if len(history) >= config.max_len:
        raise ShapeError("history must be shorter than max_len")
    from .annotation import LexTag

    rng = np.random.Generator(np.random.PCG64(seed))
    seq = TokenSequence(ids=list(history.ids),
                        lexical_tags=list(history.lexical_tags),
                        entity_flags=list(history.entity_flags),
                        loss_mask=list(history.loss_mask),
                        position_ids=list(history.position_ids))
    out: list[int] = []
    with ad.no_grad():
        while len(out) < max_new and len(seq) < config.max_len:
            logits = forward(seq, params, config, prompts=prompts).data[-1]
            if strategy == "greedy":
                nxt = int(np.argmax(logits))
            else:
                k = min(top_k, logits.size)
                cand = np.argsort(logits)[::-1][:k]
                z = logits[cand] - logits[cand].max()
                p = np.exp(z) / np.exp(z).sum()
                nxt = int(rng.choice(cand, p=p))
            out.append(nxt)
            seq.ids.append(nxt)
            seq.lexical_tags.append(int(LexTag.OTHER))
            seq.entity_flags.append(0)
            seq.loss_mask.append(False)
            seq.position_ids.append(len(seq.position_ids))
            if eos_id is not None and nxt == eos_id:
                break
    return out


# --- checkpoint container ---

def save_checkpoint(path, config: ModelConfig,
                    tensors: dict[str, Tensor]) -> None:
    """Self-describing container: JSON header + raw little-endian float32."""
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        raw = np.ascontiguousarray(t.data.astype("<f4")).tobytes()
        entries.append({"name": name, "shape": list(t.shape),
                        "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    """Load a container, verifying magic, version and every backbone shape."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint container")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported container version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    config = ModelConfig.from_dict(header["config"])
    expected = parameter_shapes(config)
    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if name in expected and expected[name] != shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {shape}, "
                f"config implies {expected[name]}")
        tensors[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing[:3]}")
    return config, tensors
