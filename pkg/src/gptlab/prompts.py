"""Prefix-prompt tuning: trainable virtual-token embeddings, frozen backbone.

The prompt matrix is the only trainable tensor in ptune mode; it rides in
checkpoints under the reserved name ``prompt.emb`` and is prepended to the
embedded input, ahead of BOS, with no positional additions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .model import INIT_STD

PROMPT_PARAM_NAME = "prompt.emb"


@dataclass
class PromptEmbeddings:
    matrix: Tensor  # [V_p x H]

    @property
    def count(self) -> int:
        return self.matrix.shape[0]

    @property
    def hidden(self) -> int:
        return self.matrix.shape[1]


@dataclass
class FreezeSpec:
    """Names of trainable tensors; everything else stays frozen."""
    trainable: frozenset[str]

    @classmethod
    def ptune(cls) -> "FreezeSpec":
        return cls(frozenset({PROMPT_PARAM_NAME}))

    @classmethod
    def all_backbone(cls, params: dict[str, Tensor]) -> "FreezeSpec":
        return cls(frozenset(params))


def init_prompts(v_p: int, hidden: int, seed: int,
                 dtype=np.float32) -> PromptEmbeddings:
    """normal(0, 0.02) prompt rows, deterministic under seed."""
    if v_p < 1:
        raise ConfigError(f"prompt token count must be >= 1, got {v_p}")
    rng = np.random.Generator(np.random.PCG64(seed))
    data = rng.normal(0.0, INIT_STD, size=(v_p, hidden)).astype(dtype)
    return PromptEmbeddings(Tensor(data, requires_grad=True,
                                   name=PROMPT_PARAM_NAME))


def attach_prefix(embedded: Tensor, prompts: PromptEmbeddings,
                  loss_mask: Sequence[bool]) -> tuple[Tensor, list[bool]]:
    """Prepend prompt rows to an embedded sequence.

    Returns the extended representation and a loss mask that is False at
    every prompt position; causality among the real tokens is untouched
    because prompts only add earlier rows.
    """
    if prompts.hidden != embedded.shape[1]:
        raise ConfigError(
            f"prompt width {prompts.hidden} != hidden size {embedded.shape[1]}")
    extended = ad.concat_rows([prompts.matrix, embedded])
    return extended, [False] * prompts.count + list(loss_mask)


def apply_freeze(params: dict[str, Tensor],
                 prompts: Optional[PromptEmbeddings],
                 spec: FreezeSpec) -> dict[str, Tensor]:
    """Return the trainable-parameter view and pin requires_grad flags.

    Frozen tensors stop accumulating gradients entirely, which realizes
    "backbone gradients are zero" without wasted work.
    """
    named = dict(params)
    if prompts is not None:
        named[PROMPT_PARAM_NAME] = prompts.matrix
    unknown = spec.trainable - named.keys()
    if unknown:
        raise ConfigError(f"freeze spec names unknown tensors: {sorted(unknown)}")
    trainable: dict[str, Tensor] = {}
    for name, t in named.items():
        t.requires_grad = name in spec.trainable
        if t.requires_grad:
            trainable[name] = t
    return trainable


def sweep_prompt_counts(counts: Sequence[int], run_config,
                        out_dir=None) -> list[tuple[int, float]]:
    """One complete p-tuning run per count, shared seed and data split."""
    from dataclasses import replace
    from pathlib import Path

    from .training import train

    if not counts:
        raise ConfigError("prompt-count sweep needs at least one count")
    rows = []
    for v_p in counts:
        run = replace(run_config, v_p=int(v_p))
        if out_dir is not None:
            run = replace(run, out_dir=Path(out_dir) / f"vp{v_p}")
        result = train(run)
        rows.append((int(v_p), result.final_eval_ppl))
    return rows
