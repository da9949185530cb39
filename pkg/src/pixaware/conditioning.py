"""Tagging, prompt embedding and classifier-free guidance."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Protocol, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

NULL_TOKEN = "<null>"

VOCAB = (
    # texture families produced by the synthetic dataset
    "stripes", "dots", "gradient", "checker", "noise-field",
    # layout
    "horizontal", "vertical", "diagonal", "radial", "fine", "coarse",
    # palette
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
    "white", "black", "gray",
    # appearance
    "bright", "dark", "colorful", "muted", "smooth", "sharp",
    # negative prompt words
    "noisy", "blurry", "low resolution",
    "posterized",
)
TOKEN_IDS = {tok: i + 1 for i, tok in enumerate(VOCAB)}
NULL_ID = 0

DEFAULT_NEGATIVE = ("noisy", "blurry", "low resolution")

# counts of out-of-vocabulary tokens that were mapped to the null token
unknown_tokens: Counter = Counter()


def token_ids(tokens: Sequence[str]) -> List[int]:
    ids = []
    for tok in tokens:
        if tok in TOKEN_IDS:
            ids.append(TOKEN_IDS[tok])
        else:
            unknown_tokens[tok] += 1
            log.warning("unknown token %r mapped to null", tok)
            ids.append(NULL_ID)
    return ids


class Tagger(Protocol):
    def __call__(self, pair) -> List[str]: ...


def label_tagger(pair) -> List[str]:
    """Stub tagger: passes through the labels stored on the pair."""
    return list(pair.tags)


def null_tagger(pair) -> List[str]:
    return []


TAGGERS: Dict[str, Callable] = {"labels": label_tagger, "null": null_tagger}


def register_tagger(name: str, fn: Callable) -> None:
    TAGGERS[name] = fn


def tag(pair, tagger="labels") -> List[str]:
    if isinstance(tagger, str):
        if tagger not in TAGGERS:
            raise KeyError(f"tagger {tagger!r} is not registered")
        tagger = TAGGERS[tagger]
    out = []
    for tok in tagger(pair):
        if tok in TOKEN_IDS:
            out.append(tok)
        else:
            unknown_tokens[tok] += 1
            log.warning("tagger produced unknown token %r; dropped to null", tok)
    return out


@dataclass
class PromptEmbedding:
    tokens: List[int]
    embeddings: torch.Tensor
    is_null: bool


class TextEmbedder(nn.Module):
    """Learned lookup table standing in for a frozen text encoder."""

    def __init__(self, context_dim: int):
        super().__init__()
        self.context_dim = context_dim
        self.table = nn.Embedding(len(VOCAB) + 1, context_dim)
        nn.init.normal_(self.table.weight, std=1.0)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)

    def batch(self, prompts: Sequence[Sequence[str]]):
        """Embed a batch of token lists. Returns (context, mask) padded to the longest prompt."""
        id_lists = [token_ids(p) or [NULL_ID] for p in prompts]
        length = max(len(ids) for ids in id_lists)
        ids = torch.full((len(id_lists), length), NULL_ID, dtype=torch.long)
        mask = torch.zeros((len(id_lists), length), dtype=torch.bool)
        for i, row in enumerate(id_lists):
            ids[i, : len(row)] = torch.tensor(row)
            mask[i, : len(row)] = True
        return self(ids.to(self.table.weight.device)), mask.to(self.table.weight.device)


def embed_prompt(tokens: Sequence[str], embedder: TextEmbedder) -> PromptEmbedding:
    ids = token_ids(tokens)
    is_null = len(ids) == 0
    if is_null:
        ids = [NULL_ID]
    emb = embedder(torch.tensor(ids, dtype=torch.long, device=embedder.table.weight.device))
    return PromptEmbedding(tokens=ids, embeddings=emb, is_null=is_null)


def drop_prompts(prompts: Sequence[Sequence[str]], p: float, rng: torch.Generator) -> List[List[str]]:
    """Replace each prompt by the null prompt with probability ``p``."""
    keep = (torch.rand(len(prompts), generator=rng, dtype=torch.float64) >= p).tolist()
    return [list(tokens) if k else [] for tokens, k in zip(prompts, keep)]


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 7.5
    rule: str = "standard"
    negative_tokens: tuple = field(default=DEFAULT_NEGATIVE)

    def __post_init__(self):
        if not np.isfinite(self.omega) or self.omega < 0:
            raise ValueError(f"omega must be finite and >= 0, got {self.omega}")
        if self.rule not in ("standard", "literal"):
            raise ValueError(f"unknown guidance rule {self.rule!r}")


def cfg_combine(eps_pos: torch.Tensor, eps_neg: torch.Tensor, g: GuidanceConfig) -> torch.Tensor:
    if eps_pos.shape != eps_neg.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_pos.shape)} vs {tuple(eps_neg.shape)}")
    if g.rule == "standard":
        return eps_neg + g.omega * (eps_pos - eps_neg)
    # literal additive form, kept for comparison
    return eps_pos + g.omega * eps_neg
