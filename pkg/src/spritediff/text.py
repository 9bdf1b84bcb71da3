"""Closed-vocabulary prompts and the compact causal text encoder.

Prompts are built from the toy world's closed word set (scene adjectives,
places, category names, "including", and punctuation). A scene prompt with
subjects is extended to

    "<scene prompt>, including <cat_1>, <cat_2>, ..., <cat_M>."

and each subject keeps a slot pointing at its category-word token position,
which is where identity and visual embeddings are later fused in.

The encoder is a learned token-embedding table plus a 2-layer causal
transformer. Output rows at padding positions are the raw pad embedding,
identical across prompts; rows for real tokens depend only on tokens at or
before their position.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import FeedForward, MultiHeadAttention
from . import toyworld

PAD_TOKEN = "<pad>"


def default_vocabulary() -> "Vocabulary":
    words = [PAD_TOKEN, ",", ".", "including"]
    words += list(toyworld.CATEGORIES)
    for adjectives in toyworld.PROMPT_ADJECTIVES.values():
        words += list(adjectives)
    words += list(toyworld.PROMPT_PLACES)
    seen = []
    for w in words:
        if w not in seen:
            seen.append(w)
    return Vocabulary(tuple(seen))


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]

    @property
    def pad_id(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, text: str) -> list[str]:
        return re.findall(r"[a-z]+|[,.]", text.lower())

    def encode(self, text: str) -> list[int]:
        index = {w: i for i, w in enumerate(self.words)}
        ids = []
        for tok in self.tokenize(text):
            if tok not in index:
                raise ValueError(f"word {tok!r} outside the closed vocabulary")
            ids.append(index[tok])
        return ids


@dataclass(frozen=True)
class ExtendedPrompt:
    text: str
    token_ids: tuple[int, ...]
    subject_slots: tuple[tuple[int, int], ...]  # (subject_index, token_position)


def build_extended_prompt(
    scene_prompt: str,
    subjects,
    vocab: Vocabulary,
    max_len: int = 32,
) -> ExtendedPrompt:
    """Extend a scene prompt with subject category words and record slots.

    ``subjects`` is a sequence of objects with a ``category`` attribute (or
    bare category strings). An empty sequence yields the bare scene prompt
    with no slots.
    """
    categories = [getattr(s, "category", s) for s in subjects]
    if categories:
        text = f"{scene_prompt}, including {', '.join(categories)}."
    else:
        text = scene_prompt
    ids = vocab.encode(text)
    if len(ids) > max_len:
        raise ValueError(f"extended prompt has {len(ids)} tokens, max is {max_len}")
    slots = []
    if categories:
        base = len(vocab.encode(scene_prompt)) + 2  # skip "," and "including"
        tokens = vocab.tokenize(text)
        for i, cat in enumerate(categories):
            pos = base + 2 * i  # categories separated by commas
            assert tokens[pos] == cat
            slots.append((i, pos))
    return ExtendedPrompt(text=text, token_ids=tuple(ids), subject_slots=tuple(slots))


class TextEncoder(nn.Module):
    """Token embeddings -> 2-layer causal transformer -> [max_len, d] rows."""

    def __init__(self, vocab_size: int, d: int = 128, max_len: int = 32, num_heads: int = 4, num_layers: int = 2):
        super().__init__()
        self.d = d
        self.max_len = max_len
        self.tok_emb = nn.Embedding(vocab_size, d)
        self.pos_emb = nn.Parameter(torch.zeros(max_len, d))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.layers = nn.ModuleList(
            [
                nn.ModuleDict(
                    {
                        "norm1": nn.LayerNorm(d),
                        "attn": MultiHeadAttention(d, num_heads),
                        "norm2": nn.LayerNorm(d),
                        "ff": FeedForward(d),
                    }
                )
                for _ in range(num_layers)
            ]
        )
        self.norm_out = nn.LayerNorm(d)

    def forward(self, token_ids) -> torch.Tensor:
        """Encode one prompt; returns [max_len, d]. Pad rows are the raw pad
        embedding, so they are identical for every prompt."""
        n = len(token_ids)
        if n > self.max_len:
            raise ValueError(f"prompt length {n} exceeds max_len {self.max_len}")
        device = self.pos_emb.device
        out = self.tok_emb(torch.zeros(self.max_len, dtype=torch.long, device=device))
        if n == 0:
            return out
        ids = torch.as_tensor(token_ids, dtype=torch.long, device=device)
        x = (self.tok_emb(ids) + self.pos_emb[:n])[None]
        mask = torch.full((n, n), float("-inf"), device=device).triu(1)
        for layer in self.layers:
            x = x + layer["attn"](layer["norm1"](x), attn_mask=mask)
            x = x + layer["ff"](layer["norm2"](x))
        out = torch.cat([self.norm_out(x[0]), out[n:]], dim=0)
        return out


def encode_text(prompt: ExtendedPrompt, encoder: TextEncoder) -> torch.Tensor:
    return encoder(prompt.token_ids)
