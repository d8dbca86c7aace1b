"""A two-block backbone with hand-enumerable weights, for tests.

Everything about it is fixed arithmetic on arange ramps, so a test can
recompute any hidden state in numpy doubles without touching torch.
Token ids are 1-based positions in VOCAB; id 0 is right padding.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

VOCAB = "abcdefgh"
DIM = 4
IMAGE_SCALE = 0.75  # image patches reuse the token table, scaled down


def embedding_table() -> np.ndarray:
    table = ((np.arange(9 * DIM).reshape(9, DIM) % 7) - 3) / 4.0
    table[0] = 0.0
    return table


def block0_weight() -> np.ndarray:
    return ((np.arange(DIM * DIM).reshape(DIM, DIM) % 5) - 2) / 3.0


def block1_weight() -> np.ndarray:
    return ((np.arange(DIM * DIM).reshape(DIM, DIM) % 4) - 1.5) / 2.0


def block1_bias() -> np.ndarray:
    return np.linspace(-0.5, 0.5, DIM)


def tokenize(text: str) -> list[int]:
    ids = [VOCAB.index(ch) + 1 for ch in text if ch in VOCAB]
    if not ids:
        raise ValueError(f"no usable characters in {text!r}")
    return ids


def pad_ids(all_ids: list[list[int]]) -> np.ndarray:
    width = max(len(ids) for ids in all_ids)
    out = np.zeros((len(all_ids), width), dtype=np.int64)
    for i, ids in enumerate(all_ids):
        out[i, :len(ids)] = ids
    return out


class TupleBlock(nn.Module):
    """Returns (hidden, aux) the way transformer blocks often do."""

    def __init__(self, linear: nn.Linear):
        super().__init__()
        self.inner = linear

    def forward(self, x):
        return self.inner(x), x.shape


class ToyBackbone(nn.Module):
    def __init__(self):
        super().__init__()
        self.embed = nn.Embedding(len(VOCAB) + 1, DIM, padding_idx=0)
        lin0 = nn.Linear(DIM, DIM, bias=False)
        lin1 = nn.Linear(DIM, DIM, bias=True)
        with torch.no_grad():
            self.embed.weight.copy_(torch.from_numpy(embedding_table()).float())
            lin0.weight.copy_(torch.from_numpy(block0_weight()).float())
            lin1.weight.copy_(torch.from_numpy(block1_weight()).float())
            lin1.bias.copy_(torch.from_numpy(block1_bias()).float())
        self.blocks = nn.ModuleList([lin0, TupleBlock(lin1)])

    def text_batch(self, texts):
        ids = torch.from_numpy(pad_ids([tokenize(t) for t in texts]))
        return self.embed(ids), ids != 0

    def image_batch(self, paths):
        ids = torch.from_numpy(pad_ids([tokenize(Path(p).stem) for p in paths]))
        return self.embed(ids) * IMAGE_SCALE, ids != 0

    def run(self, embeds, mask):
        hidden = embeds
        for block in self.blocks:
            out = block(hidden)
            hidden = out[0] if isinstance(out, tuple) else out
        return hidden
