"""Prompt embeddings, the convolutional image encoder and the query-transformer extractors."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .networks import Attention, FeedForward, group_norm

STRUCTURE_PROMPT = "structure"
BLUR_PROMPT = "blur"
SHARP_PROMPT = "sharp and clean image"
BLURRY_PROMPT = "blurry image"
NULL_PROMPT = ""
VOCABULARY = (STRUCTURE_PROMPT, BLUR_PROMPT, SHARP_PROMPT, BLURRY_PROMPT, NULL_PROMPT)
N_QUERIES = 16

_WORDS = ("<null>", "structure", "blur", "sharp", "and", "clean", "image", "blurry")


class PromptTable(nn.Module):
    """Closed-vocabulary text embedding: one learned token per word plus a position table."""

    def __init__(self, d: int, max_len: int = 4):
        super().__init__()
        self.words = nn.Embedding(len(_WORDS), d)
        self.position = nn.Parameter(torch.randn(max_len, d) * 0.02)

    @staticmethod
    def token_ids(prompt: str) -> list[int]:
        if prompt not in VOCABULARY:
            raise ConfigurationError(f"prompt {prompt!r} is not in the vocabulary")
        if prompt == NULL_PROMPT:
            return [0]
        return [_WORDS.index(w) for w in prompt.split()]

    def embed_prompt(self, prompt: str) -> torch.Tensor:
        ids = torch.tensor(self.token_ids(prompt))
        return self.words(ids) + self.position[: len(ids)]

    def batch(self, prompts) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed a list of prompts into padded tokens (B, L, d) and a key mask (B, L).

        An entry may be a tuple of prompts, whose token sequences are concatenated.
        """
        seqs = []
        for p in prompts:
            parts = (p,) if isinstance(p, str) else tuple(p)
            seqs.append(torch.cat([self.embed_prompt(q) for q in parts]))
        n = max(len(s) for s in seqs)
        d = seqs[0].shape[-1]
        tokens = seqs[0].new_zeros(len(seqs), n, d)
        mask = torch.zeros(len(seqs), n, dtype=torch.bool)
        for i, s in enumerate(seqs):
            tokens[i, : len(s)] = s
            mask[i, : len(s)] = True
        return tokens, mask


class ImageEncoder(nn.Module):
    """Three stride-2 conv stages to an 8 x 8 grid of d-wide patch tokens.

    Two coordinate channels are appended to the input so the convolutional
    features carry absolute position; no positional encoding is added to the
    tokens themselves.
    """

    def __init__(self, d: int, channels=(32, 64, 128), image_size: int = 64):
        super().__init__()
        self.image_size = image_size
        layers, prev = [], 5
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), group_norm(ch), nn.SiLU(),
                       nn.Conv2d(ch, ch, 3, padding=1), group_norm(ch), nn.SiLU()]
            prev = ch
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(prev, d, 1)
        self.norm = nn.LayerNorm(d)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        b, c, h, w = img.shape
        if c != 3 or h != self.image_size or w != self.image_size:
            raise ValueError(f"expected (B, 3, {self.image_size}, {self.image_size}) image, got {tuple(img.shape)}")
        ys = torch.linspace(-1, 1, h, dtype=img.dtype)
        xs = torch.linspace(-1, 1, w, dtype=img.dtype)
        grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij")).expand(b, 2, h, w)
        feats = self.proj(self.body(torch.cat([img, grid], dim=1)))
        return self.norm(feats.flatten(2).transpose(1, 2))


class QFormerBlock(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1, self.ln2, self.ln_img, self.ln3 = (nn.LayerNorm(d) for _ in range(4))
        self.self_attn = Attention(d, heads)
        self.cross_attn = Attention(d, heads, out_bias=False)
        self.ff = FeedForward(d)

    def forward(self, x, n_q: int, image_tokens):
        x = x + self.self_attn(self.ln1(x))
        if image_tokens is not None:
            q = x[:, :n_q]
            q = q + self.cross_attn(self.ln2(q), self.ln_img(image_tokens))
            x = torch.cat([q, x[:, n_q:]], dim=1)
        return x + self.ff(self.ln3(x))


class QFormer(nn.Module):
    """Learnable queries self-attend together with prompt tokens and cross-attend to image tokens."""

    def __init__(self, d: int, n_queries: int = N_QUERIES, layers: int = 2, heads: int = 4):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(n_queries, d) * 0.02)
        self.blocks = nn.ModuleList(QFormerBlock(d, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, image_tokens: torch.Tensor | None, prompt_tokens: torch.Tensor, batch: int | None = None):
        b = image_tokens.shape[0] if image_tokens is not None else batch
        n_q = self.queries.shape[0]
        if prompt_tokens.ndim == 2:
            prompt_tokens = prompt_tokens.expand(b, -1, -1)
        x = torch.cat([self.queries.expand(b, -1, -1), prompt_tokens], dim=1)
        for blk in self.blocks:
            x = blk(x, n_q, image_tokens)
        return self.norm(x[:, :n_q])


def qformer_extract(image_tokens, prompt_tokens, qformer: QFormer) -> torch.Tensor:
    return qformer(image_tokens, prompt_tokens)


class Extractor(nn.Module):
    """Image encoder + Q-Former pair; ``prompt`` selects structure or blur extraction."""

    def __init__(self, d: int, prompt: str, encoder_channels=(32, 64, 128), image_size: int = 64,
                 layers: int = 2, heads: int = 4):
        super().__init__()
        if prompt not in (STRUCTURE_PROMPT, BLUR_PROMPT):
            raise ConfigurationError(f"extractor prompt must be 'structure' or 'blur', got {prompt!r}")
        self.prompt = prompt
        self.encoder = ImageEncoder(d, encoder_channels, image_size)
        self.qformer = QFormer(d, N_QUERIES, layers, heads)

    def forward(self, img: torch.Tensor, prompts: PromptTable) -> torch.Tensor:
        return self.qformer(self.encoder(img), prompts.embed_prompt(self.prompt))

    def with_image_tokens(self, img: torch.Tensor, prompts: PromptTable) -> tuple[torch.Tensor, torch.Tensor]:
        """(image tokens, query tokens) from one encoder pass."""
        tokens = self.encoder(img)
        return tokens, self.qformer(tokens, prompts.embed_prompt(self.prompt))
