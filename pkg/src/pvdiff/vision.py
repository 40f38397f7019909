"""Language embeddings, FiLM-conditioned image features, and image tokens.

Images are split into a g x g grid of patches; a shared patch MLP plus two
FiLM-modulated residual blocks produce a feature grid, which turns into one
global token (average pool) and g*g local tokens, all projected to the
common model width. A condition extractor distills a token set into a
single vector, either through a small transformer with a learnable CLS
token or through elementwise max pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Embedding, Linear, Module, TransformerBlock

GRANULARITIES = (1, 4, 8)


@dataclass
class Image:
    pixels: np.ndarray  # (C, H, W) floats in [0, 1]
    view_id: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise ad.ShapeError(f"image must be (C, H, W), got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("image pixels must lie in [0, 1]")


class LanguageTable(Module):
    """Frozen seed-initialized instruction embeddings.

    The table never trains, so identical ids always produce identical
    vectors for the lifetime of a run and across checkpoint round trips.
    """

    def __init__(self, vocab_size: int, dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.table = Tensor(rng.normal(0.0, 1.0, size=(vocab_size, dim)),
                            requires_grad=False)
        self.vocab_size = vocab_size
        self.dim = dim

    def embed(self, instruction_id: int) -> np.ndarray:
        ids = np.asarray(instruction_id)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise KeyError(f"instruction id out of range: {instruction_id}")
        return self.table.data[ids]


def load_vocabulary(path) -> list[str]:
    """One instruction per line; the line number is the instruction id."""
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.rstrip("\n")]


def write_vocabulary(path, vocabulary: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in vocabulary:
            fh.write(entry + "\n")


class FilmHead(Module):
    """Maps a language vector to per-channel (delta gain, shift), zero-init
    so modulation starts as the identity."""

    def __init__(self, lang_dim: int, feat_dim: int, rng: np.random.Generator):
        self.head = Linear(lang_dim, 2 * feat_dim, rng, zero_init=True)
        self.feat_dim = feat_dim


def film_modulate(grid: Tensor, lang: Tensor, film: FilmHead) -> Tensor:
    """Scale features by (1 + dgamma(lang)) and shift by dbeta(lang).

    grid: (B, P, d_f) feature cells; lang: (B, d_L). The same modulation
    applies at every spatial position.
    """
    d_f = film.feat_dim
    if grid.shape[-1] != d_f:
        raise ad.ShapeError(f"grid width {grid.shape[-1]} != film width {d_f}")
    gb = film.head(lang)  # (B, 2*d_f)
    dgamma = ad.reshape(ad.narrow(gb, 1, 0, d_f), (gb.shape[0], 1, d_f))
    dbeta = ad.reshape(ad.narrow(gb, 1, d_f, d_f), (gb.shape[0], 1, d_f))
    return ad.add(ad.mul(grid, ad.add(dgamma, 1.0)), dbeta)


def image_to_patches(pixels: np.ndarray, g: int) -> np.ndarray:
    """(..., C, H, W) -> (..., g*g, C*ph*pw) row-major patch vectors."""
    *lead, c, h, w = pixels.shape
    if h % g or w % g:
        raise ad.ShapeError(f"image {h}x{w} not divisible into a {g}x{g} grid")
    ph, pw = h // g, w // g
    x = pixels.reshape(*lead, c, g, ph, g, pw)
    order = tuple(range(len(lead))) + tuple(
        len(lead) + ax for ax in (1, 3, 0, 2, 4)
    )
    x = x.transpose(order)  # (..., g, g, C, ph, pw)
    return np.ascontiguousarray(x).reshape(*lead, g * g, c * ph * pw)


class PatchGridEncoder(Module):
    """Patch embedding plus two FiLM-modulated residual MLP blocks."""

    def __init__(self, patch_dim: int, feat_dim: int, lang_dim: int,
                 rng: np.random.Generator):
        self.embed = Linear(patch_dim, feat_dim, rng)
        self.block1_in = Linear(feat_dim, feat_dim, rng)
        self.block1_out = Linear(feat_dim, feat_dim, rng)
        self.film1 = FilmHead(lang_dim, feat_dim, rng)
        self.block2_in = Linear(feat_dim, feat_dim, rng)
        self.block2_out = Linear(feat_dim, feat_dim, rng)
        self.film2 = FilmHead(lang_dim, feat_dim, rng)

    def __call__(self, patches: Tensor, lang: Tensor) -> Tensor:
        h = self.embed(patches)
        u = ad.gelu(film_modulate(self.block1_in(h), lang, self.film1))
        h = ad.add(h, self.block1_out(u))
        u = ad.gelu(film_modulate(self.block2_in(h), lang, self.film2))
        h = ad.add(h, self.block2_out(u))
        return h


def extract_feature_grid(image, lang, encoder: PatchGridEncoder, g: int) -> Tensor:
    """One image (C, H, W) plus one language vector -> (g*g, d_f) grid."""
    pixels = image.pixels if isinstance(image, Image) else np.asarray(image)
    patches = Tensor(image_to_patches(pixels, g)[None])
    lang_t = lang if isinstance(lang, Tensor) else Tensor(np.asarray(lang)[None])
    grid = encoder(patches, lang_t)
    return ad.reshape(grid, (grid.shape[1], grid.shape[2]))


def image_tokens(grid: Tensor, proj: Linear) -> Tensor:
    """Global token (mean of all cells) followed by the row-major local
    tokens, all through one shared projection to the model width.

    grid: (B, P, d_f) or (P, d_f) -> (B, P+1, d) or (P+1, d).
    """
    unbatched = grid.ndim == 2
    if unbatched:
        grid = ad.reshape(grid, (1,) + grid.shape)
    pooled = ad.mean(grid, axis=1, keepdims=True)  # (B, 1, d_f)
    cells = ad.concat([pooled, grid], axis=1)
    tokens = proj(cells)
    if unbatched:
        tokens = ad.reshape(tokens, tokens.shape[1:])
    return tokens


class ConditionExtractor(Module):
    """Distills a token sequence into one conditioning vector.

    cls_transformer mode prepends a learnable CLS token and runs a small
    self-attention stack, returning the CLS output. max_pool mode takes the
    elementwise max over tokens and has no parameters.
    """

    MODES = ("cls_transformer", "max_pool")

    def __init__(self, mode: str, dim: int, heads: int, ffn_dim: int,
                 layers: int, rng: np.random.Generator):
        if mode not in self.MODES:
            raise ValueError(f"unknown condition mode {mode!r}")
        self.mode = mode
        if mode == "cls_transformer":
            self.cls = Tensor(rng.normal(0.0, 0.02, size=(1, 1, dim)), requires_grad=True)
            self.blocks = [TransformerBlock(dim, heads, ffn_dim, rng)
                           for _ in range(layers)]

    def __call__(self, tokens: Tensor) -> Tensor:
        """tokens: (B, S, d) -> (B, d)."""
        b, s, d = tokens.shape
        if s < 1:
            raise ValueError("condition extractor needs at least one token")
        if self.mode == "max_pool":
            return ad.max_reduce(tokens, axis=1)
        cls = ad.broadcast_to(self.cls, (b, 1, d))
        x = ad.concat([cls, tokens], axis=1)
        for block in self.blocks:
            x = block(x)
        return ad.reshape(ad.narrow(x, 1, 0, 1), (b, d))


def condition_vector(tokens, extractor: ConditionExtractor) -> Tensor:
    """Single conditioning vector from a (S, d) or (B, S, d) token set."""
    if not isinstance(tokens, Tensor):
        tokens = Tensor(np.asarray(tokens))
    unbatched = tokens.ndim == 2
    if unbatched:
        tokens = ad.reshape(tokens, (1,) + tokens.shape)
    out = extractor(tokens)
    if unbatched:
        out = ad.reshape(out, (out.shape[-1],))
    return out
