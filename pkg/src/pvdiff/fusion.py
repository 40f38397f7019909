"""Modality fusion: plain concatenation or AdaLN conditioning.

Three strategies build the policy's input sequence from image tokens,
point tokens, and the language token:

  concat       main = image ++ points ++ language, no condition
  cond_on_pc   main = image ++ language, condition distilled from points
  cond_on_rgb  main = points ++ language, condition distilled from images

adaln() is the conditioning primitive itself: per-token normalization whose
gain and shift are functions of the condition vector, with zero-initialized
heads so it starts out as a plain layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module
from .vision import ConditionExtractor


class FusionStrategy(Enum):
    CONCAT = "concat"
    COND_ON_PC = "cond_on_pc"
    COND_ON_RGB = "cond_on_rgb"


@dataclass
class FusedObservation:
    main_tokens: Tensor          # (B, T, d)
    condition: Tensor | None     # (B, d) for the AdaLN strategies
    strategy: FusionStrategy


class AdaLNHead(Module):
    """Condition -> (delta gain, shift); zero-init keeps adaln == layer_norm
    at initialization."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.head = Linear(dim, 2 * dim, rng, zero_init=True)
        self.dim = dim


def adaln(z: Tensor, c: Tensor, params: AdaLNHead, eps: float = 1e-5) -> Tensor:
    """Normalize each token of z over its width, then scale by
    (1 + dgamma(c)) and shift by dbeta(c).

    z: (B, T, d) or (T, d); c: (B, d) or (d,).
    """
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z))
    if not isinstance(c, Tensor):
        c = Tensor(np.asarray(c))
    if not np.isfinite(c.data).all():
        raise ValueError("condition vector contains non-finite values")
    d = params.dim
    if z.shape[-1] != d or c.shape[-1] != d:
        raise ad.ShapeError(
            f"adaln width mismatch: z {z.shape}, c {c.shape}, params {d}"
        )
    unbatched = z.ndim == 2
    if unbatched:
        z = ad.reshape(z, (1,) + z.shape)
        c = ad.reshape(c, (1, d))
    unit = Tensor(np.ones(d))
    zero = Tensor(np.zeros(d))
    normed = ad.layer_norm(z, unit, zero, eps=eps)
    gb = params.head(c)  # (B, 2d)
    dgamma = ad.reshape(ad.narrow(gb, 1, 0, d), (gb.shape[0], 1, d))
    dbeta = ad.reshape(ad.narrow(gb, 1, d, d), (gb.shape[0], 1, d))
    out = ad.add(ad.mul(normed, ad.add(dgamma, 1.0)), dbeta)
    if unbatched:
        out = ad.reshape(out, out.shape[1:])
    return out


def modulate(normed: Tensor, dgamma: Tensor, dbeta: Tensor) -> Tensor:
    """(1 + dgamma) * normed + dbeta with (B, d) modulation over (B, T, d)."""
    b, d = dgamma.shape
    g = ad.reshape(dgamma, (b, 1, d))
    s = ad.reshape(dbeta, (b, 1, d))
    return ad.add(ad.mul(normed, ad.add(g, 1.0)), s)


def fuse(
    z_img: Tensor | None,
    z_pc: Tensor | None,
    z_lang: Tensor,
    strategy: FusionStrategy,
    cond_extractor: ConditionExtractor | None = None,
) -> FusedObservation:
    """Assemble the policy input sequence for one fusion strategy.

    All inputs are already projected to the common width d: z_img is
    (B, V*(g*g+1), d) with the views concatenated, z_pc is (B, M, d), and
    z_lang is (B, d). A modality may be None only where the strategy does
    not consume it (or, under concat, to drop it entirely).
    """
    lang_tok = ad.reshape(z_lang, (z_lang.shape[0], 1, z_lang.shape[1]))
    if strategy == FusionStrategy.CONCAT:
        parts = [t for t in (z_img, z_pc) if t is not None]
        return FusedObservation(
            main_tokens=ad.concat(parts + [lang_tok], axis=1),
            condition=None,
            strategy=strategy,
        )
    if cond_extractor is None:
        raise ValueError(f"{strategy.value} needs a condition extractor")
    if strategy == FusionStrategy.COND_ON_PC:
        if z_img is None or z_pc is None:
            raise ValueError("cond_on_pc needs both image and point tokens")
        main = ad.concat([z_img, lang_tok], axis=1)
        cond = cond_extractor(z_pc)
    elif strategy == FusionStrategy.COND_ON_RGB:
        if z_img is None or z_pc is None:
            raise ValueError("cond_on_rgb needs both image and point tokens")
        main = ad.concat([z_pc, lang_tok], axis=1)
        cond = cond_extractor(z_img)
    else:
        raise ValueError(f"unknown fusion strategy {strategy!r}")
    return FusedObservation(main_tokens=main, condition=cond, strategy=strategy)
