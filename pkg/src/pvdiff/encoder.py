"""Observation encoding pipeline.

prepare() does the parameter-free work once per observation (FPS + KNN
grouping, patch extraction, frozen language lookup) so training steps only
re-run the learnable parts. encode() produces the fused token sequence and
optional condition vector for the configured strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import Observation
from .fusion import FusedObservation, FusionStrategy, fuse
from .nn import Linear, Module
from .pointcloud import GroupEncoder, fps, knn_group
from .vision import (ConditionExtractor, LanguageTable, PatchGridEncoder,
                     image_to_patches, image_tokens)


@dataclass
class PreparedInputs:
    groups: np.ndarray    # (B, M, K, 3) float32, center-relative
    centers: np.ndarray   # (B, M, 3) float32
    patches: np.ndarray   # (B, V, P, patch_dim) float32
    lang: np.ndarray      # (B, d_L) float32

    def take(self, idx) -> "PreparedInputs":
        return PreparedInputs(self.groups[idx], self.centers[idx],
                              self.patches[idx], self.lang[idx])

    def __len__(self) -> int:
        return len(self.lang)


class ObservationEncoder(Module):
    def __init__(self, *, vocab_size: int, lang_dim: int, lang_seed: int,
                 dim: int, points_m: int, points_k: int, points_hidden: int,
                 granularity: int, feat_dim: int, views: int, image_size: int,
                 channels: int, strategy: FusionStrategy, cond_mode: str,
                 cond_layers: int, heads: int, use_image: bool,
                 use_points: bool, rng: np.random.Generator):
        self.strategy = strategy
        self.use_image = use_image
        self.use_points = use_points
        self.points_m = points_m
        self.points_k = points_k
        self.granularity = granularity
        self.views = views
        self.image_size = image_size
        self.channels = channels

        self.lang_table = LanguageTable(vocab_size, lang_dim, seed=lang_seed)
        self.lang_proj = Linear(lang_dim, dim, rng)
        if use_points:
            self.group_encoder = GroupEncoder(points_hidden, dim, rng)
            self.center_proj = Linear(3, dim, rng)
        if use_image:
            patch = image_size // granularity
            self.patch_encoder = PatchGridEncoder(
                channels * patch * patch, feat_dim, lang_dim, rng
            )
            self.token_proj = Linear(feat_dim, dim, rng)
            n_tokens = granularity * granularity + 1
            self.image_pos = Tensor(
                rng.normal(0.0, 0.02, size=(1, n_tokens, dim)), requires_grad=True
            )
        if strategy != FusionStrategy.CONCAT:
            self.cond_extractor = ConditionExtractor(
                cond_mode, dim, heads, 2 * dim, cond_layers, rng
            )
        else:
            self.cond_extractor = None

    def prepare(self, observations: list[Observation]) -> PreparedInputs:
        """Parameter-free preprocessing of raw observations."""
        groups_l, centers_l, patches_l, lang_l = [], [], [], []
        for obs in observations:
            if self.use_points:
                idx = fps(obs.points, self.points_m)
                grouped = knn_group(obs.points, idx, self.points_k)
                groups_l.append(grouped.groups.astype(np.float32))
                centers_l.append(grouped.centers.astype(np.float32))
            pixels = np.asarray(obs.image, dtype=np.float32)
            per_view = pixels.reshape(self.views, self.channels,
                                      self.image_size, self.image_size)
            patches_l.append(image_to_patches(per_view, self.granularity))
            lang_l.append(self.lang_table.embed(obs.instruction_id).astype(np.float32))
        b = len(observations)
        if self.use_points:
            groups = np.stack(groups_l)
            centers = np.stack(centers_l)
        else:
            groups = np.zeros((b, 0, 0, 3), dtype=np.float32)
            centers = np.zeros((b, 0, 3), dtype=np.float32)
        return PreparedInputs(
            groups=groups,
            centers=centers,
            patches=np.stack(patches_l),
            lang=np.stack(lang_l),
        )

    def encode(self, prep: PreparedInputs) -> FusedObservation:
        b = len(prep)
        lang_vec = self.lang_proj(Tensor(prep.lang))
        z_img = None
        if self.use_image:
            _, v, p, pd = prep.patches.shape
            flat = prep.patches.reshape(b * v, p, pd)
            lang_rep = np.repeat(prep.lang, v, axis=0)
            grid = self.patch_encoder(Tensor(flat), Tensor(lang_rep))
            toks = image_tokens(grid, self.token_proj)      # (B*V, P+1, d)
            toks = ad.add(toks, self.image_pos)
            d = toks.shape[-1]
            z_img = ad.reshape(toks, (b, v * (p + 1), d))
        z_pc = None
        if self.use_points:
            tokens = self.group_encoder(prep.groups)
            z_pc = ad.add(tokens, self.center_proj(Tensor(prep.centers)))
        return fuse(z_img, z_pc, lang_vec, self.strategy, self.cond_extractor)
