"""Model assembly, training loop, and evaluation."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, GradientTape, Tensor, zero_grads
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import read_dataset
from .encoder import ObservationEncoder
from .env import VOCABULARY, EnvParams, Episode, TaskVariant, expert_chunk, rollout
from .fusion import FusionStrategy
from .nn import Module
from .policy import ActionNormalizer, Denoiser, EDMConfig, ddim_sample, score_matching_loss


class DataError(ValueError):
    """Missing or inconsistent training data."""


class NumericError(RuntimeError):
    """Training diverged (non-finite loss)."""


def env_params(cfg: RunConfig) -> EnvParams:
    return EnvParams(
        image_size=cfg["env.image_size"],
        views=cfg["env.views"],
        cluster_count=cfg["env.cluster_points"],
        horizon=cfg["model.horizon"],
        step_cap=cfg["eval.step_cap"],
    )


def edm_from_config(cfg: RunConfig, sigma_data: float | None = None) -> EDMConfig:
    sd = sigma_data if sigma_data is not None else cfg["edm.sigma_data"]
    if sd <= 0.0:
        sd = 0.5  # placeholder until the normalizer is fitted
    return EDMConfig(
        sigma_min=cfg["edm.sigma_min"],
        sigma_max=cfg["edm.sigma_max"],
        sigma_data=sd,
        rho=cfg["edm.rho"],
        n_sample_steps=cfg["edm.steps"],
        p_mean=cfg["edm.p_mean"],
        p_std=cfg["edm.p_std"],
    )


class PolicyModel(Module):
    """Encoder + denoiser + the frozen normalization constants that ride
    along in checkpoints."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        strategy = FusionStrategy(cfg["fusion.strategy"])
        self.encoder = ObservationEncoder(
            vocab_size=len(VOCABULARY),
            lang_dim=cfg["vision.lang_dim"],
            lang_seed=cfg["vision.lang_seed"],
            dim=cfg["model.dim"],
            points_m=cfg["points.m"],
            points_k=cfg["points.k"],
            points_hidden=cfg["points.hidden"],
            granularity=cfg["vision.granularity"],
            feat_dim=cfg["vision.feat_dim"],
            views=cfg["env.views"],
            image_size=cfg["env.image_size"],
            channels=3,
            strategy=strategy,
            cond_mode=cfg["fusion.cond_mode"],
            cond_layers=cfg["vision.cond_layers"],
            heads=cfg["model.heads"],
            use_image=cfg["modality.use_image"],
            use_points=cfg["modality.use_points"],
            rng=rng,
        )
        self.denoiser = Denoiser(
            horizon=cfg["model.horizon"],
            action_dim=cfg["model.action_dim"],
            dim=cfg["model.dim"],
            heads=cfg["model.heads"],
            ffn_dim=cfg["model.ffn_dim"],
            n_blocks=cfg["model.blocks"],
            noise_freq_dim=cfg["model.noise_freq_dim"],
            edm=edm_from_config(cfg),
            rng=rng,
        )
        a = cfg["model.action_dim"]
        self.norm_mean = Tensor(np.zeros(a), requires_grad=False)
        self.norm_std = Tensor(np.ones(a), requires_grad=False)
        self.sigma_data = Tensor(np.array([self.denoiser.edm.sigma_data]),
                                 requires_grad=False)

    def set_normalizer(self, normalizer: ActionNormalizer, sigma_data: float) -> None:
        self.norm_mean.data = normalizer.mean.astype(self.norm_mean.data.dtype)
        self.norm_std.data = normalizer.std.astype(self.norm_std.data.dtype)
        self.sigma_data.data = np.array([sigma_data], dtype=self.sigma_data.data.dtype)
        self.sync_edm()

    def normalizer(self) -> ActionNormalizer:
        return ActionNormalizer(self.norm_mean.data, self.norm_std.data)

    def sync_edm(self) -> None:
        self.denoiser.edm = dataclasses.replace(
            self.denoiser.edm, sigma_data=float(self.sigma_data.data[0])
        )

    def load(self, path) -> None:
        self.load_state_arrays(load_checkpoint(path))
        self.sync_edm()

    def save(self, path) -> None:
        save_checkpoint(path, self.state_arrays())


def build_model(cfg: RunConfig, seed: int | None = None) -> PolicyModel:
    seed = cfg["seed"] if seed is None else seed
    return PolicyModel(cfg, np.random.default_rng([seed, 100]))


def dataset_path(cfg: RunConfig, variant: str | None = None) -> Path:
    name = variant or cfg["env.variant"]
    return Path(cfg["data.dir"]) / f"{name}.fpvd"


def flatten_episodes(episodes: list[Episode], horizon: int, action_dim: int):
    observations = []
    chunk_list = []
    for ep in episodes:
        if len(ep.observations) == 0:
            continue
        if ep.chunks.shape[1:] != (horizon, action_dim):
            raise DataError(
                f"dataset chunks are {ep.chunks.shape[1:]}, model expects "
                f"{(horizon, action_dim)}"
            )
        observations.extend(ep.observations)
        chunk_list.append(ep.chunks)
    if not observations:
        raise DataError("dataset contains no usable steps")
    return observations, np.concatenate(chunk_list, axis=0)


def train_run(cfg: RunConfig, out_dir, init_checkpoint=None) -> dict:
    """Train the configured strategy; writes checkpoint, loss CSV, snapshot.

    init_checkpoint warm-starts the parameters (and keeps that checkpoint's
    normalization constants) so an interrupted run can resume.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = dataset_path(cfg)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    episodes = read_dataset(path)
    observations, chunks = flatten_episodes(
        episodes, cfg["model.horizon"], cfg["model.action_dim"]
    )

    model = build_model(cfg)
    if init_checkpoint is not None:
        model.load(init_checkpoint)
        normalizer = model.normalizer()
    else:
        normalizer = ActionNormalizer.fit(chunks)
        sigma_data = cfg["edm.sigma_data"]
        if sigma_data <= 0.0:
            sigma_data = normalizer.data_sigma(chunks)
        model.set_normalizer(normalizer, sigma_data)
    norm_chunks = normalizer.encode(chunks)

    prepared = model.encoder.prepare(observations)
    params = model.parameters()
    opt = AdamW(
        params,
        lr=cfg["optim.lr"],
        beta1=cfg["optim.beta1"],
        beta2=cfg["optim.beta2"],
        eps=cfg["optim.eps"],
        weight_decay=cfg["optim.weight_decay"],
    )
    batch = min(cfg["train.batch"], len(prepared))
    order_rng = np.random.default_rng([cfg["seed"], 1])
    loss_rng = np.random.default_rng([cfg["seed"], 2])

    rows = []
    step = 0
    for _ in range(cfg["train.epochs"]):
        perm = order_rng.permutation(len(prepared))
        for lo in range(0, len(perm) - batch + 1, batch):
            idx = perm[lo : lo + batch]
            with GradientTape() as tape:
                fused = model.encoder.encode(prepared.take(idx))
                loss = score_matching_loss(
                    fused, norm_chunks[idx], model.denoiser,
                    model.denoiser.edm, loss_rng,
                )
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss at step {step}")
                tape.backward(loss, params)
            opt.step()
            zero_grads(params)
            rows.append((step, value))
            step += 1

    ckpt = out / "checkpoint.fpvw"
    model.save(ckpt)
    with open(out / "loss.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for s, v in rows:
            fh.write(f"{s},{v}\n")
    cfg.write_snapshot(out / "config.snapshot")
    return {
        "checkpoint": str(ckpt),
        "steps": step,
        "first_loss": rows[0][1] if rows else None,
        "final_loss": rows[-1][1] if rows else None,
    }


def make_policy_fn(model: PolicyModel, cfg: RunConfig):
    """Wrap the trained model as a rollout policy: encode the observation,
    sample a chunk with the deterministic solver, undo normalization."""
    normalizer = model.normalizer()
    horizon = cfg["model.horizon"]

    def policy(obs, rng, scene):
        prep = model.encoder.prepare([obs])
        fused = model.encoder.encode(prep)
        sample = ddim_sample(fused, model.denoiser, model.denoiser.edm, rng)
        return normalizer.decode(sample[0])

    return policy


def expert_policy_fn(cfg: RunConfig):
    horizon = cfg["model.horizon"]

    def policy(obs, rng, scene):
        return expert_chunk(scene, horizon)

    return policy


def eval_run(cfg: RunConfig, checkpoint, out_dir) -> dict:
    """Roll out the policy and write a deterministic metrics JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg["eval.expert"]:
        policy = expert_policy_fn(cfg)
    else:
        model = build_model(cfg)
        model.load(checkpoint)
        policy = make_policy_fn(model, cfg)
    variant = TaskVariant(cfg["env.variant"])
    rate, logs = rollout(
        policy, variant, cfg["eval.episodes"], cfg["seed"], env_params(cfg)
    )
    metrics = {
        "variant": variant.value,
        "n_episodes": cfg["eval.episodes"],
        "success_rate": rate,
        "seed": cfg["seed"],
        "mean_steps": float(np.mean([log.steps for log in logs])),
    }
    (out / "metrics.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    cfg.write_snapshot(out / "config.snapshot")
    return metrics
