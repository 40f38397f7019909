"""Synthetic reach tasks with analytic experts.

A scene is a unit box holding two point clusters and an agent; the
instruction names which cluster to reach. Three variants control which
modality carries the target's identity:

  color_reach  clusters are geometrically congruent and differ only in
               image color, so the point cloud cannot tell them apart
  depth_reach  clusters share color and top-down footprint and differ only
               in vertical extent, so the image cannot tell them apart
  plain_reach  the target differs in both color and shape, so either
               modality suffices

Observations are (instruction id, top-down color image, XYZ point cloud).
Cluster geometry is quantized to a 2^-12 grid and cluster centers to the
pixel grid, which makes the congruence and pixel-identity guarantees exact
rather than approximate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

VOCABULARY = ["reach red", "reach blue", "reach tall", "reach short"]

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "green": (0.0, 1.0, 0.0),
}
AGENT_RGB = (1.0, 1.0, 1.0)

QUANT = 2.0**-12  # geometry grid; sums of quantized coords are exact in f32
CLUSTER_Z = 0.45
AGENT_Z = 0.45
SUCCESS_RADIUS = 0.05
V_MAX = 0.05
STEP_CAP = 60
# agent marker: a small fixed tetrahedron so the cloud shows where the agent is
AGENT_MARKER = 0.01 * np.array(
    [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1],
     [2, 0, 0], [-2, 0, 0], [0, 2, 0], [0, -2, 0]],
    dtype=np.float64,
)


class TaskVariant(Enum):
    COLOR = "color_reach"
    DEPTH = "depth_reach"
    PLAIN = "plain_reach"


VARIANT_CODES = {TaskVariant.COLOR: 0, TaskVariant.DEPTH: 1, TaskVariant.PLAIN: 2}
CODE_VARIANTS = {v: k for k, v in VARIANT_CODES.items()}


@dataclass
class Cluster:
    centroid: np.ndarray      # (3,)
    spread: float
    count: int
    color: str
    offsets: np.ndarray       # (count, 3) quantized, centroid-relative

    def points(self) -> np.ndarray:
        return self.centroid + self.offsets


@dataclass
class Scene:
    clusters: list[Cluster]
    target_index: int
    instruction_id: int
    agent_position: np.ndarray  # (3,)

    @property
    def target(self) -> Cluster:
        return self.clusters[self.target_index]


@dataclass
class Observation:
    instruction_id: int
    image: np.ndarray   # (C, H, W) float32 in [0, 1]; views stack along C
    points: np.ndarray  # (N, 3) float32


@dataclass
class Episode:
    variant: TaskVariant
    instruction_id: int
    observations: list[Observation]
    chunks: np.ndarray  # (S, H, A)


@dataclass
class EnvParams:
    image_size: int = 32
    views: int = 1
    cluster_count: int = 80
    horizon: int = 8
    success_radius: float = SUCCESS_RADIUS
    v_max: float = V_MAX
    step_cap: int = STEP_CAP


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(x, dtype=np.float64) / QUANT) * QUANT


def _template(rng: np.random.Generator, count: int) -> np.ndarray:
    """Unit-scale cluster shape, clipped so scaled offsets stay in the box."""
    return np.clip(rng.standard_normal((count, 3)), -2.0, 2.0)


def _place_centroids(rng: np.random.Generator, image_size: int,
                     min_sep: float, max_tries: int = 200) -> np.ndarray:
    """Two cluster centers on the pixel grid with a minimum separation."""
    px = 1.0 / image_size
    for _ in range(max_tries):
        xy = rng.uniform(0.15, 0.85, size=(2, 2))
        xy = np.round(xy / px) * px
        if np.linalg.norm(xy[0] - xy[1]) >= min_sep:
            out = np.empty((2, 3))
            out[:, :2] = xy
            out[:, 2] = CLUSTER_Z
            # centroid coordinates must sit on the geometry grid so that
            # centroid + offset sums are exact in float32
            return _quantize(out)
    raise RuntimeError("could not place separated clusters")


def generate_scene(variant: TaskVariant, rng: np.random.Generator,
                   params: EnvParams | None = None) -> Scene:
    """Sample a scene satisfying the variant's information barrier."""
    params = params or EnvParams()
    n = params.cluster_count
    spread = 0.05
    min_sep = max(4.0 * spread, 0.3)
    centroids = _place_centroids(rng, params.image_size, min_sep)

    if variant == TaskVariant.COLOR:
        # one shared template: the clusters are exact translates of each other
        off = _quantize(_template(rng, n) * spread)
        target = int(rng.integers(0, 2))
        colors = ["red", "blue"]
        clusters = [
            Cluster(centroids[i], spread, n, colors[i], off.copy())
            for i in range(2)
        ]
        instruction = VOCABULARY.index(f"reach {colors[target]}")
    elif variant == TaskVariant.DEPTH:
        # shared footprint, vertical extent differs; color is uninformative
        tpl = _template(rng, n)
        z_spreads = [0.12, 0.02]  # index 0 is the tall cluster
        clusters = []
        for i in range(2):
            off = tpl * spread
            off[:, 2] = tpl[:, 2] * z_spreads[i]
            clusters.append(
                Cluster(centroids[i], spread, n, "green", _quantize(off))
            )
        target = int(rng.integers(0, 2))
        instruction = VOCABULARY.index("reach tall" if target == 0 else "reach short")
    elif variant == TaskVariant.PLAIN:
        # target is big and red, distractor small and blue: either modality works
        off_t = _quantize(_template(rng, n) * 0.06)
        n_d = max(8, n // 3)
        off_d = _quantize(_template(rng, n_d) * 0.02)
        clusters = [
            Cluster(centroids[0], 0.06, n, "red", off_t),
            Cluster(centroids[1], 0.02, n_d, "blue", off_d),
        ]
        target = 0
        instruction = VOCABULARY.index("reach red")
    else:
        raise ValueError(f"unknown task variant {variant!r}")

    _check_separation(clusters)
    while True:
        agent_xy = rng.uniform(0.08, 0.92, size=2)
        if all(np.linalg.norm(agent_xy - c.centroid[:2]) >= 0.15 for c in clusters):
            break
    agent = np.array([agent_xy[0], agent_xy[1], AGENT_Z])
    return Scene(clusters=clusters, target_index=target,
                 instruction_id=instruction, agent_position=agent)


def _check_separation(clusters: list[Cluster]) -> None:
    for i in range(len(clusters)):
        for j in range(i + 1, len(clusters)):
            a, b = clusters[i], clusters[j]
            sep = float(np.linalg.norm(a.centroid - b.centroid))
            if sep < 4.0 * max(a.spread, b.spread):
                raise RuntimeError("cluster separation invariant violated")


def _splat(image: np.ndarray, us: np.ndarray, vs: np.ndarray, rgb) -> None:
    size = image.shape[-1]
    us = np.clip(us, 0, size - 1)
    vs = np.clip(vs, 0, size - 1)
    for ch, value in enumerate(rgb):
        if value > 0.0:
            np.maximum.at(image[ch], (vs, us), value)


def render_view(scene: Scene, size: int, axes: tuple[int, int],
                include_agent: bool = True) -> np.ndarray:
    """Orthographic splat of the scene onto an image plane.

    axes picks which world coordinates become (column, row); (0, 1) is the
    top-down view used by default.
    """
    image = np.zeros((3, size, size), dtype=np.float32)
    ax_u, ax_v = axes
    for cluster in scene.clusters:
        pts = cluster.points()
        us = np.floor(pts[:, ax_u] * size).astype(np.int64)
        vs = np.floor(pts[:, ax_v] * size).astype(np.int64)
        _splat(image, us, vs, COLOR_RGB[cluster.color])
    if include_agent:
        marker = scene.agent_position + AGENT_MARKER
        us = np.floor(marker[:, ax_u] * size).astype(np.int64)
        vs = np.floor(marker[:, ax_v] * size).astype(np.int64)
        _splat(image, us, vs, AGENT_RGB)
    return image


VIEW_AXES = [(0, 1), (0, 2)]  # top-down, then front


def render_observation(scene: Scene, params: EnvParams | None = None) -> Observation:
    """Point cloud plus stacked camera views for the current scene state."""
    params = params or EnvParams()
    views = [render_view(scene, params.image_size, VIEW_AXES[v])
             for v in range(params.views)]
    image = np.concatenate(views, axis=0)
    pieces = [c.points() for c in scene.clusters]
    pieces.append(scene.agent_position + AGENT_MARKER)
    points = np.concatenate(pieces, axis=0).astype(np.float32)
    return Observation(instruction_id=scene.instruction_id, image=image,
                       points=points)


def expert_chunk(scene: Scene, horizon: int, v_max: float = V_MAX) -> np.ndarray:
    """H equal steps straight toward the target, per-step norm capped."""
    disp = scene.target.centroid - scene.agent_position
    dist = float(np.linalg.norm(disp))
    if dist == 0.0:
        return np.zeros((horizon, 3))
    step = disp / dist * min(v_max, dist / horizon)
    return np.tile(step, (horizon, 1))


def step_agent(position: np.ndarray, action: np.ndarray,
               v_max: float = V_MAX) -> np.ndarray:
    """Apply one displacement, enforcing the speed limit and the box."""
    action = np.asarray(action, dtype=np.float64)
    norm = float(np.linalg.norm(action))
    if norm > v_max:
        action = action * (v_max / norm)
    return np.clip(position + action, 0.0, 1.0)


def expert_policy(obs: Observation, rng: np.random.Generator,
                  scene: Scene, horizon: int = 8) -> np.ndarray:
    """Oracle policy used for sanity checks and the eval bypass."""
    return expert_chunk(scene, horizon)


@dataclass
class EpisodeLog:
    success: bool
    steps: int
    final_distance: float


def run_episode(policy_fn, scene: Scene, params: EnvParams,
                noise_rng: np.random.Generator) -> EpisodeLog:
    """Observe, sample a chunk, execute all of it, repeat until the agent
    reaches the target or the step cap runs out."""
    scene = Scene(
        clusters=scene.clusters,
        target_index=scene.target_index,
        instruction_id=scene.instruction_id,
        agent_position=scene.agent_position.copy(),
    )
    target = scene.target.centroid
    steps = 0
    dist = float(np.linalg.norm(scene.agent_position - target))
    if dist <= params.success_radius:
        return EpisodeLog(True, 0, dist)
    while steps < params.step_cap:
        obs = render_observation(scene, params)
        chunk = np.asarray(policy_fn(obs, noise_rng, scene))
        for action in chunk:
            scene.agent_position = step_agent(scene.agent_position, action,
                                              params.v_max)
            steps += 1
            dist = float(np.linalg.norm(scene.agent_position - target))
            if dist <= params.success_radius:
                return EpisodeLog(True, steps, dist)
            if steps >= params.step_cap:
                break
    return EpisodeLog(False, steps, dist)


def rollout(policy_fn, variant: TaskVariant, n_episodes: int, seed: int,
            params: EnvParams | None = None) -> tuple[float, list[EpisodeLog]]:
    """Evaluate a policy over fresh seeded scenes.

    Scene generation draws only on (seed, episode index), so different
    policies or configurations evaluated at the same seed see identical
    scene sequences; the policy's sampling noise uses a separate stream.
    """
    params = params or EnvParams()
    logs = []
    for ep in range(n_episodes):
        scene = generate_scene(variant, np.random.default_rng([seed, ep, 0]), params)
        noise_rng = np.random.default_rng([seed, ep, 1])
        logs.append(run_episode(policy_fn, scene, params, noise_rng))
    rate = sum(log.success for log in logs) / max(1, n_episodes)
    return rate, logs


def generate_demos(variant: TaskVariant, n_episodes: int, seed: int,
                   params: EnvParams | None = None) -> list[Episode]:
    """Expert demonstrations: a chunk is recorded at every step, then the
    first action of the chunk is executed."""
    params = params or EnvParams()
    episodes = []
    for ep in range(n_episodes):
        scene = generate_scene(variant, np.random.default_rng([seed, ep, 0]), params)
        scene.agent_position = scene.agent_position.copy()
        target = scene.target.centroid
        obs_list: list[Observation] = []
        chunks: list[np.ndarray] = []
        for _ in range(params.step_cap):
            if np.linalg.norm(scene.agent_position - target) <= params.success_radius:
                break
            obs_list.append(render_observation(scene, params))
            chunk = expert_chunk(scene, params.horizon, params.v_max)
            chunks.append(chunk)
            scene.agent_position = step_agent(scene.agent_position, chunk[0],
                                              params.v_max)
        episodes.append(Episode(
            variant=variant,
            instruction_id=scene.instruction_id,
            observations=obs_list,
            chunks=np.asarray(chunks, dtype=np.float64),
        ))
    return episodes
