"""Procedurally posed two-hand scenes and the feature pyramid rendered from them.

A scene is two copies of the template (the left one mirrored in x), each
deformed by a low-dimensional pose, placed side by side and projected with a
weak-perspective camera. The pyramid maps are Gaussian splats of the
projected vertices, so the image features determine the geometry.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .losses import MIDDLE_MCP, ROOT_JOINT, Camera, uniform_patch_regressor
from .meshtopo import DATA_DIR, MeshHierarchy, TemplateMesh, save_obj, synthetic_hand
from .storage import format_kv, parse_kv, read_container, write_container

GENERATOR_VERSION = "1"
REFERENCE_LENGTH = 0.095
HANDS = ("left", "right")
N_CHANNELS = 6
POSE_DIM = 9  # five finger curls, spread, wrist flexion, deviation, twist
GLOBAL_POOL = 4
_PROJECTION_SEED = 20220417

KNUCKLES = (0.45, 0.62, 0.78)
CURL_MAX = 0.55  # radians per knuckle at |curl| = 1
SPREAD_MAX = 0.2
WRIST_MAX = (0.4, 0.3, 0.5)


def build_template(rings: int, segments: int) -> TemplateMesh:
    """Synthetic hand with the wrist joint at the origin and a 9.5 cm middle metacarpal."""
    mesh = synthetic_hand(rings, segments)
    joints = uniform_patch_regressor(mesh.vertices)(mesh.vertices)
    length = np.linalg.norm(joints[MIDDLE_MCP] - joints[ROOT_JOINT])
    v = (mesh.vertices - joints[ROOT_JOINT]) * (REFERENCE_LENGTH / length)
    return TemplateMesh(v, mesh.faces)


BUNDLED = {"synthetic_hand_778.obj": (21, 37), "synthetic_hand_197.obj": (14, 14)}


def write_bundled_templates(directory=DATA_DIR) -> None:
    for name, (rings, segs) in BUNDLED.items():
        m = build_template(rings, segs)
        save_obj(Path(directory) / name, m.vertices, m.faces,
                 header=f"synthetic two-hand template, {rings} rings x {segs} segments + apex")


# ------------------------------------------------------------------ posing

@dataclass(frozen=True)
class HandRig:
    """Per-vertex skinning coordinates of a rest template."""
    rest: np.ndarray  # (N, 3)
    u: np.ndarray  # position along the hand, 0 at the wrist, 1 at the tip
    across: np.ndarray  # palm-width coordinate normalized to [-1, 1] per height
    finger_weights: np.ndarray  # (N, 5), rows sum to 1
    length: float

    @classmethod
    def from_template(cls, template: TemplateMesh) -> "HandRig":
        v = template.vertices
        y = v[:, 1]
        length = float(y.max() - y.min())
        u = (y - y.min()) / length
        x = v[:, 0]
        across = np.zeros_like(x)
        for i in range(len(v)):
            near = np.abs(u - u[i]) < 0.03
            half = np.abs(x[near]).max()
            across[i] = x[i] / half if half > 0 else 0.0
        centres = np.linspace(-0.8, 0.8, 5)
        w = np.exp(-((across[:, None] - centres[None, :]) ** 2) / (2 * 0.2 ** 2))
        w /= w.sum(axis=1, keepdims=True)
        return cls(v.copy(), u, across, w, length)


def _smoothstep(u, at, width=0.025):
    return 1.0 / (1.0 + np.exp(-(u - at) / width))


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def pose_hand(rig: HandRig, pose) -> np.ndarray:
    """Deform the rest template of a right hand by a pose vector in [-1, 1]^9.

    Knuckle bends are applied distal first about rest-frame pivots, then the
    finger spread, then the wrist rotation about the origin. A zero pose
    returns the rest vertices unchanged.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (POSE_DIM,):
        raise ValueError(f"pose must have {POSE_DIM} entries, got {pose.shape}")
    v = rig.rest.copy()
    curl = (rig.finger_weights @ pose[:5]) * CURL_MAX
    for knuckle in reversed(KNUCKLES):
        yk = knuckle * rig.length
        a = curl * _smoothstep(rig.u, knuckle)
        c, s = np.cos(a), np.sin(a)
        dy, dz = v[:, 1] - yk, v[:, 2]
        v[:, 1] = yk + c * dy - s * dz
        v[:, 2] = s * dy + c * dz
    a = pose[5] * SPREAD_MAX * rig.across * _smoothstep(rig.u, KNUCKLES[0])
    c, s = np.cos(a), np.sin(a)
    y0 = KNUCKLES[0] * rig.length
    dx, dy = v[:, 0], v[:, 1] - y0
    v[:, 0] = c * dx - s * dy
    v[:, 1] = y0 + s * dx + c * dy
    r = _rot_x(pose[6] * WRIST_MAX[0]) @ _rot_z(pose[7] * WRIST_MAX[1]) @ _rot_y(pose[8] * WRIST_MAX[2])
    return v @ r.T


def mirror(vertices) -> np.ndarray:
    out = np.array(vertices, dtype=np.float64)
    out[:, 0] *= -1.0
    return out


# --------------------------------------------------------------- rendering

def kernel_mass(sigma: float) -> float:
    """Lattice sum of an unnormalized 2-D Gaussian.

    The continuous value 2*pi*sigma^2 is exact to ~1e-12 relative for sigma >= 1.2 px.
    """
    return 2.0 * np.pi * sigma * sigma


def splat(points_px, weights, height: int, width: int, sigma: float) -> np.ndarray:
    """Sum of ``w * exp(-|p - c|^2 / 2 sigma^2)`` over points, evaluated at pixel centres.

    ``points_px`` are (col, row) coordinates in pixel units.
    """
    p = np.asarray(points_px, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    gx = np.exp(-((cols[None, :] - p[:, :1]) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((rows[None, :] - p[:, 1:2]) ** 2) / (2 * sigma * sigma))
    return (gy * w[:, None]).T @ gx


def to_pixels(xy, height: int, width: int) -> np.ndarray:
    """Normalized image coordinates in [-1, 1] (y up) to (col, row) pixel coordinates."""
    xy = np.asarray(xy)
    col = (xy[:, 0] + 1.0) * 0.5 * width
    row = (1.0 - xy[:, 1]) * 0.5 * height
    return np.stack([col, row], axis=1)


def channel_gain(height: int, width: int, n_vertices: int, sigma: float) -> float:
    # a hand covers roughly an eighth of the image; this keeps in-hand densities near 1
    return height * width / (8.0 * n_vertices * kernel_mass(sigma))


def render_map(verts: dict, u: np.ndarray, cam: Camera, height: int, width: int,
               sigma: float) -> np.ndarray:
    """Six channels: left, right, both, left depth-weighted, right depth-weighted, both tip-weighted."""
    n = len(u)
    gain = channel_gain(height, width, n, sigma)
    px = {h: to_pixels(cam.apply(verts[h]), height, width) for h in HANDS}
    ones = np.ones(n)
    dens = {h: splat(px[h], ones, height, width, sigma) for h in HANDS}
    depth = {h: splat(px[h], 0.5 + 5.0 * verts[h][:, 2], height, width, sigma) for h in HANDS}
    tip = splat(px["left"], u, height, width, sigma) + splat(px["right"], u, height, width, sigma)
    maps = [dens["left"], dens["right"], dens["left"] + dens["right"],
            depth["left"], depth["right"], tip]
    return gain * np.stack(maps)


def global_projection(dim: int) -> np.ndarray:
    """Fixed (sample-independent) projection of the pooled finest map onto the global vector."""
    rng = np.random.default_rng(_PROJECTION_SEED)
    n_in = N_CHANNELS * GLOBAL_POOL * GLOBAL_POOL
    return rng.standard_normal((dim, n_in)) / np.sqrt(n_in)


def global_feature(finest: np.ndarray, dim: int) -> np.ndarray:
    c, h, w = finest.shape
    pooled = finest.reshape(c, GLOBAL_POOL, h // GLOBAL_POOL, GLOBAL_POOL, w // GLOBAL_POOL).mean(axis=(2, 4))
    return global_projection(dim) @ pooled.reshape(-1)


# ------------------------------------------------------------------ samples

@dataclass(frozen=True)
class FeaturePyramid:
    global_feature: np.ndarray  # (g,)
    maps: tuple  # three (C, H, W) arrays, coarse to fine

    def __post_init__(self):
        if len(self.maps) != 3:
            raise ValueError(f"a pyramid has exactly 3 maps, got {len(self.maps)}")


@dataclass(frozen=True)
class SceneParams:
    pose: dict
    separation: float
    offset: np.ndarray  # (3,) whole-scene shift
    depth_gap: float
    camera: Camera


@dataclass
class TrainingSample:
    seed: int
    pose: dict
    camera: Camera
    vertices: dict  # hand -> (N, 3)
    level_vertices: dict  # hand -> [(N_t, 3) for each level]
    pyramid: FeaturePyramid
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SynthConfig:
    resolutions: tuple = (16, 32, 64)
    sigma: float = 1.5
    noise_std: float = 0.02
    proximity: float = 0.5
    camera_scale: float = 5.0
    camera_jitter: float = 0.05
    global_dim: int = 64
    separation_range: tuple = (0.05, 0.16)

    @classmethod
    def from_config(cls, cfg: Config) -> "SynthConfig":
        return cls(tuple(cfg.map_resolutions), cfg.splat_sigma, cfg.noise_std, cfg.proximity,
                   cfg.camera_scale, cfg.camera_jitter, cfg.global_dim)


def sample_scene(seed: int, cfg: SynthConfig) -> SceneParams:
    rng = np.random.default_rng(seed)
    pose = {h: rng.uniform(-1.0, 1.0, POSE_DIM) for h in HANDS}
    lo, hi = cfg.separation_range
    gamma = 1.0 + 4.0 * cfg.proximity
    separation = lo + (hi - lo) * rng.uniform() ** gamma
    offset = np.array([rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), 0.0])
    depth_gap = rng.uniform(-0.02, 0.02)
    j = cfg.camera_jitter
    cam = Camera(cfg.camera_scale * (1.0 + j * rng.uniform(-1, 1)), j * rng.uniform(-1, 1), j * rng.uniform(-1, 1))
    return SceneParams(pose, separation, offset, depth_gap, cam)


def place_hands(rig: HandRig, scene: SceneParams) -> dict:
    centre_y = 0.5 * rig.length
    verts = {}
    for h, sign in (("left", -1.0), ("right", 1.0)):
        v = pose_hand(rig, scene.pose[h])
        if h == "left":
            v = mirror(v)
        shift = np.array([sign * 0.5 * scene.separation, -centre_y, sign * 0.5 * scene.depth_gap])
        verts[h] = v + shift + scene.offset
    return verts


def generate_sample(seed: int, template: TemplateMesh, hierarchy: MeshHierarchy,
                    cfg: SynthConfig = SynthConfig(), rig: HandRig | None = None) -> TrainingSample:
    rig = rig or HandRig.from_template(template)
    scene = sample_scene(seed, cfg)
    verts = place_hands(rig, scene)
    noise_rng = np.random.default_rng([seed, 1])
    maps = []
    for res in cfg.resolutions:
        m = render_map(verts, rig.u, scene.camera, res, res, cfg.sigma)
        if cfg.noise_std > 0:
            m = m + cfg.noise_std * noise_rng.standard_normal(m.shape)
        maps.append(m)
    pyramid = FeaturePyramid(global_feature(maps[-1], cfg.global_dim), tuple(maps))
    levels = {h: [hierarchy.pool(verts[h], t) for t in range(hierarchy.n_levels)] for h in HANDS}
    return TrainingSample(seed, scene.pose, scene.camera, verts, levels, pyramid,
                          {"generator_version": GENERATOR_VERSION, "separation": scene.separation})


@dataclass
class Dataset:
    samples: list
    meta: dict

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def split_seeds(n: int, base_seed: int, split_ratio: float) -> tuple[list[int], list[int]]:
    if n < 2:
        raise ValueError("a dataset needs at least 2 samples")
    seeds = [base_seed * 1_000_003 + i for i in range(n)]
    n_train = min(max(int(round(n * split_ratio)), 1), n - 1)
    return seeds[:n_train], seeds[n_train:]


def make_dataset(n: int, base_seed: int, split_ratio: float, template: TemplateMesh,
                 hierarchy: MeshHierarchy, cfg: SynthConfig = SynthConfig()) -> tuple[Dataset, Dataset]:
    train_seeds, test_seeds = split_seeds(n, base_seed, split_ratio)
    rig = HandRig.from_template(template)
    meta = {"generator_version": GENERATOR_VERSION, "base_seed": base_seed, "n": n,
            "split_ratio": split_ratio}
    out = []
    for name, seeds in (("train", train_seeds), ("test", test_seeds)):
        samples = [generate_sample(s, template, hierarchy, cfg, rig) for s in seeds]
        out.append(Dataset(samples, dict(meta, split=name)))
    return out[0], out[1]


# ------------------------------------------------------------------- cache

def sample_arrays(sample: TrainingSample) -> dict:
    arrays = {"global": sample.pyramid.global_feature}
    for t, m in enumerate(sample.pyramid.maps):
        arrays[f"map{t}"] = m
    for h in HANDS:
        arrays[f"{h}.pose"] = sample.pose[h]
        arrays[f"{h}.vertices"] = sample.vertices[h]
        for t, lv in enumerate(sample.level_vertices[h]):
            arrays[f"{h}.level{t}"] = lv
    return arrays


def save_sample(path, sample: TrainingSample) -> None:
    header = {"kind": "sample", "seed": sample.seed,
              "camera.s": repr(sample.camera.s), "camera.tx": repr(sample.camera.tx),
              "camera.ty": repr(sample.camera.ty)}
    header.update({k: v for k, v in sample.meta.items()})
    arrays = sample_arrays(sample)
    header.update({f"shape.{k}": "x".join(map(str, np.shape(a))) for k, a in arrays.items()})
    write_container(path, header, arrays)


def load_sample(path) -> TrainingSample:
    header, arrays = read_container(path)
    if header.get("kind") != "sample":
        raise ValueError(f"{path} is not a sample file")
    cam = Camera(float(header["camera.s"]), float(header["camera.tx"]), float(header["camera.ty"]))
    n_levels = sum(1 for k in arrays if k.startswith("left.level"))
    maps = tuple(arrays[f"map{t}"] for t in range(3))
    meta = {k: v for k, v in header.items()
            if not k.startswith(("shape.", "camera.")) and k not in ("kind", "seed")}
    return TrainingSample(
        int(header["seed"]),
        {h: arrays[f"{h}.pose"] for h in HANDS},
        cam,
        {h: arrays[f"{h}.vertices"] for h in HANDS},
        {h: [arrays[f"{h}.level{t}"] for t in range(n_levels)] for h in HANDS},
        FeaturePyramid(arrays["global"], maps),
        meta,
    )


def save_dataset(directory, train: Dataset, test: Dataset, extra_meta=None) -> None:
    d = Path(directory)
    for split in (train, test):
        sub = d / split.meta["split"]
        sub.mkdir(parents=True, exist_ok=True)
        for s in split.samples:
            save_sample(sub / f"sample_{s.seed}.bin", s)
    meta = dict(train.meta)
    meta.pop("split", None)
    meta["n_train"] = len(train)
    meta["n_test"] = len(test)
    meta.update(extra_meta or {})
    (d / "metadata.txt").write_text(format_kv(meta))


def load_dataset(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    meta = parse_kv((d / "metadata.txt").read_text())
    out = []
    for split in ("train", "test"):
        files = sorted((d / split).glob("sample_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
        out.append(Dataset([load_sample(f) for f in files], dict(meta, split=split)))
    return out[0], out[1]
