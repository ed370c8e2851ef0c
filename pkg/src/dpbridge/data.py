"""Procedural image -> depth / normal pairs and input-noise perturbations."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng, atomic_write, read_dpbt, write_dpbt

TASKS = ("depth", "normal")
SPLITS = ("train", "val", "test")
NOISE_KINDS = ("gaussian", "uniform", "poisson", "salt_pepper")
# largest level per kind in the robustness grid
NOISE_LEVEL_MAX = {"gaussian": 0.5, "uniform": 0.5, "poisson": 0.1, "salt_pepper": 0.1}
MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class ScenarioConfig:
    H: int = 32
    W: int = 32
    n_shapes: tuple = (1, 4)
    depth_range: tuple = (0.1, 10.0)     # affine encoding range, maps to [-1, 1]
    object_depth: tuple = (1.0, 5.0)
    background_depth: tuple = (6.5, 9.0)
    slope_range: tuple = (1.0, 5.0)
    shape_size: tuple = (0.15, 0.45)
    albedo_range: tuple = (0.85, 1.0)
    ambient: float = 0.2
    normal_gain: float = 0.05
    falloff_length: float = 4.0
    exposure: float = 1.2
    texture_noise: float = 0.02
    wave_amplitude: tuple = (0.05, 0.2)
    wave_frequency: tuple = (1.5, 5.0)
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.H < 2 or self.W < 2:
            raise ValueError("image must be at least 2x2")
        if self.n_shapes[0] < 0 or self.n_shapes[1] < self.n_shapes[0]:
            raise ValueError(f"bad n_shapes range {self.n_shapes}")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ValueError(f"bad depth_range {self.depth_range}")

    def split_size(self, split):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def sample_seed(self, split, index):
        """Per-sample seed; splits never collide while index < 2**24."""
        if not 0 <= index < (1 << 24):
            raise ValueError("sample index out of range")
        return ((self.seed & 0xFFFFFFFF) << 32) | (SPLITS.index(split) << 24) | index


@dataclass(frozen=True, eq=False)
class SamplePair:
    x: np.ndarray
    y: np.ndarray
    task: str
    seed: int


def _grid(cfg):
    # pixel centres in [-1, 1]; v grows downwards
    u = (np.arange(cfg.W) + 0.5) / cfg.W * 2 - 1
    v = (np.arange(cfg.H) + 0.5) / cfg.H * 2 - 1
    return np.meshgrid(u, v)


def encode_depth(d, depth_range):
    lo, hi = depth_range
    return 2.0 * (d - lo) / (hi - lo) - 1.0


def decode_depth(y, depth_range):
    lo, hi = depth_range
    return lo + (np.asarray(y) + 1.0) * 0.5 * (hi - lo)


def _depth_scene(cfg, rng):
    u, v = _grid(cfg)
    d0 = rng.uniform(*cfg.background_depth)
    slope = rng.uniform(*cfg.slope_range)
    depth = d0 - slope * v
    albedo = np.full(depth.shape, rng.uniform(*cfg.albedo_range))
    k = int(rng.integers(cfg.n_shapes[0], cfg.n_shapes[1] + 1))
    for _ in range(k):
        cu, cv = rng.uniform(-0.8, 0.8, size=2)
        size = rng.uniform(*cfg.shape_size)
        if rng.uniform() < 0.5:
            inside = (u - cu) ** 2 + (v - cv) ** 2 <= size ** 2
        else:
            aspect = rng.uniform(0.5, 2.0)
            inside = (np.abs(u - cu) <= size * np.sqrt(aspect)) & (np.abs(v - cv) <= size / np.sqrt(aspect))
        d_obj = rng.uniform(*cfg.object_depth)
        closer = inside & (d_obj < depth)
        depth[closer] = d_obj
        albedo[closer] = rng.uniform(*cfg.albedo_range)
    lo, hi = cfg.depth_range
    depth = np.clip(depth, max(lo, 1.0), hi)

    du = np.gradient(depth, 2.0 / cfg.W, axis=1)
    dv = np.gradient(depth, 2.0 / cfg.H, axis=0)
    # light at the camera, so n.l = n_z
    n_dot_l = 1.0 / np.sqrt(1.0 + cfg.normal_gain ** 2 * (du ** 2 + dv ** 2))
    falloff = cfg.exposure * np.exp(-depth / cfg.falloff_length)
    intensity = albedo * (cfg.ambient + (1 - cfg.ambient) * n_dot_l) * falloff
    intensity = intensity + cfg.texture_noise * rng.randn(depth.shape)
    x = np.clip(2.0 * intensity - 1.0, -1.0, 1.0)[..., None]
    y = encode_depth(depth, cfg.depth_range)[..., None]
    return x, y


_LIGHTS = np.array([[-0.6, -0.35, 0.72], [0.6, -0.35, 0.72], [0.0, 0.7, 0.71]])
_LIGHTS = _LIGHTS / np.linalg.norm(_LIGHTS, axis=1, keepdims=True)


def _normal_scene(cfg, rng):
    u, v = _grid(cfg)
    hu = np.zeros_like(u)
    hv = np.zeros_like(u)
    k = int(rng.integers(cfg.n_shapes[0], cfg.n_shapes[1] + 1))
    for _ in range(k):
        amp = rng.uniform(*cfg.wave_amplitude)
        freq = rng.uniform(*cfg.wave_frequency)
        theta, phase = rng.uniform(0, 2 * np.pi, size=2)
        wu, wv = freq * np.cos(theta), freq * np.sin(theta)
        # analytic gradient of amp * sin(wu u + wv v + phase)
        c = amp * np.cos(wu * u + wv * v + phase)
        hu += c * wu
        hv += c * wv
    normals = np.stack([-hu, -hv, np.ones_like(u)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    albedo = rng.uniform(*cfg.albedo_range)
    shade = np.clip(normals @ _LIGHTS.T, 0.0, None)
    intensity = albedo * (cfg.ambient + (1 - cfg.ambient) * shade)
    intensity = intensity + cfg.texture_noise * rng.randn(intensity.shape)
    x = np.clip(2.0 * intensity - 1.0, -1.0, 1.0)
    return x, normals


def gen_pair(cfg: ScenarioConfig, task: str, seed: int) -> SamplePair:
    """Generate one (image, target) pair; bit-identical for equal (cfg, task, seed)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = Rng(seed, stream=TASKS.index(task) + 1)
    x, y = (_depth_scene if task == "depth" else _normal_scene)(cfg, rng)
    return SamplePair(x=x, y=y, task=task, seed=int(seed))


def perturb(x, kind: str, level: float, rng: Rng):
    """Corrupt an image in [-1, 1] with one of the robustness noise models.

    gaussian: additive N(0, level^2); uniform: additive U(-level, level);
    poisson: shot noise on intensities in [0, 1] with quantum ``level``;
    salt_pepper: each pixel set to -1 or +1 with probability ``level``.
    """
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}")
    if not 0.0 <= level <= NOISE_LEVEL_MAX[kind]:
        raise ValueError(f"{kind} level {level} outside [0, {NOISE_LEVEL_MAX[kind]}]")
    x = np.asarray(x, dtype=np.float64)
    if level == 0:
        return x.copy()
    if kind == "gaussian":
        out = x + level * rng.randn(x.shape)
    elif kind == "uniform":
        out = x + rng.uniform(-level, level, size=x.shape)
    elif kind == "poisson":
        p = np.clip((x + 1.0) * 0.5, 0.0, 1.0)
        out = 2.0 * rng.poisson(p / level) * level - 1.0
    else:
        # one draw per pixel, shared across channels
        hit = rng.uniform(size=x.shape[:-1]) < level
        sign = np.where(rng.uniform(size=x.shape[:-1]) < 0.5, -1.0, 1.0)
        out = np.where(hit[..., None], sign[..., None], x)
    return np.clip(out, -1.0, 1.0)


def random_hflip(x, y, task, rng: Rng):
    """Jointly mirror image and target with probability 1/2 (normal x-component negated)."""
    if rng.uniform() >= 0.5:
        return x, y
    x = x[..., ::-1, :].copy()
    y = y[..., ::-1, :].copy()
    if task == "normal":
        y[..., 0] *= -1.0
    return x, y


def generate_split(cfg: ScenarioConfig, task: str, split: str):
    n = cfg.split_size(split)
    pairs = [gen_pair(cfg, task, cfg.sample_seed(split, i)) for i in range(n)]
    X = np.stack([p.x for p in pairs]) if pairs else np.zeros((0, cfg.H, cfg.W, 1))
    Y = np.stack([p.y for p in pairs]) if pairs else np.zeros((0, cfg.H, cfg.W, 1))
    return X, Y, [p.seed for p in pairs]


def write_dataset(cfg: ScenarioConfig, task: str, out_dir) -> Path:
    """Write every split as DPBT blobs plus a plain-text manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    lines = [f"# dpbridge dataset v1 task={task} H={cfg.H} W={cfg.W} seed={cfg.seed}"]
    for split in SPLITS:
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        for i in range(cfg.split_size(split)):
            seed = cfg.sample_seed(split, i)
            pair = gen_pair(cfg, task, seed)
            xf, yf = f"{split}/{i:05d}_x.dpbt", f"{split}/{i:05d}_y.dpbt"
            write_dpbt(out_dir / xf, pair.x)
            write_dpbt(out_dir / yf, pair.y)
            lines.append(f"{seed} {task} {xf} {yf}")
    manifest = out_dir / MANIFEST_NAME
    atomic_write(manifest, ("\n".join(lines) + "\n").encode())
    return manifest


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    entries = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        seed, task, xf, yf = line.split()
        entries.append((int(seed), task, xf, yf))
    return path.parent, entries


def load_split(dataset_dir, split):
    """Load one split written by ``write_dataset`` as stacked ``(X, Y, task)``."""
    root, entries = read_manifest(dataset_dir)
    chosen = [e for e in entries if e[2].startswith(split + "/")]
    if not chosen:
        raise FileNotFoundError(f"no '{split}' samples listed in {root / MANIFEST_NAME}")
    X = np.stack([read_dpbt(root / e[2]) for e in chosen])
    Y = np.stack([read_dpbt(root / e[3]) for e in chosen])
    return X, Y, chosen[0][1]
