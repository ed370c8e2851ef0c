"""INI run configuration: one file, documented sections, unknown keys rejected."""

import configparser
from dataclasses import dataclass, field, fields, replace

from .data import ScenarioConfig
from .sampler import SamplerConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Schema violation in a run configuration."""


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass(frozen=True)
class DatasetSection:
    task: str = "depth"
    H: int = 32
    W: int = 32
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_shapes: tuple = (1, 4)


@dataclass(frozen=True)
class ModelSection:
    factor: int = 2
    width: int = 512
    n_blocks: int = 4
    temb_dim: int = 64


@dataclass(frozen=True)
class TrainSection:
    omega1: float = 1.0
    omega2: float = 0.1
    batch_size: int = 2
    grad_accum: int = 8
    n_iter: int = 5000
    lr: float = 1e-3
    warmup: int = 100
    ic_m_threshold: float = 0.2
    use_dan: bool = True
    hflip: bool = True
    clip_norm: float = 1.0
    checkpoint_every: int = 1000


@dataclass(frozen=True)
class SamplerSection:
    n_steps: int = 50
    g_mode: str = "deterministic"
    eta: float = 1.0
    t_start: int = 0          # 0 means T - 1
    clip_z0: bool = True


@dataclass(frozen=True)
class EvalSection:
    steps: tuple = (1, 2, 5, 10, 20, 50)
    n_eval: int = 200         # test pairs used by eval / sweeps (0 = all)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def scenario(self) -> ScenarioConfig:
        d = self.dataset
        return ScenarioConfig(H=d.H, W=d.W, n_shapes=tuple(d.n_shapes), n_train=d.n_train,
                              n_val=d.n_val, n_test=d.n_test, seed=self.seed)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(**{f.name: getattr(t, f.name) for f in fields(t)}, seed=self.seed)

    def sampler_config(self, **overrides) -> SamplerConfig:
        s = self.sampler
        cfg = SamplerConfig(n_steps=s.n_steps, g_mode=s.g_mode, eta=s.eta,
                            t_start=s.t_start or None, clip_z0=s.clip_z0, seed=self.seed)
        return replace(cfg, **overrides)


SECTIONS = ("schedule", "dataset", "model", "train", "sampler", "eval")


def _convert(section, key, raw, default):
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from None


def _build(cls, section, items):
    known = {f.name: f.default for f in fields(cls)}
    values = {}
    for key, raw in items:
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in [{section}]")
        values[key] = _convert(section, key, raw, known[key])
    return cls(**values)


def parse_config(text: str, source="<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keys are case sensitive (T, H, W)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    kwargs = {}
    for name in parser.sections():
        items = parser.items(name)
        if name == "run":
            for key, raw in items:
                if key != "seed":
                    raise ConfigError(f"unknown key '{key}' in [run]")
                kwargs["seed"] = _convert("run", key, raw, 0)
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls = type(getattr(RunConfig(), name))
        kwargs[name] = _build(cls, name, items)
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))


def validate(cfg: RunConfig):
    """Cross-field checks; wraps constructor errors of the module configs."""
    if cfg.dataset.task not in ("depth", "normal"):
        raise ConfigError(f"[dataset] task must be depth or normal, got {cfg.dataset.task!r}")
    f = cfg.model.factor
    if cfg.dataset.H % f or cfg.dataset.W % f:
        raise ConfigError("[dataset] H and W must be divisible by [model] factor")
    if not 0 <= cfg.sampler.t_start <= cfg.schedule.T - 1:
        raise ConfigError(f"[sampler] t_start must lie in [0, {cfg.schedule.T - 1}]")
    try:
        cfg.scenario()
        cfg.train_config()
        cfg.sampler_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Serialize to the INI form accepted by ``parse_config``."""
    lines = ["[run]", f"seed = {cfg.seed}"]
    for name in SECTIONS:
        lines.append(f"\n[{name}]")
        sec = getattr(cfg, name)
        for f in fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
