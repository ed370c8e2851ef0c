"""DPBK checkpoint format: schedule, codec and model metadata plus DPBT parameter blobs.

Layout (little endian)::

    "DPBK" u32 version
    u32 T  f64 beta_min  f64 beta_max
    u32 factor  f64 codec_scale  u32 H  u32 W  u32 C
    u32 n_widths  u32 widths[n_widths]      (latent_dim, width, n_blocks, temb_dim)
    u64 iteration  u64 seed  u64 adam_step
    u32 len  utf-8 JSON (task and training config)
    DPBT theta  DPBT adam_m  DPBT adam_v
"""

import json
import struct
from dataclasses import asdict
from pathlib import Path

from . import bridge
from .codec import LinearCodec
from .denoiser import AdamState, Denoiser
from .schedule import make_vp_schedule
from .tensor import atomic_write, dpbt_bytes, parse_dpbt

DPBK_MAGIC = b"DPBK"
DPBK_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or unsupported checkpoint file."""


class ScheduleMismatchError(ValueError):
    """Checkpoint and requested schedule or model disagree."""


def checkpoint_bytes(state) -> bytes:
    s, codec, model = state.schedule, state.codec, state.model
    out = bytearray(DPBK_MAGIC)
    out += struct.pack("<I", DPBK_VERSION)
    out += struct.pack("<Idd", s.T, s.beta_min, s.beta_max)
    out += struct.pack("<Id3I", int(codec.factor), codec.scale_, *codec.image_shape_)
    widths = model.widths
    out += struct.pack(f"<I{len(widths)}I", len(widths), *widths)
    out += struct.pack("<3Q", state.iteration, state.config.seed, state.adam.step)
    meta = json.dumps({"task": state.task, "train": asdict(state.config),
                       "adam_betas": list(state.adam.betas), "adam_eps": state.adam.eps},
                      sort_keys=True).encode()
    out += struct.pack("<I", len(meta)) + meta
    for arr in (model.theta, state.adam.m, state.adam.v):
        out += dpbt_bytes(arr)
    return bytes(out)


def save_checkpoint(path, state) -> None:
    atomic_write(path, checkpoint_bytes(state))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def blob(self):
        try:
            arr, self.pos = parse_dpbt(self.buf, self.pos)
        except (ValueError, struct.error) as exc:
            raise CheckpointError(f"bad parameter blob: {exc}") from exc
        return arr


def parse_checkpoint(buf: bytes):
    """Decode checkpoint bytes into a ``TrainState``."""
    from .trainer import TrainConfig, TrainState

    if buf[:4] != DPBK_MAGIC:
        raise CheckpointError("not a DPBK checkpoint (bad magic)")
    r = _Reader(buf)
    r.pos = 4
    (version,) = r.unpack("<I")
    if version != DPBK_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {DPBK_VERSION})")
    T, beta_min, beta_max = r.unpack("<Idd")
    factor, scale, H, W, C = r.unpack("<Id3I")
    (n_widths,) = r.unpack("<I")
    widths = r.unpack(f"<{n_widths}I")
    iteration, seed, adam_step = r.unpack("<3Q")
    (meta_len,) = r.unpack("<I")
    if r.pos + meta_len > len(buf):
        raise CheckpointError("truncated checkpoint")
    try:
        meta = json.loads(buf[r.pos:r.pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad metadata: {exc}") from exc
    r.pos += meta_len
    theta, m, v = r.blob(), r.blob(), r.blob()
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")

    try:
        train = dict(meta["train"])
        train["seed"] = seed
        config = TrainConfig(**train)
        task, betas, eps = meta["task"], tuple(meta["adam_betas"]), float(meta["adam_eps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad metadata: {exc}") from exc
    schedule = make_vp_schedule(T, beta_min, beta_max)
    codec = LinearCodec.from_params(factor, (H, W, C), scale)
    latent_dim, width, n_blocks, temb_dim = widths
    model = Denoiser(codec.latent_shape_, width=width, n_blocks=n_blocks, temb_dim=temb_dim)
    if model.latent_dim != latent_dim or theta.shape != (model.n_params,):
        raise CheckpointError("parameter vector does not match the stored architecture")
    model.theta[:] = theta
    model.T = T
    adam = AdamState(m=m.copy(), v=v.copy(), step=int(adam_step),
                     betas=betas, eps=eps)
    return TrainState(schedule=schedule, bc=bridge.bridge_coeffs(schedule), codec=codec,
                      model=model, adam=adam, config=config, task=task,
                      iteration=int(iteration))


def load_checkpoint(path, expect_T=None, expect_betas=None):
    """Load a checkpoint; optionally assert the schedule it was trained with."""
    path = Path(path)
    state = parse_checkpoint(path.read_bytes())
    s = state.schedule
    if expect_T is not None and int(expect_T) != s.T:
        raise ScheduleMismatchError(f"{path}: checkpoint T={s.T}, requested T={expect_T}")
    if expect_betas is not None and tuple(map(float, expect_betas)) != (s.beta_min, s.beta_max):
        raise ScheduleMismatchError(
            f"{path}: checkpoint betas {(s.beta_min, s.beta_max)}, requested {tuple(expect_betas)}")
    return state
