"""Command-line entry point: dpbridge {gen-data,train,sample,eval,verify,sweep-steps,robustness}.

Exit codes: 0 success, 1 a verification check failed, 2 usage error,
3 configuration error, 4 missing or unreadable file, 5 schedule/model mismatch.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bridge, metrics, verify
from .checkpoint import CheckpointError, ScheduleMismatchError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import TASKS, load_split, write_dataset
from .sampler import accelerated_sample
from .schedule import make_vp_schedule
from .tensor import Rng, atomic_write, read_dpbt, write_dpbt
from .trainer import STREAM_SAMPLE, init_state, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5


class MismatchError(ValueError):
    pass


def _steps(text):
    try:
        steps = tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad step list {text!r}") from None
    if not steps or min(steps) < 1:
        raise argparse.ArgumentTypeError("step counts must be >= 1")
    return steps


def _load_state(args, cfg: RunConfig):
    """Checkpoint state; the schedule is checked against ``--config`` when one is given."""
    if args.config is None:
        return load_checkpoint(args.checkpoint)
    sch = cfg.schedule
    return load_checkpoint(args.checkpoint, expect_T=sch.T, expect_betas=(sch.beta_min, sch.beta_max))


def _eval_data(args, cfg, state):
    X, Y, task = load_split(args.data, args.split)
    if task != state.task:
        raise MismatchError(f"dataset task {task!r} but checkpoint task {state.task!r}")
    if X.shape[1:] != state.codec.image_shape_:
        raise MismatchError(f"dataset images {X.shape[1:]} but checkpoint expects "
                            f"{state.codec.image_shape_}")
    n = args.n_eval if args.n_eval is not None else cfg.eval.n_eval
    if n:
        X, Y = X[:n], Y[:n]
    return X, Y, task


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg):
    task = args.task or cfg.dataset.task
    manifest = write_dataset(cfg.scenario(), task, args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args, cfg):
    X, Y, task = load_split(args.data, "train")
    n_iter = args.n_iter if args.n_iter is not None else cfg.train.n_iter
    if args.resume:
        state = _load_state(argparse.Namespace(config=args.config, checkpoint=args.resume), cfg)
        if state.task != task or X.shape[1:] != state.codec.image_shape_:
            raise MismatchError("resume checkpoint does not match the dataset")
    else:
        sch, mod = cfg.schedule, cfg.model
        state = init_state(cfg.train_config(), X.shape[1:], task, sch.T, sch.beta_min,
                           sch.beta_max, mod.factor, mod.width, mod.n_blocks, mod.temb_dim)
    train(state, X, Y, n_iter, checkpoint_path=args.out, log_path=args.log)
    print(f"trained to iteration {state.iteration}; checkpoint {args.out}")
    return EXIT_OK


def _pnm_bytes(y):
    """8-bit P5 (1 channel) or P6 (3 channels) image of a map in [-1, 1]."""
    H, W, C = y.shape
    pix = np.clip(np.rint((np.clip(y, -1.0, 1.0) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if C == 1:
        return f"P5\n{W} {H}\n255\n".encode() + pix[..., 0].tobytes()
    if C == 3:
        return f"P6\n{W} {H}\n255\n".encode() + pix.tobytes()
    raise ValueError(f"cannot write a {C}-channel map as P5/P6")


def cmd_sample(args, cfg):
    state = _load_state(args, cfg)
    if args.input is not None:
        X = read_dpbt(args.input)
        if X.ndim == 3:
            X = X[None]
    else:
        X, _, task = load_split(args.data, args.split)
        if task != state.task:
            raise MismatchError(f"dataset task {task!r} but checkpoint task {state.task!r}")
        X = X[args.index:args.index + args.count]
    if X.shape[1:] != state.codec.image_shape_:
        raise MismatchError(f"input images {X.shape[1:]} but checkpoint expects "
                            f"{state.codec.image_shape_}")
    overrides = {"use_dan": state.config.use_dan}
    if args.steps is not None:
        overrides["n_steps"] = args.steps
    if args.g_mode is not None:
        overrides["g_mode"] = args.g_mode
    if args.eta is not None:
        overrides["eta"] = args.eta
    seed = cfg.seed if args.seed is None else args.seed
    scfg = cfg.sampler_config(seed=seed, **overrides)
    y_hat, z0_hat = accelerated_sample(state.model, state.bc, state.codec, X, scfg,
                                       rng=Rng(seed).spawn(STREAM_SAMPLE))
    if state.task == "normal":
        norm = np.linalg.norm(y_hat, axis=-1, keepdims=True)
        y_hat = np.divide(y_hat, norm, out=np.zeros_like(y_hat), where=norm > 0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if y_hat.shape[-1] == 1 else "ppm"
    for i, (y, z) in enumerate(zip(y_hat, z0_hat)):
        atomic_write(out / f"pred_{i:05d}.{ext}", _pnm_bytes(y))
        write_dpbt(out / f"pred_{i:05d}.dpbt", y)
        write_dpbt(out / f"latent_{i:05d}.dpbt", z)
    print(f"wrote {len(y_hat)} prediction(s) to {out}")
    return EXIT_OK


def _print_rows(rows):
    for r in rows:
        vals = (f"absrel={r['absrel']:.4f} delta1={r['delta1']:.4f}" if r["task"] == "depth"
                else f"mean_angle={r['mean_angle']:.3f} pct11.25={r['pct11_25']:.4f}")
        print(f"{r['task']} steps={r['n_steps']} noise={r['noise_kind']}:{r['noise_level']} {vals}")


def _sampler_options(cfg):
    return {"clip_z0": cfg.sampler.clip_z0, "t_start": cfg.sampler.t_start or None}


def cmd_eval(args, cfg):
    state = _load_state(args, cfg)
    X, Y, task = _eval_data(args, cfg, state)
    steps = args.steps or (cfg.sampler.n_steps,)
    rows = metrics.step_sweep(state.model, state.bc, state.codec, X, Y, task, steps,
                              g_mode=args.g_mode or cfg.sampler.g_mode, seed=cfg.seed,
                              use_dan=state.config.use_dan, **_sampler_options(cfg))
    metrics.write_rows_csv(args.out, rows)
    _print_rows(rows)
    return EXIT_OK


def cmd_sweep_steps(args, cfg):
    args.steps = args.steps or cfg.eval.steps
    return cmd_eval(args, cfg)


def cmd_robustness(args, cfg):
    state = _load_state(args, cfg)
    X, Y, task = _eval_data(args, cfg, state)
    rows = metrics.robustness_sweep(state.model, state.bc, state.codec, X, Y, task,
                                    n_steps=args.steps or cfg.sampler.n_steps,
                                    g_mode=args.g_mode or cfg.sampler.g_mode, seed=cfg.seed,
                                    use_dan=state.config.use_dan, **_sampler_options(cfg))
    metrics.write_rows_csv(args.out, rows)
    _print_rows(rows)
    return EXIT_OK


def cmd_verify(args, cfg):
    sch = cfg.schedule
    s = make_vp_schedule(sch.T, sch.beta_min, sch.beta_max)
    if args.dump_coeffs:
        verify.dump_coefficients(args.dump_coeffs, bridge.bridge_coeffs(s))
        print(f"wrote {args.dump_coeffs}")
    reports = verify.run_suite(s, seed=cfg.seed, n_traj=args.n_traj, n_dan=args.n_dan)
    print(verify.format_table(reports))
    if args.out:
        verify.write_jsonl(args.out, reports)
    failed = [r.name for r in reports if not r.ok]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="dpbridge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="INI run configuration")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write a procedural dataset")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--task", choices=TASKS)

    sp = add("train", cmd_train, "train a model on a dataset")
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--out", required=True, type=Path, help="checkpoint path")
    sp.add_argument("--log", type=Path, help="training log CSV")
    sp.add_argument("--n-iter", type=int)
    sp.add_argument("--resume", type=Path, help="continue from this checkpoint")

    def add_model_io(sp):
        sp.add_argument("--checkpoint", required=True, type=Path)
        sp.add_argument("--g-mode", choices=("markov", "deterministic", "scaled"))

    sp = add("sample", cmd_sample, "predict maps for input images")
    add_model_io(sp)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="DPBT image (H,W,C) or stack (N,H,W,C)")
    src.add_argument("--data", type=Path, help="dataset directory")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir", required=True, type=Path)

    for name, fn, help_ in (("eval", cmd_eval, "metrics on a dataset split"),
                            ("sweep-steps", cmd_sweep_steps, "metrics per sampling-step count"),
                            ("robustness", cmd_robustness, "metrics under input noise")):
        sp = add(name, fn, help_)
        add_model_io(sp)
        sp.add_argument("--data", required=True, type=Path)
        sp.add_argument("--split", default="test", choices=("train", "val", "test"))
        sp.add_argument("--n-eval", type=int)
        sp.add_argument("--out", required=True, type=Path, help="metrics CSV")
        if name == "robustness":
            sp.add_argument("--steps", type=int)
        else:
            sp.add_argument("--steps", type=_steps, help="comma-separated step counts")

    sp = add("verify", cmd_verify, "run the numerical verification suite")
    sp.add_argument("--out", type=Path, help="JSON-lines report")
    sp.add_argument("--dump-coeffs", type=Path, help="write the coefficient table as CSV")
    sp.add_argument("--n-traj", type=int, default=10_000)
    sp.add_argument("--n-dan", type=int, default=100_000)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScheduleMismatchError, MismatchError) as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FileNotFoundError, IsADirectoryError, PermissionError, CheckpointError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
