"""Command-line entry point: ``ipdnn {generate,invert,pretrain,finetune,eval,render}``.

Exit codes: 0 success, 2 input error, 3 config/fingerprint error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .em_core import ForwardModelError, GeometryError, forward
from .glow_net import ACTIVATIONS, NetworkParams
from .inversion import (FingerprintMismatch, InversionConfig, NumericalFailure, finetune,
                        invert, relative_error, write_log)
from .objective import Physics
from .scenario import (FormatError, add_noise, load_map, load_measurements, load_scene,
                       load_setup, rasterize, render_map, save_map, save_measurements,
                       save_setup)
from .subregion import threshold_mask, write_pbm

log = logging.getLogger("ipdnn")

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(Exception):
    pass


class ConfigError(Exception):
    pass


class Run:
    """Collects outputs and writes ``manifest.json`` atomically when the run ends."""

    def __init__(self, command: str, argv: list[str], out_dir: Path | None):
        self.command, self.argv, self.out_dir = command, argv, out_dir
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        self.t0 = time.perf_counter()
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out_dir / name

    def write_json(self, name: str, obj) -> None:
        _atomic_write(self.path(name), json.dumps(obj, indent=2, default=_jsonable))

    def finish(self, seed=None) -> None:
        if self.out_dir is None:
            return
        manifest = {
            "command": self.command, "argv": self.argv, "config": self.config,
            "inputs": self.inputs, "outputs": sorted(set(self.outputs)) + ["manifest.json"],
            "seed": seed, "version": __version__,
            "wall_time_s": time.perf_counter() - self.t0,
        }
        _atomic_write(self.out_dir / "manifest.json",
                      json.dumps(manifest, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {path}")
    return p


def tx_subset_indices(n_tx: int, k: int) -> np.ndarray:
    """``k`` transmitters spread evenly over the ring."""
    if not 1 <= k <= n_tx:
        raise ConfigError(f"--tx-subset must be in [1, {n_tx}]")
    return np.unique(np.floor(np.arange(k) * n_tx / k).astype(int))


def _resolve_config(args) -> InversionConfig:
    d = {}
    if getattr(args, "config", None):
        try:
            d = json.loads(_existing(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    for flag in ("seed", "alpha", "beta", "max_iters", "activation", "lr", "stop_tol"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = v
    try:
        return InversionConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _load_problem(args, run: Run):
    setup = load_setup(_existing(args.setup))
    meas = load_measurements(_existing(args.measurements))
    run.inputs.update(setup=args.setup, measurements=args.measurements)
    try:
        meas.check_against(setup)
    except GeometryError as exc:
        raise ConfigError(str(exc)) from None
    if args.tx_subset:
        idx = tx_subset_indices(setup.n_tx, args.tx_subset)
        setup, meas = setup.with_tx(idx), meas.select_tx(idx)
    truth = None
    if args.truth:
        truth = load_map(_existing(args.truth))
        run.inputs["truth"] = args.truth
        if truth.shape != (setup.n_side, setup.n_side):
            raise InputError(f"truth map is {truth.shape}, grid is {setup.n_side}x{setup.n_side}")
    return setup, meas, truth


def _write_result(run: Run, result, truth, config: InversionConfig, ckpt=None) -> dict:
    run.write_json("config.json", config.to_dict())
    write_log(result.log, run.path("log.csv"))
    save_map(result.eps_hat, run.path("eps_hat.csv"))
    (ckpt or result.params).save(run.path("checkpoint.bin"))
    last = result.log[-1] if result.log else {}
    summary = {
        "iterations": result.iterations, "best_iter": result.best_iter,
        "best_total": result.best_loss,
        "final": {k: last.get(k) for k in ("data", "bound", "tv", "total")},
        "n_active_cells": int(result.mask.sum()),
        "wall_time_s": result.wall_time,
    }
    if truth is not None:
        summary["rel_err"] = relative_error(truth, result.eps_hat)
    run.write_json("summary.json", summary)
    return summary


def _run_inversion(args, run: Run, checkpoint: NetworkParams | None = None):
    config = _resolve_config(args)
    run.config = config.to_dict()
    setup, meas, truth = _load_problem(args, run)
    physics = Physics.build(setup)

    def dump(k, mask):
        write_pbm(mask, run.path(f"mask_k{k:05d}.pbm"))

    if checkpoint is not None:
        result = finetune(checkpoint, meas, setup, config, truth=truth, physics=physics,
                          on_mask_update=dump)
    else:
        result = invert(meas, setup, config, truth=truth, physics=physics, on_mask_update=dump)
    write_pbm(result.initial_mask, run.path("mask_k00000.pbm"))
    return config, setup, result, truth


def cmd_generate(args, run: Run):
    scene = load_scene(_existing(args.scene))
    run.inputs["scene"] = args.scene
    setup = scene.resolved_setup()
    if args.n_side:
        setup = setup.with_grid(args.n_side)
    truth = rasterize(scene, setup, subsample=args.subsample)
    if args.fine_grid:
        fine = setup.with_grid(2 * setup.n_side)
        meas = forward(rasterize(scene, fine, subsample=args.subsample), fine)
    else:
        meas = forward(truth, setup)
    meas.provenance = "synthetic"
    if args.noise:
        meas = add_noise(meas, args.noise, args.seed)
    run.config = {"n_side": setup.n_side, "noise": args.noise, "seed": args.seed,
                  "fine_grid": args.fine_grid, "subsample": args.subsample}
    save_setup(setup, run.path("setup.json"))
    save_map(truth, run.path("truth.csv"))
    save_measurements(meas, run.path("measurements.csv"))
    render_map(truth, run.path("truth.pgm"))
    run.outputs.append("truth.pgm.txt")
    print(f"wrote {len(run.outputs)} files to {run.out_dir}")
    return args.seed


def cmd_invert(args, run: Run):
    ckpt = None
    if args.init:
        ckpt = NetworkParams.load(_existing(args.init))
        run.inputs["init"] = args.init
    config, _, result, truth = _run_inversion(args, run, ckpt)
    summary = _write_result(run, result, truth, config)
    print(json.dumps(summary, indent=2, default=_jsonable))
    return config.seed


def cmd_pretrain(args, run: Run):
    config, setup, result, truth = _run_inversion(args, run)
    ckpt = result.final_params.copy()
    ckpt.grid_fingerprint = setup.grid_fingerprint()
    summary = _write_result(run, result, truth, config, ckpt)
    print(json.dumps(summary, indent=2, default=_jsonable))
    return config.seed


def cmd_finetune(args, run: Run):
    ckpt = NetworkParams.load(_existing(args.checkpoint))
    run.inputs["checkpoint"] = args.checkpoint
    config, _, result, truth = _run_inversion(args, run, ckpt)
    summary = _write_result(run, result, truth, config)
    print(json.dumps(summary, indent=2, default=_jsonable))
    return config.seed


def region_stats(truth: np.ndarray, est: np.ndarray) -> dict:
    support = truth != 1
    out = {"rel_err": relative_error(truth, est)}
    for name, sel in (("scatterer", support), ("background", ~support)):
        if sel.any():
            diff = est[sel] - truth[sel]
            out[name] = {"cells": int(sel.sum()),
                         "mean_re": float(est[sel].real.mean()),
                         "mean_im": float(est[sel].imag.mean()),
                         "rms_err": float(np.sqrt(np.mean(np.abs(diff) ** 2)))}
    return out


def cmd_eval(args, run: Run):
    truth = load_map(_existing(args.truth))
    est = load_map(_existing(args.estimate))
    if truth.shape != est.shape:
        raise InputError(f"map shapes differ: {truth.shape} vs {est.shape}")
    stats = region_stats(truth, est)
    text = json.dumps(stats, indent=2)
    if args.out:
        _atomic_write(Path(args.out), text)
    print(text)


def cmd_render(args, run: Run):
    eps = load_map(_existing(args.map))
    data = threshold_mask(eps) if args.threshold else eps
    out = render_map(data, args.out, channel=args.channel, color=args.color)
    print(f"wrote {out}")


def _add_inversion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("measurements")
    p.add_argument("setup")
    p.add_argument("out_dir")
    p.add_argument("--config", help="JSON file with InversionConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--stop-tol", dest="stop_tol", type=float)
    p.add_argument("--activation", choices=ACTIVATIONS)
    p.add_argument("--tx-subset", dest="tx_subset", type=int,
                   help="use K evenly spaced transmitters")
    p.add_argument("--truth", help="true permittivity CSV; logs the relative error")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ipdnn", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, help="cap BLAS threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="rasterize a scene and simulate measurements")
    g.add_argument("scene")
    g.add_argument("out_dir")
    g.add_argument("--n-side", dest="n_side", type=int)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--subsample", type=int, default=1,
                   help="k x k points per cell when rasterizing")
    g.add_argument("--fine-grid", dest="fine_grid", action="store_true",
                   help="simulate on a 2x finer grid to avoid the inverse crime")
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("invert", help="reconstruct a permittivity map")
    _add_inversion_flags(p)
    p.add_argument("--init", help="start from this checkpoint")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("pretrain", help="train on defect-free data and save a checkpoint")
    _add_inversion_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="continue from a checkpoint on new data")
    p.add_argument("checkpoint")
    _add_inversion_flags(p)
    p.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="relative error and per-region statistics")
    e.add_argument("truth")
    e.add_argument("estimate")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="write a PGM/PPM heatmap or a PBM mask")
    r.add_argument("map")
    r.add_argument("out")
    r.add_argument("--channel", choices=("re", "im"), default="re")
    r.add_argument("--color", action="store_true", help="PPM heat ramp instead of gray")
    r.add_argument("--threshold", action="store_true", help="render the thresholded mask")
    r.set_defaults(func=cmd_render)
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(args.out_dir) if getattr(args, "out_dir", None) else None
    run = Run(args.command, argv, out_dir)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                seed = args.func(args, run)
        else:
            seed = args.func(args, run)
    except (InputError, FormatError, FileNotFoundError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, FingerprintMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, ForwardModelError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    run.finish(seed)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
