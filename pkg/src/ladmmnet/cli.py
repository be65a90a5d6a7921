"""``ladmmnet`` command line: simulate, train, fuse, cs-train, cs-recon, evaluate.

Structured settings come from JSON config files validated against a schema
(unknown keys are rejected); flags carry only paths and small overrides.
Every random draw is tied to a named seed so a rerun reproduces its
artifacts byte for byte.

Set ``LADMMNET_THREADS`` to cap the BLAS/OpenMP worker threads.
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("LADMMNET_THREADS")
if _THREADS:
    # must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import jsonschema  # noqa: E402
import numpy as np  # noqa: E402

from . import cs  # noqa: E402
from .cassi import DualArm, hs_operator, load_apertures, ms_operator, save_apertures, shots_for_ratio  # noqa: E402
from .cube_io import read_cube, read_gray, write_cube, write_gray, write_rgb  # noqa: E402
from .metrics import psnr, sam, ssim  # noqa: E402
from .network import CheckpointError, init_params, load_checkpoint, net_forward  # noqa: E402
from .solver import SolverConfig, ladmm_solve, objective, resolve_alpha  # noqa: E402
from .synthetic import synthetic_cube  # noqa: E402
from .training import TrainingConfig, train, write_history  # noqa: E402

log = logging.getLogger("ladmmnet")

EXIT_ERROR = 1
EXIT_CONFIG = 2


class CliError(Exception):
    """Contract violation reported as a one-line JSON object on stderr."""

    def __init__(self, kind: str, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ---------------------------------------------------------------- configs

_INT = {"type": "integer"}
_SEED = {"type": "integer", "minimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_RATIO = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_SNR = {"type": ["number", "null"]}
_OPT_POS = {"type": ["number", "null"], "exclusiveMinimum": 0}

ACQUISITION = {
    "p": (_POS_INT, 4),
    "q": (_POS_INT, 2),
    "ratio": (_RATIO, 0.25),
    "shots_hs": ({"type": ["integer", "null"], "minimum": 1}, None),
    "shots_ms": ({"type": ["integer", "null"], "minimum": 1}, None),
    "snr_db": (_SNR, None),
    "aperture_seed": (_SEED, 0),
    "noise_seed": (_SEED, 0),
}

SCHEMAS = {
    "simulate": dict(ACQUISITION),
    "train": dict(
        ACQUISITION,
        K=(_POS_INT, 5),
        F=(_POS_INT, 32),
        lr=(_NONNEG, 5e-4),
        epochs=({"type": "integer", "minimum": 0}, 256),
        batch=(_POS_INT, 1),
        gamma=(_NONNEG, 0.1),
        init_seed=(_SEED, 0),
        shuffle_seed=(_SEED, 0),
        grad_clip=(_OPT_POS, None),
        checkpoint_every=({"type": "integer", "minimum": 0}, 0),
        alpha_init=(_OPT_POS, None),
        normalize=({"type": "boolean"}, False),
    ),
    "solver": {
        "alpha": (_OPT_POS, None),
        "rho": ({"type": "number", "exclusiveMinimum": 0}, 0.1),
        "lambda1": (_NONNEG, 1.0),
        "lambda2": (_NONNEG, 1e-3),
        "max_iters": (_POS_INT, 500),
        "tol": (_NONNEG, 1e-6),
    },
    "cs-train": {
        "ratio": (_RATIO, 0.25),
        "matrix_seed": (_SEED, 0),
        "K": (_POS_INT, 5),
        "F": (_POS_INT, 32),
        "init_seed": (_SEED, 0),
        "n_blocks": (_POS_INT, 512),
        "block_stride": (_POS_INT, 11),
        "sample_seed": (_SEED, 0),
        "lr": (_NONNEG, 5e-4),
        "epochs": ({"type": "integer", "minimum": 0}, 100),
        "batch": (_POS_INT, 16),
        "gamma": (_NONNEG, 0.1),
        "shuffle_seed": (_SEED, 0),
        "grad_clip": (_OPT_POS, None),
        "alpha_init": (_OPT_POS, None),
    },
}


def _schema(name: str) -> dict:
    return {
        "type": "object",
        "properties": {k: v[0] for k, v in SCHEMAS[name].items()},
        "additionalProperties": False,
    }


def load_config(path, name: str) -> dict:
    """Read, validate and default-fill a JSON config (``path=None`` gives all defaults)."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError("io_error", f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise CliError("config_error", f"{path}: invalid JSON ({exc})", EXIT_CONFIG) from exc
    try:
        jsonschema.validate(raw, _schema(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError("config_error", f"{path}: {where}: {exc.message}", EXIT_CONFIG) from exc
    return {k: raw.get(k, default) for k, (_, default) in SCHEMAS[name].items()}


def _snr(value):
    return math.inf if value is None else float(value)


def build_ops(dims, cfg: dict) -> DualArm:
    """Both arms from an acquisition config; explicit shot counts override the ratio."""
    M, N, L = dims
    p, q = cfg["p"], cfg["q"]
    if M % p or N % p:
        raise CliError("config_error", f"p={p} does not divide the spatial size {M}x{N}", EXIT_CONFIG)
    if L % q:
        raise CliError("config_error", f"q={q} does not divide {L} bands", EXIT_CONFIG)
    w_hs = cfg["shots_hs"] or shots_for_ratio(cfg["ratio"], L)
    w_ms = cfg["shots_ms"] or shots_for_ratio(cfg["ratio"], L // q)
    seed = cfg["aperture_seed"]
    return DualArm(hs_operator(dims, p, w_hs, seed), ms_operator(dims, q, w_ms, seed + 1))


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.2f}"


# ---------------------------------------------------------------- commands

def cmd_synthesize(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = tuple(args.dims)
    for i in range(args.count):
        write_cube(synthetic_cube(dims, args.seed + i), out / f"scene_{i:03d}.scub")
    log.info("wrote %d synthetic %s cubes to %s", args.count, dims, out)


def cmd_simulate(args) -> None:
    cfg = load_config(args.config, "simulate")
    cube = read_cube(args.input)
    ops = build_ops(cube.shape, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    y_hs, y_ms = ops.simulate(cube.data, _snr(cfg["snr_db"]), cfg["noise_seed"])
    write_cube(cube.data, out / "truth.scub")
    write_cube(y_hs, out / "y_hs.scub")
    write_cube(y_ms, out / "y_ms.scub")
    hs_manifest = save_apertures(ops.hs, out / "apertures")
    ms_manifest = save_apertures(ops.ms, out / "apertures")
    _write_json(out / "manifest.json", {
        "dims": list(cube.shape),
        "p": ops.hs.p,
        "q": ops.ms.q,
        "ratio": cfg["ratio"],
        "shots_hs": ops.hs.apertures.shots,
        "shots_ms": ops.ms.apertures.shots,
        "snr_db": cfg["snr_db"],
        "aperture_seed": cfg["aperture_seed"],
        "noise_seed": cfg["noise_seed"],
        "apertures_hs": str(hs_manifest.relative_to(out)),
        "apertures_ms": str(ms_manifest.relative_to(out)),
        "y_hs": "y_hs.scub",
        "y_ms": "y_ms.scub",
        "truth": "truth.scub",
    })


def _load_dataset(data_dir, cfg, normalize):
    paths = sorted(Path(data_dir).glob("*.scub"))
    if not paths:
        raise CliError("data_error", f"no .scub cubes in {data_dir}")
    cubes = [read_cube(p, normalize=normalize) for p in paths]
    dims = cubes[0].shape
    for p, c in zip(paths, cubes):
        if c.shape != dims:
            raise CliError("dimension_mismatch", f"{p.name} has dims {c.shape}, expected {dims}")
    ops = build_ops(dims, cfg)
    snr = _snr(cfg["snr_db"])
    # each cube gets its own noise pair: noise_seed + 2i (HS) and noise_seed + 2i + 1 (MS)
    dataset = [(c.data, ops.simulate(c.data, snr, cfg["noise_seed"] + 2 * i)) for i, c in enumerate(cubes)]
    return dims, ops, dataset


def cmd_train(args) -> None:
    cfg = load_config(args.config, "train")
    dims, ops, dataset = _load_dataset(args.data_dir, cfg, cfg["normalize"])
    kw = {} if cfg["alpha_init"] is None else {"alpha": cfg["alpha_init"]}
    params = init_params(dims, cfg["F"], cfg["K"], seed=cfg["init_seed"], **kw)
    params.meta.update(kind="fusion", acquisition=ops.manifest() | {"snr_db": cfg["snr_db"]}, config=cfg)
    tcfg = TrainingConfig(learning_rate=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch"],
                          gamma=cfg["gamma"], seed=cfg["shuffle_seed"], grad_clip=cfg["grad_clip"],
                          checkpoint_every=cfg["checkpoint_every"])

    def progress(epoch, data, inv, total):
        log.info("epoch %d/%d data %.6g inv %.6g total %.6g", epoch, tcfg.epochs, data, inv, total)

    params, history = train(params, dataset, ops, tcfg, checkpoint_path=args.out, progress=progress)
    write_history(history, args.history or f"{args.out}.history.csv")


def _load_measurements(directory):
    directory = Path(directory)
    try:
        meta = json.loads((directory / "manifest.json").read_text())
    except OSError as exc:
        raise CliError("io_error", f"no measurement manifest in {directory}: {exc}") from exc
    ops = DualArm(load_apertures(directory / meta["apertures_hs"]), load_apertures(directory / meta["apertures_ms"]))
    y = (read_cube(directory / meta["y_hs"]).data, read_cube(directory / meta["y_ms"]).data)
    return meta, ops, y


def cmd_fuse(args) -> None:
    meta, ops, y = _load_measurements(args.measurements)
    dims = tuple(meta["dims"])
    L = dims[2]
    bands = tuple(args.rgb_bands) if args.rgb_bands else (L - 1, L // 2, 0)
    if any(not 0 <= b < L for b in bands):
        raise CliError("config_error", f"--rgb-bands must lie in 0..{L - 1}, got {list(bands)}", EXIT_CONFIG)
    start = time.perf_counter()
    if args.checkpoint:
        try:
            params = load_checkpoint(args.checkpoint)
        except CheckpointError as exc:
            raise CliError("checkpoint_error", str(exc)) from exc
        if params.dims != dims:
            raise CliError("dimension_mismatch",
                           f"checkpoint dims {list(params.dims)} do not match measurement dims {list(dims)}")
        est, _ = net_forward(params, y, ops)
    else:
        scfg = SolverConfig(**load_config(args.solver_config, "solver"))
        scfg = resolve_alpha(ops, scfg)
        trace = [] if args.trace else None
        est = ladmm_solve(y, ops, scfg, trace=trace)
        if args.trace:
            with open(args.trace, "w") as fh:
                fh.write("iteration,objective,relative_change\n")
                for k, obj, change in trace:
                    fh.write(f"{k},{obj:.10g},{change:.6g}\n")
        log.info("final objective %.6g", objective(est, y, ops, scfg))
    log.info("fusion took %.3f s", time.perf_counter() - start)
    write_cube(est, args.out)
    if args.rgb:
        write_rgb(est, args.rgb, bands=bands)


def cmd_cs_train(args) -> None:
    cfg = load_config(args.config, "cs-train")
    tcfg = TrainingConfig(learning_rate=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch"],
                          gamma=cfg["gamma"], seed=cfg["shuffle_seed"], grad_clip=cfg["grad_clip"])
    ccfg = cs.CsConfig(ratio=cfg["ratio"], matrix_seed=cfg["matrix_seed"], n_layers=cfg["K"],
                       feature_maps=cfg["F"], init_seed=cfg["init_seed"], n_blocks=cfg["n_blocks"],
                       block_stride=cfg["block_stride"], sample_seed=cfg["sample_seed"],
                       alpha_init=cfg["alpha_init"], training=tcfg)

    def progress(epoch, data, inv, total):
        log.info("epoch %d/%d data %.6g inv %.6g total %.6g", epoch, tcfg.epochs, data, inv, total)

    try:
        _, history, H = cs.cs_train(args.data_dir, cfg["ratio"], ccfg, checkpoint_path=args.out, progress=progress)
    except ValueError as exc:
        raise CliError("data_error", str(exc)) from exc
    cs.save_matrix_manifest(H, f"{args.out}.matrix.json")
    write_history(history, args.history or f"{args.out}.history.csv")


def cmd_cs_recon(args) -> None:
    if args.checkpoint:
        try:
            params, H = cs.load_cs_checkpoint(args.checkpoint, args.ratio)
        except (CheckpointError, ValueError) as exc:
            raise CliError("checkpoint_error", str(exc)) from exc
        if args.matrix_seed is not None and args.matrix_seed != H.seed:
            raise CliError("checkpoint_error",
                           f"checkpoint was trained with matrix seed {H.seed}, not {args.matrix_seed}")
    else:
        if args.ratio is None or args.matrix_seed is None:
            raise CliError("usage_error", "without --checkpoint both --ratio and --matrix-seed are required",
                           EXIT_CONFIG)
        params = None
        H = cs.gaussian_matrix(cs.measurements_for_ratio(args.ratio), cs.BLOCK * cs.BLOCK, args.matrix_seed)
    image = read_gray(args.input)
    rec = cs.cs_reconstruct(cs.measure_image(image, H), H, None if args.baseline else params)
    write_gray(rec, args.output)
    log.info("PSNR %.2f dB", psnr(image.data, np.clip(rec.data, 0, 1)))


def _read_any(path):
    path = Path(path)
    if path.suffix.lower() == ".scub":
        return read_cube(path).data
    return read_gray(path).data


def cmd_evaluate(args) -> None:
    ref = _read_any(args.ref)
    rows = []
    for est_path in args.est:
        est = _read_any(est_path)
        if est.shape != ref.shape:
            raise CliError("dimension_mismatch", f"{est_path} has shape {est.shape}, reference {ref.shape}")
        p = psnr(ref, est, args.peak)
        s = ssim(ref, est, args.peak)
        angle = sam(ref, est) if ref.ndim == 3 else float("nan")
        runtime = "" if args.runtime is None else f"{args.runtime:.3f}"
        rows.append(f"{Path(est_path).stem},{_fmt_db(p)},{s:.4f},{angle:.4f},{runtime}")
    text = "name,psnr,ssim,sam,runtime_s\n" + "".join(r + "\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ladmmnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="write synthetic spectral scenes")
    s.add_argument("--dims", type=int, nargs=3, metavar=("M", "N", "L"), required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("simulate", help="dual-arm measurements of one cube")
    s.add_argument("--config")
    s.add_argument("--input", required=True, help="ground-truth .scub cube")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train a fusion network on a directory of cubes")
    s.add_argument("--config")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--history", help="history CSV (default <out>.history.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fuse", help="reconstruct a cube from simulated measurements")
    s.add_argument("--measurements", required=True, help="directory written by simulate")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", help="trained network")
    g.add_argument("--solver-config", help="classical LADMM config (JSON); use '{}'-style file for defaults")
    s.add_argument("--trace", help="per-iteration objective CSV (classical solver only)")
    s.add_argument("--out", required=True, help="output .scub cube")
    s.add_argument("--rgb", help="optional false-colour PNG")
    s.add_argument("--rgb-bands", type=int, nargs=3, metavar=("R", "G", "B"),
                   help="band indices for the PNG channels (default: last, middle, first)")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("cs-train", help="train the block compressive-sensing network")
    s.add_argument("--config")
    s.add_argument("--data-dir", required=True, help="directory of grayscale images")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--history")
    s.set_defaults(func=cmd_cs_train)

    s = sub.add_parser("cs-recon", help="measure and reconstruct a grayscale image block by block")
    s.add_argument("--checkpoint")
    s.add_argument("--ratio", type=float)
    s.add_argument("--matrix-seed", type=int)
    s.add_argument("--baseline", action="store_true", help="output the H^T y back-projection")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_cs_recon)

    s = sub.add_parser("evaluate", help="PSNR/SSIM/SAM of estimates against a reference")
    s.add_argument("--ref", required=True)
    s.add_argument("--est", required=True, nargs="+")
    s.add_argument("--peak", type=float, default=1.0)
    s.add_argument("--runtime", type=float, help="reconstruction time to report, seconds")
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except CliError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "message": str(exc)}) + "\n")
        return exc.code
    except (OSError, ValueError, FloatingPointError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
