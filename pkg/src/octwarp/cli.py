"""Command-line front end: simulate, correct, evaluate, bench and render."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import set_threads
from .config import ConfigError, load_config
from .core_model import FAST_X, FAST_Y, MotionParameterSet, VolumeGrid
from .evaluation import reproducibility_metrics
from .forward_warp import (NAIVE, SEPARABLE, coefficient_count, naive_scatter_oracle,
                           splat_volume, unit_grid)
from .io import FormatError, read_octd, read_octv, write_octd, write_octv
from .optimizer import OptimizationDiverged, correct, merge_volumes
from .simulator import simulate

log = logging.getLogger("octwarp")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def parse_size(text: str) -> tuple[int, int, int]:
    """Parse ``WxHxD``."""
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise UsageError(f"size must be WxHxD, got {text!r}")
    try:
        w, h, d = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"size must be WxHxD integers, got {text!r}") from None
    if min(w, h, d) < 8:
        raise UsageError("all dimensions must be >= 8")
    return w, h, d


def enface(values: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Axial mean projection of a ``[.., .., z]`` array (valid voxels only)."""
    if valid is None:
        return values.mean(axis=2)
    n = valid.sum(axis=2)
    s = np.where(valid, values, 0.0).sum(axis=2)
    out = np.full(n.shape, np.nan)
    np.divide(s, n, out=out, where=n > 0)
    return out


def to_uint8(img: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    finite = np.isfinite(img)
    if lo is None or hi is None:
        vals = img[finite]
        lo, hi = (float(np.percentile(vals, 1)), float(np.percentile(vals, 99))) if vals.size else (0.0, 1.0)
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    out = np.clip((np.where(finite, img, lo) - lo) * scale, 0, 255)
    return np.round(out).astype(np.uint8)


def red_cyan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """24-bit composite: ``a`` in red, ``b`` in green and blue (jointly scaled)."""
    both = np.concatenate([a[np.isfinite(a)], b[np.isfinite(b)]])
    lo, hi = (float(np.percentile(both, 1)), float(np.percentile(both, 99))) if both.size else (0.0, 1.0)
    ra, rb = to_uint8(a, lo, hi), to_uint8(b, lo, hi)
    return np.stack([ra, rb, rb], axis=-1)


def save_png(path, img: np.ndarray) -> None:
    from PIL import Image

    # grid arrays are [x, y]; images are rows of y
    arr = np.ascontiguousarray(np.swapaxes(img, 0, 1))
    Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(path, optimize=False)


def _group_enface(volumes, params, grid, s_mins, axis):
    imgs = []
    for v, p, s in zip(volumes, params, s_mins):
        if v.fast_axis == axis:
            t = splat_volume(v, p, grid, s)
            imgs.append(enface(t.values, t.valid))
    if not imgs:
        return None
    stack = np.stack(imgs)
    ok = np.isfinite(stack)
    n = ok.sum(axis=0)
    out = np.full(n.shape, np.nan)
    np.divide(np.where(ok, stack, 0.0).sum(axis=0), n, out=out, where=n > 0)
    return out


def grid_volume(values: np.ndarray, valid: np.ndarray, pixel_um: float, spacing_z: float) -> VolumeGrid:
    """Wrap a ``[gx, gy, z]`` grid array as a volume (fast = gx, slow = gy)."""
    fill = float(values[valid].min()) if valid.any() else 0.0
    vox = np.where(valid, values, fill).transpose(1, 0, 2)[:, None, :, :]
    h, _, w, _ = vox.shape
    times = np.arange(h * w, dtype=np.float64).reshape(h, 1, w)
    return VolumeGrid(vox.astype(np.float32), times, pixel_um, pixel_um, spacing_z, FAST_X)


def _write_text(path: Path, lines) -> None:
    path.write_text("".join(f"{line}\n" for line in lines))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sim_cfg = cfg.simulator
    if args.size:
        from dataclasses import replace

        w, h, d = parse_size(args.size)
        sim_cfg = replace(sim_cfg, width=w, height=h, depth=d)
    if args.volumes < 1:
        raise UsageError("--volumes must be >= 1")
    if args.seed < 0:
        raise UsageError("--seed must be >= 0")
    if args.volumes < 2:
        log.warning("need >= 2 volumes for an orthogonal pair; correct will refuse this output")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = simulate(sim_cfg, seed=args.seed, n_volumes=args.volumes)
    for i, (v, t) in enumerate(zip(sim.volumes, sim.truths)):
        write_octv(out / f"vol{i}_{v.fast_axis}.octv", v)
        write_octd(out / f"truth{i}_{v.fast_axis}.octd", t)
    tr = sim.trace
    np.savetxt(out / "trace.csv", np.column_stack([tr.t, tr.x, tr.y, tr.z, tr.theta]),
               delimiter=",", header="t_s,x_um,y_um,z_um,theta_rad", comments="", fmt="%.17g")
    log.info("wrote %d volumes to %s", len(sim.volumes), out)
    return 0


def cmd_correct(args) -> int:
    cfg = load_config(args.config).optimizer
    t_io = time.perf_counter()
    volumes = []
    for path in args.inputs:
        try:
            volumes.append(read_octv(path))
        except (OSError, FormatError) as exc:
            raise UsageError(f"cannot read {path}: {exc}") from None
    io_time = time.perf_counter() - t_io
    axes = {v.fast_axis for v in volumes}
    if len(volumes) < 2 or axes != {FAST_X, FAST_Y}:
        raise UsageError("need >= 2 volumes with both fast axes for an orthogonal pair")
    t0 = time.perf_counter()
    result = correct(volumes, cfg)
    compute = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path, f in zip(args.inputs, result.fields):
        write_octd(out / f"{Path(path).stem}.disp.octd", f)
    values, valid = merge_volumes(result)
    pixel_um = result.grid.pixel_size / result.grid.scale
    write_octv(out / "merged.octv", grid_volume(values, valid, pixel_um, result.volumes[0].spacing_z),
               ascan_rate=1.0)
    zero = [MotionParameterSet.for_volume(v, cfg.alpha0) for v in result.volumes]
    for tag, params in (("before", zero), ("after", result.params)):
        a = _group_enface(result.volumes, params, result.grid, result.s_min, FAST_X)
        b = _group_enface(result.volumes, params, result.grid, result.s_min, FAST_Y)
        save_png(out / f"enface_{tag}.png", red_cyan(a, b))
    save_png(out / "enface_merged.png", to_uint8(enface(values, valid)))
    lines = [f"inputs = {' '.join(str(p) for p in args.inputs)}"]
    for rep in result.reports:
        lines.append(f"level {rep.level}: objective_entry = {rep.objective_entry:.9g} "
                     f"objective_exit = {rep.objective_exit:.9g} "
                     f"objective_exit_entry_targets = {rep.objective_exit_entry_targets:.9g} "
                     f"refreshes = {rep.outer_iterations} converged = {int(rep.converged)} "
                     f"max_change = {rep.max_change:.6g} restarts = {rep.restarts}")
        if rep.non_overlap:
            lines.append(f"NON_OVERLAP level {rep.level}")
    lines.append(f"non_overlap = {int(result.non_overlap)}")
    lines.append(f"runtime_s = {result.runtime:.3f}")
    lines.append(f"runtime_total_excl_io_s = {compute:.3f}")
    lines.append(f"input_io_s = {io_time:.3f}")
    _write_text(out / "correct.log", lines)
    if result.non_overlap:
        log.warning("NON_OVERLAP: some volume had no valid overlap with its targets")
    log.info("correction finished in %.2f s (excluding disk I/O)", result.runtime)
    return 0


def cmd_evaluate(args) -> int:
    try:
        fa = read_octd(args.fieldA, args.fast_axis)
        fb = read_octd(args.fieldB, args.fast_axis)
    except (OSError, FormatError) as exc:
        raise UsageError(str(exc)) from None
    if fa.dims != fb.dims:
        raise UsageError(f"field dimensions differ: {fa.dims} vs {fb.dims}")
    metrics = reproducibility_metrics(fa, fb, args.mode)
    lines = [f"{k}={v}" for k, v in metrics.items()]
    sys.stdout.write("".join(f"{line}\n" for line in lines))
    if args.out:
        _write_text(Path(args.out), lines)
    return 0


def bench(n: int, scheme: str = "both", repeats: int = 1, seed: int = 0) -> dict:
    """Warp an ``n``-cubed random volume with identity motion and report
    instrumented coefficient counts and the best wall-clock time per scheme."""
    rng = np.random.default_rng(seed)
    vol = VolumeGrid(rng.normal(size=(n, 1, n, n)), np.arange(n * n, dtype=np.float64).reshape(n, 1, n) * 1e-4,
                     1.0, 1.0, 1.0)
    params = MotionParameterSet.for_volume(vol, 0.0)
    grid = unit_grid([vol])
    schemes = (SEPARABLE, NAIVE) if scheme == "both" else (scheme,)
    fn = {SEPARABLE: splat_volume, NAIVE: naive_scatter_oracle}
    out = {"n": n}
    for s in schemes:
        fn[s](vol, params, grid)  # compile and warm up
        best, count = np.inf, 0
        for _ in range(max(1, repeats)):
            t = time.perf_counter()
            res = fn[s](vol, params, grid)
            best = min(best, time.perf_counter() - t)
            count = res.coef_count
        out[f"{s}_count"] = int(count)
        out[f"{s}_formula"] = coefficient_count(n, s)
        out[f"{s}_seconds"] = best
    if len(schemes) == 2:
        out["count_ratio"] = out["naive_count"] / out["separable_count"]
        out["speedup"] = out["naive_seconds"] / out["separable_seconds"]
    return out


def cmd_bench(args) -> int:
    if args.size < 16:
        raise UsageError("--size must be >= 16")
    res = bench(args.size, args.scheme, args.repeats)
    sys.stdout.write("".join(f"{k}={v}\n" for k, v in res.items()))
    return 0


def cmd_render(args) -> int:
    try:
        vol = read_octv(args.input)
    except (OSError, FormatError) as exc:
        raise UsageError(str(exc)) from None
    img = vol.voxels.astype(np.float64).mean(axis=(1, 3))  # [slow, fast]
    if vol.fast_axis == FAST_X:
        img = img.T  # -> [x, y]
    save_png(args.out, to_uint8(img))
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octwarp", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: OCTWARP_THREADS or all cores)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic orthogonal scan set")
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--volumes", type=int, default=2)
    s.add_argument("--size", default=None, help="WxHxD (default from config)")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("correct", help="jointly motion-correct OCTV volumes")
    c.add_argument("inputs", nargs="+")
    c.add_argument("--config", default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_correct)

    e = sub.add_parser("evaluate", help="reproducibility metrics of two displacement fields")
    e.add_argument("--fieldA", required=True)
    e.add_argument("--fieldB", required=True)
    e.add_argument("--mode", choices=("rigid", "affine"), default="affine")
    e.add_argument("--fast-axis", choices=(FAST_X, FAST_Y), default=FAST_X,
                   help="fast axis of the source volume (not stored in the field files)")
    e.add_argument("--out", default=None, help="also write the summary here")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="separable vs naive forward warp")
    b.add_argument("--size", type=int, default=64)
    b.add_argument("--scheme", choices=(SEPARABLE, NAIVE, "both"), default="both")
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("render", help="en face PNG of an OCTV volume")
    r.add_argument("input")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    try:
        set_threads(args.threads)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return 2
    except (OptimizationDiverged, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
