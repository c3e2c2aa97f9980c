"""Command-line front end.

Exit codes: 0 success, 1 usage or malformed input, 2 render failure,
3 non-finite loss during fitting, 4 invariant failure in ``validate``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INPUT, EXIT_RENDER, EXIT_NONFINITE, EXIT_INVARIANT = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _threads(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid thread count {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return n


def set_threads(n: int | None) -> int:
    """Cap numba's worker count; ``None`` falls back to POWERFOAM_THREADS."""
    import numba
    if n is None:
        env = os.environ.get("POWERFOAM_THREADS")
        if env is None:
            return numba.get_num_threads()
        try:
            n = _threads(env)
        except argparse.ArgumentTypeError as e:
            raise CliError(f"POWERFOAM_THREADS: {e}") from None
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


def _load_scene(path):
    from .io import FormatError, load_scene
    try:
        return load_scene(path)
    except FormatError as e:
        raise CliError(str(e)) from e


def _load_camera(path):
    from .io import FormatError, load_camera
    try:
        return load_camera(path)
    except FormatError as e:
        raise CliError(str(e)) from e


def _write(fn, obj, path) -> None:
    try:
        fn(obj, path)
    except OSError as e:
        raise CliError(f"cannot write {os.fspath(path)!r}: {e.strerror or e}", EXIT_RENDER) from e


# ---------------------------------------------------------------------------
# verbs


def cmd_render(args) -> int:
    from .geometry import cech_complex, power_dual
    from .rasterizer import cull_to_tiles, drawn_cells, rasterize
    from .raytracer import TraversalDivergenceError, trace_image
    from .render_core import write_ppm
    scene = _load_scene(args.scene)
    cam = _load_camera(args.camera)
    try:
        if args.mode == "raytrace":
            img, st = trace_image(scene, power_dual(scene.pr), cam)
            print(f"rays {st.rays}  cells visited {st.cells_visited}  mean per ray {st.mean_cells_per_ray:.3f}")
        else:
            cech = cech_complex(scene.pr)
            tiles = cull_to_tiles(cam, scene.pr, cells=drawn_cells(scene, cech))
            img = rasterize(scene, cech, cam, tiles=tiles)
            per_tile = np.diff(tiles.indptr)
            print(f"tiles {tiles.n_tiles}  entries {int(per_tile.sum())}  mean per tile {per_tile.mean():.3f}"
                  f"  max per tile {int(per_tile.max(initial=0))}")
    except TraversalDivergenceError as e:
        raise CliError(f"render failed: {e}", EXIT_RENDER) from e
    if not np.all(np.isfinite(img.pixels)):
        raise CliError("render failed: non-finite pixel values", EXIT_RENDER)
    _write(write_ppm, img, args.out)
    return EXIT_OK


def cmd_gen(args) -> int:
    from .io import save_scene
    from .presets import make_preset
    _write(save_scene, make_preset(args.preset, args.seed), args.out)
    return EXIT_OK


def load_targets(folder) -> list:
    """``(camera, image)`` pairs from ``name.ppm`` + ``name.json`` files,
    sorted by name."""
    from .render_core import read_ppm
    folder = Path(folder)
    if not folder.is_dir():
        raise CliError(f"targets directory {os.fspath(folder)!r} does not exist")
    views = []
    for img_path in sorted(folder.glob("*.ppm")):
        cam_path = img_path.with_suffix(".json")
        if not cam_path.is_file():
            raise CliError(f"missing camera file {os.fspath(cam_path)!r} for image {img_path.name!r}")
        cam = _load_camera(cam_path)
        try:
            img = read_ppm(img_path)
        except (OSError, ValueError) as e:
            raise CliError(str(e)) from e
        if (img.width, img.height) != (cam.width, cam.height):
            raise CliError(f"{img_path.name}: image is {img.width}x{img.height} but camera is "
                           f"{cam.width}x{cam.height}")
        views.append((cam, img))
    if len(views) < 2:
        raise CliError(f"targets directory {os.fspath(folder)!r} holds {len(views)} image+camera pairs; need 2")
    return views


def cmd_fit(args) -> int:
    from .io import save_scene
    from .optimizer import NonFiniteLossError, TrainConfig, fit, json_logger
    scene = _load_scene(args.init)
    views = load_targets(args.targets)
    cfg = TrainConfig()
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                cfg = TrainConfig.from_dict(json.load(fh))
        except OSError as e:
            raise CliError(f"cannot read config {args.config!r}: {e.strerror or e}") from e
        except (ValueError, TypeError, IndexError) as e:
            raise CliError(f"{args.config!r}: {e}") from e
    log_path = args.log if args.log is not None else os.fspath(args.out) + ".log.jsonl"
    try:
        log = json_logger(stream=sys.stdout, path=log_path)
    except OSError as e:
        raise CliError(f"cannot write {log_path!r}: {e.strerror or e}") from e
    try:
        scene = fit(scene, views, cfg, log=log)
    except NonFiniteLossError as e:
        raise CliError(str(e), EXIT_NONFINITE) from e
    finally:
        log.close()
    _write(save_scene, scene, args.out)
    print(f"cells {scene.n_cells}  log {log_path}")
    return EXIT_OK


def cmd_steiner(args) -> int:
    from .checks import benchmark_cameras, mean_intersections
    from .io import save_scene
    from .raytracer import TraversalDivergenceError, insert_steiner
    scene = _load_scene(args.scene)
    cams = benchmark_cameras(scene)
    try:
        out = insert_steiner(scene, args.seed)
        before = mean_intersections(scene, cams)
        after = mean_intersections(out, cams)
    except TraversalDivergenceError as e:
        raise CliError(f"render failed: {e}", EXIT_RENDER) from e
    _write(save_scene, out, args.out)
    print(f"inserted {out.n_cells - scene.n_cells}")
    print(f"mean ray-cell intersections  before {before:.4f}  after {after:.4f}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .checks import run_checks
    from .raytracer import TraversalDivergenceError
    scene = _load_scene(args.scene)
    try:
        rows = run_checks(scene, seed=args.seed)
    except TraversalDivergenceError as e:
        raise CliError(f"render failed: {e}", EXIT_RENDER) from e
    width = max(len(r.name) for r in rows)
    for r in rows:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    failed = [r for r in rows if not r.passed]
    if failed:
        print(f"invariant failed: {failed[0].name}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_stats(args) -> int:
    from .geometry import alpha_complex, cech_complex, power_dual
    scene = _load_scene(args.scene)
    dual = power_dual(scene.pr)
    lo, hi = scene.world_box
    print(f"cells {scene.n_cells}  steiner {int(scene.is_steiner.sum())}  detail sites per cell {scene.k}")
    if scene.n_cells:
        r = scene.radii
        print(f"radius min {r.min():.6g}  mean {r.mean():.6g}  max {r.max():.6g}")
        print(f"density min {scene.densities.min():.6g}  mean {scene.densities.mean():.6g}"
              f"  max {scene.densities.max():.6g}")
    print(f"world box {np.round(lo, 6).tolist()} {np.round(hi, 6).tolist()}")
    print(f"edges  power dual {len(dual)}  cech {len(cech_complex(scene.pr))}"
          f"  alpha {len(alpha_complex(scene.pr, dual))}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .presets import PRESETS
    common = argparse.ArgumentParser(add_help=False)
    thread_help = "worker thread cap (default: POWERFOAM_THREADS or all cores)"
    common.add_argument("--threads", type=_threads, default=argparse.SUPPRESS, help=thread_help)
    p = _Parser(prog="powerfoam", description="Render, fit and check power-diagram radiance fields.")
    p.add_argument("--threads", type=_threads, default=None, help=thread_help)
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("render", parents=[common], help="render a scene to a PPM image")
    s.add_argument("scene")
    s.add_argument("camera")
    s.add_argument("--mode", choices=("raytrace", "raster"), default="raytrace")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("gen", parents=[common], help="write a synthetic preset scene")
    s.add_argument("preset", choices=PRESETS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen)

    s = sub.add_parser("fit", parents=[common], help="optimize a scene against posed images")
    s.add_argument("targets", help="directory of name.ppm + name.json pairs")
    s.add_argument("init", help="initial scene")
    s.add_argument("--config", help="JSON with TrainConfig fields")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="training log path (default: OUT.log.jsonl)")
    s.set_defaults(fn=cmd_fit)

    s = sub.add_parser("steiner", parents=[common], help="insert Steiner cells in empty space")
    s.add_argument("scene")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_steiner)

    s = sub.add_parser("validate", parents=[common], help="run the invariant suite")
    s.add_argument("scene")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_validate)

    s = sub.add_parser("stats", parents=[common], help="print scene statistics")
    s.add_argument("scene")
    s.set_defaults(fn=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        set_threads(args.threads)
        return args.fn(args)
    except CliError as e:
        print(f"powerfoam {args.verb}: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
