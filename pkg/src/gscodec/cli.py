"""``gscodec`` command line: compress, decompress, inspect, eval, train2d, assign."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import codec, metrics, ply_io
from .bitq import BitQuantPolicy
from .model import GROUPS, GaussianCloud, ParamGroup
from .vq import Init, QatSchedule, VqConfig, assign_frozen, fit_cloud

log = logging.getLogger("gscodec")

EXIT_OK = 0
EXIT_IO = 3
EXIT_BAD_PLY = 4
EXIT_BAD_CONTAINER = 5
EXIT_INVALID = 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _thread_limit(threads: int | None):
    if threads is None:
        env = os.environ.get("GSCODEC_THREADS")
        threads = int(env) if env else None
    if not threads:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))
    elif not args.quiet:
        print(text)


def _json_default(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _finite(x: float):
    return x if math.isfinite(x) else "inf"


def _read_cloud(path: str) -> GaussianCloud:
    try:
        return ply_io.load_ply(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc
    except ply_io.PlyError as exc:
        raise CliError(f"malformed PLY {path}: {exc}", EXIT_BAD_PLY) from exc


def _read_container(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc


def _decode(blob: bytes, path: str):
    try:
        return codec.decode(blob)
    except codec.ContainerError as exc:
        raise CliError(f"bad container {path}: {exc}", EXIT_BAD_CONTAINER) from exc


def _write_bytes(path: str, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc


def _policy(args) -> BitQuantPolicy:
    bits = {}
    if args.position_bits != 32:
        bits["position"] = args.position_bits
    if args.opacity_bits != 32:
        bits["logit_opacity"] = args.opacity_bits
    name = "float32" if not bits else f"pos{args.position_bits}-op{args.opacity_bits}"
    return BitQuantPolicy(name, bits)


def _report_dir(args) -> Path | None:
    if not getattr(args, "report_dir", None):
        return None
    path = Path(args.report_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_size_csv(report: codec.SizeReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "bytes", "fraction"])
        for key in ("header", "codebooks", "rle", "indices", "residuals"):
            nbytes = getattr(report, key)
            w.writerow([key, nbytes, f"{nbytes / report.total:.6f}"])
        w.writerow(["total", report.total, "1.000000"])


def _prune_cloud(cloud: GaussianCloud, min_opacity: float | None) -> GaussianCloud:
    if not min_opacity:
        return cloud
    keep = cloud.opacity >= min_opacity
    log.info("pre-pass pruning removed %d of %d Gaussians", int((~keep).sum()), cloud.count)
    return cloud.take(np.flatnonzero(keep))


def _encode(args, cloud, books) -> bytes:
    try:
        return codec.encode(cloud, books, _policy(args), drop_sh=args.drop_sh,
                            rle_group=ParamGroup.parse(args.rle_group))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INVALID) from exc


def _size_payload(args, src_path: str, blob: bytes, report: codec.SizeReport) -> dict:
    in_bytes = os.path.getsize(src_path)
    return {
        "input_bytes": in_bytes, "output_bytes": len(blob),
        "compression_ratio": in_bytes / len(blob), "size": report.as_dict(),
    }


def cmd_compress(args) -> int:
    cloud = _prune_cloud(_read_cloud(args.input), args.prune_min_opacity)
    if cloud.count == 0:
        raise CliError("cloud has no Gaussians to quantize", EXIT_INVALID)
    k = {g: args.k_all or getattr(args, f"k_{g}") for g in ("dc", "sh", "scale", "rot")}
    config = VqConfig(k_dc=k["dc"], k_sh=k["sh"], k_scale=k["scale"], k_rot=k["rot"],
                      lloyd_iters=args.lloyd_iters, init=Init(args.init), seed=args.seed)
    groups = [g for g in GROUPS if not (args.drop_sh and g is ParamGroup.SH)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if args.quiet else "default")
        books = fit_cloud(cloud, config, groups)
    blob = _encode(args, cloud, books)
    _write_bytes(args.output, blob)
    report = codec.container_size_report(blob)
    payload = _size_payload(args, args.input, blob, report)
    out = _report_dir(args)
    if out:
        _write_size_csv(report, out / "size.csv")
        _plot_breakdown(report, out / "memory.png")
    _emit(args, payload, f"{args.input} -> {args.output}: {payload['input_bytes']:,d} -> {len(blob):,d} bytes "
                         f"(ratio {payload['compression_ratio']:.2f}x)\n" + metrics.format_breakdown(report))
    return EXIT_OK


def cmd_decompress(args) -> int:
    blob = _read_container(args.input)
    cloud, _ = _decode(blob, args.input)
    try:
        ply_io.save_ply(cloud, args.output)
    except OSError as exc:
        raise CliError(f"cannot write {args.output}: {exc}", EXIT_IO) from exc
    _emit(args, {"count": cloud.count, "output": args.output}, f"wrote {cloud.count} Gaussians to {args.output}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    blob = _read_container(args.input)
    _, books = _decode(blob, args.input)
    report = codec.container_size_report(blob, args.accounting)
    stats = {g.value: metrics.codebook_stats(b.assignments, b.k) for g, b in books.items()}
    payload = {"header": codec.header_info(blob), "memory": metrics.memory_breakdown(report),
               "codebooks": {name: s.as_dict() for name, s in stats.items()}}
    out = _report_dir(args)
    if out:
        from .plots import plot_code_histograms

        _write_size_csv(report, out / "size.csv")
        _plot_breakdown(report, out / "memory.png")
        with open(out / "codebooks.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "k", "used_codes", "max_share", "entropy_bits", "entropy_bytes", "packed_bytes"])
            for name, s in stats.items():
                d = s.as_dict()
                w.writerow([name, s.k, d["used_codes"], f"{s.max_share:.6f}", f"{s.entropy_bits:.6f}",
                            f"{s.entropy_bytes:.1f}", s.packed_bytes])
        plot_code_histograms({name: s.histogram for name, s in stats.items()}, out / "code_histograms.png")
    lines = [metrics.format_breakdown(report), "", f"{'group':<10}{'k':>7}{'used':>7}{'max share':>11}{'H bits':>8}"]
    for name, s in stats.items():
        lines.append(f"{name:<10}{s.k:>7}{s.as_dict()['used_codes']:>7}{s.max_share:>11.4f}{s.entropy_bits:>8.3f}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def _plot_breakdown(report: codec.SizeReport, path: Path) -> None:
    from .plots import plot_memory_breakdown

    plot_memory_breakdown({"codebooks": report.codebooks, "indices": report.index_bytes,
                           "residuals": report.residuals}, path, f"{report.accounting} accounting")


def cmd_eval(args) -> int:
    from .images import read_png

    dir_a, dir_b = Path(args.dir_a), Path(args.dir_b)
    for d in (dir_a, dir_b):
        if not d.is_dir():
            raise CliError(f"{d} is not a directory", EXIT_IO)
    names_a = sorted(p.name for p in dir_a.glob("*.png"))
    names_b = sorted(p.name for p in dir_b.glob("*.png"))
    if names_a != names_b:
        raise CliError(f"image sets differ: {sorted(set(names_a) ^ set(names_b))[:5]}", EXIT_INVALID)
    if not names_a:
        raise CliError("no PNG images to compare", EXIT_INVALID)
    pairs = [(read_png(dir_a / n), read_png(dir_b / n)) for n in names_a]
    try:
        report = metrics.evaluate(pairs, names_a)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INVALID) from exc
    out = _report_dir(args)
    if out:
        from .plots import plot_psnr_per_image

        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "psnr", "ssim"])
            for n, p, s in zip(report.names, report.psnr_per_image, report.ssim_per_image):
                w.writerow([n, f"{p:.6f}", f"{s:.6f}"])
        plot_psnr_per_image(report.names, report.psnr_per_image, out / "psnr.png")
    payload = {k: ([_finite(x) for x in v] if isinstance(v, list) and k != "names" else
                   (_finite(v) if isinstance(v, float) else v)) for k, v in report.as_dict().items()}
    lines = [f"{n:<30}{p:>10.3f}{s:>10.4f}" for n, p, s in
             zip(report.names, report.psnr_per_image, report.ssim_per_image)]
    lines.append(f"PSNR mean {report.psnr_mean:.3f}  PSNR-AM {report.psnr_am:.3f}  SSIM {report.ssim_mean:.4f}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_train2d(args) -> int:
    from . import splat2d
    from .images import read_png, write_png

    if args.target:
        try:
            target = read_png(args.target)
        except OSError as exc:
            raise CliError(f"cannot read target {args.target}: {exc}", EXIT_IO) from exc
    else:
        gt = splat2d.Scene2D.random(args.synthetic, args.size, args.size, seed=args.seed + 1000)
        target = splat2d.render(gt, args.size, args.size)
    height, width = target.shape[:2]
    init = splat2d.Scene2D.random(args.init_count, width, height, seed=args.seed, opacity_logit=(0.0, 0.5))
    schedule = QatSchedule(total_iters=args.iters, qat_start=args.qat_start, assign_every=args.assign_every,
                           assign_until=max(args.assign_until, args.qat_start),
                           reg_lambda=1e-7 if args.full_scale_lambda else args.reg_lambda,
                           reg_start=args.reg_start, reg_end=args.reg_end, prune_every=args.prune_every,
                           min_opacity=args.min_opacity)
    vq_config = VqConfig(k_dc=args.k_color, k_sh=args.k_color, k_scale=args.k_scale, k_rot=args.k_angle,
                         seed=args.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = splat2d.train(target, init, schedule, vq_config, checkpoint_every=args.checkpoint_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_bytes(str(out / "scene.s2d"), splat2d.save_scene(result.scene))
    with open(out / "trace.csv", "w", newline="") as fh:
        splat2d.write_trace_csv(result.trace, fh)
    write_png(result.image, out / "render.png")
    if not args.target:
        write_png(target, out / "target.png")
    if not args.no_figures:
        from .plots import plot_trace

        plot_trace([r.iter for r in result.trace], [r.psnr for r in result.trace],
                   [r.count for r in result.trace], out / "trace.png")
    last = result.trace[-1]
    payload = {"iters": args.iters, "final_psnr": _finite(last.psnr), "final_count": last.count,
               "final_loss": last.loss, "out": str(out)}
    _emit(args, payload, f"trained {args.iters} iters: PSNR {last.psnr:.2f} dB, {last.count} Gaussians -> {out}")
    return EXIT_OK


def cmd_assign(args) -> int:
    cloud = _read_cloud(args.input)
    blob = _read_container(args.codebooks)
    _, frozen = _decode(blob, args.codebooks)
    groups = [g for g in GROUPS if not (args.drop_sh and g is ParamGroup.SH)]
    try:
        _, books = assign_frozen(cloud, frozen, groups)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INVALID) from exc
    out_blob = _encode(args, cloud, books)
    _write_bytes(args.output, out_blob)
    report = codec.container_size_report(out_blob)
    payload = _size_payload(args, args.input, out_blob, report)
    _emit(args, payload, f"{args.input} -> {args.output} with frozen codebooks from {args.codebooks}: "
                         f"{len(out_blob):,d} bytes (ratio {payload['compression_ratio']:.2f}x)")
    return EXIT_OK


def _add_encode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--position-bits", type=int, choices=(32, 16, 8, 4), default=16,
                   help="absmax bits for position columns; 32 keeps float32 (default 16)")
    p.add_argument("--opacity-bits", type=int, choices=(32, 16, 8, 4), default=8,
                   help="absmax bits for the opacity column; 32 keeps float32 (default 8)")
    p.add_argument("--drop-sh", action="store_true", help="omit spherical harmonics (decoded as zeros)")
    p.add_argument("--rle-group", default="rot", choices=("dc", "sh", "scale", "rot"),
                   help="group whose index stream is stored as run-length counts")


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so that a
    # flag given before the subcommand is not reset by the subparser
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--threads", type=int, default=d(None), help="BLAS worker threads (env GSCODEC_THREADS)")
    p.add_argument("--quiet", action="store_true", default=d(False))
    p.add_argument("--json", action="store_true", default=d(False), help="machine-readable output on stdout")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="gscodec", description=__doc__, parents=[_common_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", parents=[common], help="PLY -> .cgs via post-training K-means")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--k-dc", type=int, default=4096)
    p.add_argument("--k-sh", type=int, default=4096)
    p.add_argument("--k-scale", type=int, default=16384)
    p.add_argument("--k-rot", type=int, default=16384)
    p.add_argument("--k-all", type=int, default=None, help="one codebook size for all four groups")
    p.add_argument("--lloyd-iters", type=int, default=30)
    p.add_argument("--init", choices=[i.value for i in Init], default=Init.KMEANS_PLUS_PLUS.value)
    p.add_argument("--prune-min-opacity", type=float, default=None)
    p.add_argument("--report-dir", default=None, help="write size.csv and memory.png here")
    _add_encode_flags(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", parents=[common], help=".cgs -> PLY")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("inspect", parents=[common], help="memory breakdown and codebook statistics")
    p.add_argument("input")
    p.add_argument("--accounting", choices=("packed", "u32"), default="packed")
    p.add_argument("--report-dir", default=None, help="write CSVs and figures here")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("eval", parents=[common], help="PSNR / PSNR-AM / SSIM between two PNG directories")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train2d", parents=[common], help="2D splatting with quantization-aware training")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--target", help="8-bit PNG target")
    src.add_argument("--synthetic", type=int, default=50, help="render the target from N random Gaussians")
    p.add_argument("--size", type=int, default=32, help="synthetic target side length")
    p.add_argument("--init-count", type=int, default=200)
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--qat-start", type=float, default=2 / 3)
    p.add_argument("--assign-every", type=int, default=100)
    p.add_argument("--assign-until", type=float, default=5 / 6)
    p.add_argument("--reg-lambda", type=float, default=1e-4)
    p.add_argument("--full-scale-lambda", action="store_true",
                   help="use lambda_reg = 1e-7, the value tuned for million-Gaussian 30K-step runs")
    p.add_argument("--reg-start", type=float, default=1 / 2)
    p.add_argument("--reg-end", type=float, default=2 / 3)
    p.add_argument("--prune-every", type=int, default=1000)
    p.add_argument("--min-opacity", type=float, default=0.005)
    p.add_argument("--k-color", type=int, default=4096)
    p.add_argument("--k-scale", type=int, default=16384)
    p.add_argument("--k-angle", type=int, default=16384)
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", default="train2d_out")
    p.set_defaults(func=cmd_train2d)

    p = sub.add_parser("assign", parents=[common], help="encode a PLY against frozen codebooks")
    p.add_argument("input")
    p.add_argument("codebooks", help=".cgs container providing the frozen codebooks")
    p.add_argument("output")
    _add_encode_flags(p)
    p.set_defaults(func=cmd_assign)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except CliError as exc:
        print(f"gscodec {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
