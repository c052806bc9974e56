"""Command-line front end: ``gmmtransfer --source s.png --example e.png --out-dir out``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import colorspace
from .errors import TransferError
from .imageio import load_image, save_image
from .metrics import MetricsReport
from .transfer import MODES, RAW_SIGMA2_INIT, TransferConfig, run_transfer

MAX_ITERS = 999

# config-file key -> flag
_CONFIG_KEYS = {
    "source": "--source",
    "example": "--example",
    "out_dir": "--out-dir",
    "mu": "--mu",
    "alpha": "--alpha",
    "sigma2": "--sigma2",
    "iters": "--iters",
    "knn": "--knn",
    "save_every": "--save-every",
    "metrics": "--metrics",
    "mode": "--mode",
}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gmmtransfer",
        description="Continuous example-based color transfer with a regularized GMM/EM loop.",
    )
    p.add_argument("--source", help="image whose content is kept (PNG or P6 PPM)")
    p.add_argument("--example", help="image providing the color style")
    p.add_argument("--out-dir", dest="out_dir", help="directory for frames and traces")
    p.add_argument("--mu", type=float, default=0.003, help="Laplacian step weight (default 0.003)")
    p.add_argument("--alpha", type=float, default=0.1, help="data step size in (0, 1] (default 0.1)")
    p.add_argument(
        "--sigma2",
        type=float,
        default=RAW_SIGMA2_INIT,
        help="initial variance in raw Lab units, rescaled internally (default 5.0)",
    )
    p.add_argument("--iters", type=int, default=50, help=f"EM iterations, at most {MAX_ITERS}")
    p.add_argument("--knn", type=int, default=10, help="example neighbors per centroid")
    p.add_argument("--save-every", dest="save_every", type=int, default=1)
    p.add_argument("--metrics", action="store_true", help="write metrics.json (SSIM/PSNR vs source)")
    p.add_argument("--mode", choices=MODES, default="truncated")
    p.add_argument("--config", help="file of key=value lines; explicit flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true", help=argparse.SUPPRESS)
    return p


def _config_tokens(parser: argparse.ArgumentParser, path: str) -> list[str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        parser.error(f"--config: cannot read {path}: {exc.strerror}")
    tokens = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            parser.error(f"--config: {path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = _CONFIG_KEYS.get(key.replace("-", "_"))
        if flag is None:
            parser.error(f"--config: {path}:{lineno}: unknown key {key!r}")
        if flag == "--metrics":
            if value.lower() in _TRUE:
                tokens.append(flag)
            elif value.lower() not in _FALSE:
                parser.error(f"--metrics: expected a boolean in {path}, got {value!r}")
        else:
            tokens += [flag, value]
    return tokens


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse flags; exits with status 2 and a message naming the bad flag."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        argv = _config_tokens(parser, known.config) + argv
    args = parser.parse_args(argv)

    for name in ("source", "example", "out_dir"):
        if getattr(args, name) is None:
            parser.error(f"--{name.replace('_', '-')} is required")
    if not 0.0 < args.alpha <= 1.0:
        parser.error(f"--alpha must be in (0, 1], got {args.alpha}")
    if not args.mu >= 0.0:
        parser.error(f"--mu must be >= 0, got {args.mu}")
    if not 1 <= args.iters <= MAX_ITERS:
        parser.error(f"--iters must be in [1, {MAX_ITERS}], got {args.iters}")
    if args.knn < 1:
        parser.error(f"--knn must be >= 1, got {args.knn}")
    if args.save_every < 1:
        parser.error(f"--save-every must be >= 1, got {args.save_every}")
    try:
        args.config_obj = config_from_args(args)
    except TransferError as exc:
        parser.error(f"--sigma2: {exc}")
    return args


def config_from_args(args: argparse.Namespace) -> TransferConfig:
    return TransferConfig(
        sigma2_init=colorspace.raw_lab_variance_to_normalized(args.sigma2),
        mu=args.mu,
        alpha=args.alpha,
        q_max=args.iters,
        k_nn=args.knn,
        save_every=args.save_every,
        mode=args.mode,
    )


def run(args: argparse.Namespace) -> None:
    cfg = args.config_obj
    source = load_image(args.source)
    example = load_image(args.example)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = MetricsReport() if args.metrics else None

    def sink(q, frame):
        save_image(frame, out / f"frame_q{q:03d}.png")
        if report is not None:
            report.add(q, frame, source)

    def monitor(q, value):
        print(f"q={q:3d} nll={value:.9g}", flush=True)

    result = run_transfer(source, example, cfg, sink=sink, monitor=monitor)

    lines = ["q,nll"] + [f"{q},{v:.9g}" for q, v in enumerate(result.nll_trace, 1)]
    (out / "nll_trace.csv").write_text("\n".join(lines) + "\n")
    if report is not None:
        (out / "metrics.json").write_text(report.to_json() + "\n")


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        run(args)
    except (TransferError, OSError) as exc:
        print(f"gmmtransfer: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
