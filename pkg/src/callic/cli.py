"""Command line entry point: ``callic {pretrain,encode,decode,bench,inspect}``.

Exit statuses: 0 success, 2 bad arguments or configuration, 3 I/O error,
4 malformed or truncated file, 5 file coded with a different model,
6 numeric fault.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .adapt import AdapterConfig
from .cci import encode_image
from .checkpoint import save_checkpoint
from .codec import Model, compress, decompress
from .container import parse_header, read_container
from .errors import CallicError, ConfigError
from .imageio import list_images, read_image, write_image
from .model import ModelConfig
from .pretrain import TrainConfig, pretrain

log = logging.getLogger("callic")

EXIT_IO = 3

_DEFAULT_ADAPTER = AdapterConfig()


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("CALLIC_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"CALLIC_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def _adapter(args, with_training: bool) -> AdapterConfig:
    kw = dict(rank=args.rank, conv_rank=args.conv_rank, step=args.w, scale=args.s,
              trainable_core=args.trainable_core)
    if with_training:
        kw.update(steps=args.steps, lr=args.lr, b=args.b, d=args.d, e=args.e, seed=args.seed)
    return AdapterConfig(**kw)


def _stderr(msg: str):
    print(msg, file=sys.stderr)


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = ModelConfig(depth=args.depth, dim=args.dim, kernel=args.kernel,
                      mixtures=args.mixtures, mlp_ratio=args.mlp_ratio, channels=args.channels)
    tcfg = TrainConfig(patch_size=args.patch_size, batch_size=args.batch_size, lr=args.lr,
                       max_steps=args.steps, seed=args.seed, data_dir=args.data,
                       val_fraction=args.val_fraction, val_every=args.val_every,
                       synthetic_images=args.synthetic, synthetic_size=args.synthetic_size)
    records = []

    def on_record(rec):
        records.append(rec)
        if "val_bpsp" in rec:
            print(f"step {rec['step']:6d}  validation {rec['val_bpsp']:.4f} bpsp", flush=True)

    start = time.perf_counter()
    result = pretrain(tcfg, cfg, on_record=on_record)
    digest = save_checkpoint(args.out, result.params, cfg)
    if args.log:
        _write_jsonl(args.log, records)
    print(f"checkpoint {digest.hex()} -> {args.out}")
    _stderr(f"wall time {time.perf_counter() - start:.2f} s")
    if result.aborted:
        _stderr("warning: training diverged; saved the last good weights")
    return 0


def cmd_encode(args) -> int:
    if args.adapt and args.steps < 1:
        raise ConfigError("--steps must be >= 1 with --adapt")
    model = Model.load(args.checkpoint)
    image = read_image(args.input)
    adapter = _adapter(args, True) if args.adapt else None
    start = time.perf_counter()
    data, report = compress(image, model, args.patch_size, adapter, _threads(args))
    elapsed = time.perf_counter() - start
    Path(args.output).write_bytes(data)
    print(f"total {report.bpsp:.4f} bpsp  ({report.file_bytes} bytes)")
    print(f"weight bits {report.weight_bits}  pixel bits {report.pixel_bits}")
    _stderr(f"wall time {elapsed:.2f} s")
    if args.report:
        _write_jsonl(args.report, report.records + [{"summary": report.summary()}])
    return 0


def cmd_decode(args) -> int:
    model = Model.load(args.checkpoint)
    data = Path(args.input).read_bytes()
    start = time.perf_counter()
    image = decompress(data, model, _adapter(args, False), _threads(args))
    write_image(args.output, image)
    _stderr(f"wall time {time.perf_counter() - start:.2f} s")
    return 0


def _bench_one(path, model, args, adapter, threads):
    image = read_image(path)
    row = {"image": path.name, "width": image.shape[1], "height": image.shape[0],
           "channels": image.shape[2]}
    timing = {"image": path.name}
    t0 = time.perf_counter()
    data, report = compress(image, model, args.patch_size, None, threads)
    timing["encode_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    decoded = decompress(data, model, adapter, threads)
    timing["decode_s"] = time.perf_counter() - t0
    if not np.array_equal(decoded, image):
        raise CallicError(f"{path.name}: decoded pixels differ from the input")
    row["bpsp"] = report.bpsp
    if args.adapt:
        t0 = time.perf_counter()
        data, report = compress(image, model, args.patch_size, adapter, threads)
        timing["encode_adapted_s"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        decoded = decompress(data, model, adapter, threads)
        timing["decode_adapted_s"] = time.perf_counter() - t0
        if not np.array_equal(decoded, image):
            raise CallicError(f"{path.name}: adapted decode differs from the input")
        row["bpsp_adapted"] = report.bpsp
    if args.naive_baseline:
        t0 = time.perf_counter()
        encode_image(image, model.params, model.cfg, args.patch_size, threads, naive=True)
        timing["encode_naive_s"] = time.perf_counter() - t0
        timing["naive_ratio"] = timing["encode_naive_s"] / timing["encode_s"]
    return row, timing


def cmd_bench(args) -> int:
    if args.adapt and args.steps < 1:
        raise ConfigError("--steps must be >= 1 with --adapt")
    model = Model.load(args.checkpoint)
    adapter = _adapter(args, True)
    threads = _threads(args)
    rows, timings = [], []
    for path in list_images(args.corpus):
        try:
            row, timing = _bench_one(path, model, args, adapter, threads)
        except (OSError, CallicError) as exc:
            log.error("%s: %s", path.name, exc)
            continue
        rows.append(row)
        timings.append(timing)
        _stderr("  ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in timing.items()))

    columns = ["image", "width", "height", "channels", "bpsp"]
    if args.adapt:
        columns.append("bpsp_adapted")
    if rows:
        mean = {"image": "mean", "width": "", "height": "", "channels": ""}
        for c in columns[4:]:
            mean[c] = float(np.mean([r[c] for r in rows]))
        rows.append(mean)
    for r in rows:
        print("  ".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c])
                        for c in columns))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            for r in rows:
                writer.writerow({c: f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]
                                 for c in columns})
    if args.timings:
        names = sorted({k for t in timings for k in t} - {"image"})
        with open(args.timings, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["image"] + names)
            writer.writeheader()
            writer.writerows(timings)
    if args.naive_baseline and timings:
        naive = sum(t["encode_naive_s"] for t in timings)
        cci = sum(t["encode_s"] for t in timings)
        _stderr(f"naive / cache-then-crop encode time: {naive / cci:.2f}x")
    return 0


def cmd_inspect(args) -> int:
    data = Path(args.input).read_bytes()
    header = parse_header(data)
    box = read_container(data)
    info = {
        "version": header.version, "adapted": header.adapted,
        "width": header.width, "height": header.height, "channels": header.channels,
        "patch_size": header.patch_size, "patches": header.n_patches,
        "checkpoint_digest": header.checkpoint_digest.hex(),
        "adapter_digest": header.adapter_digest.hex(),
        "weight_count": box.weight_count,
        "sections": box.section_sizes(),
        "bpsp": 8.0 * len(data) / (header.width * header.height * header.channels),
    }
    print(json.dumps(info, indent=2))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_structure_flags(p):
    d = _DEFAULT_ADAPTER
    g = p.add_argument_group("incremental weight structure (must match at decode)")
    g.add_argument("--rank", type=int, default=d.rank, help="low-rank size for linear layers")
    g.add_argument("--conv-rank", type=int, default=d.conv_rank,
                   help="factor rank for the depth-wise kernels")
    g.add_argument("--w", type=float, default=d.step, help="quantization step")
    g.add_argument("--s", type=float, default=d.scale, help="logistic prior scale")
    g.add_argument("--trainable-core", action="store_true",
                   help="also train and transmit the kernel factor core")


def _add_training_flags(p):
    d = _DEFAULT_ADAPTER
    g = p.add_argument_group("adaptation")
    g.add_argument("--adapt", action="store_true", help="fine-tune weights for each image")
    g.add_argument("--steps", type=int, default=d.steps)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--b", type=float, default=d.b, help="initial fraction of patches")
    g.add_argument("--d", type=float, default=d.d, help="final fraction of steps on all patches")
    g.add_argument("--e", type=float, default=d.e, help="schedule exponent")
    g.add_argument("--seed", type=int, default=d.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="callic", description="Learned lossless image codec.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a model checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="folder of PNG/PPM training images")
    p.add_argument("--synthetic", type=int, default=48, help="number of synthetic images")
    p.add_argument("--synthetic-size", type=int, default=128)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--val-every", type=int, default=100)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--kernel", type=int, default=7)
    p.add_argument("--mixtures", type=int, default=5)
    p.add_argument("--mlp-ratio", type=int, default=4)
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p.add_argument("--log", help="write training records as JSON lines")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("encode", help="compress an image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--threads", type=int)
    p.add_argument("--report", help="write per-step and summary records as JSON lines")
    _add_training_flags(p)
    _add_structure_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress to PNG/PPM")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threads", type=int)
    _add_structure_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="rates and timings over a folder of images")
    p.add_argument("corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--threads", type=int)
    p.add_argument("--csv", help="per-image rates (deterministic)")
    p.add_argument("--timings", help="per-image wall times")
    p.add_argument("--naive-baseline", action="store_true",
                   help="also time full-forward-per-step encoding")
    _add_training_flags(p)
    _add_structure_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print header and section sizes")
    p.add_argument("input")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CallicError as exc:
        _stderr(f"error: {exc}")
        return exc.exit_code
    except OSError as exc:
        _stderr(f"error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
