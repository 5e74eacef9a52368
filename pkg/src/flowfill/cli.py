"""Command-line entry point: ``flowfill <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numeric failure (divergence, non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteError
from .config import ConfigError, RunConfig
from .flow_io import (
    FormatError,
    flow_to_color,
    read_edge_map,
    read_flo,
    read_mask,
    read_matches,
    write_flo,
    write_image,
    write_pgm,
)
from .gradcheck import main_suite
from .losses import LossReport
from .metrics import EvalReport, evaluate_image
from .model import CheckpointError, ModelConfig, predict
from .preprocess import Sample, build_input, make_sample, upsample_flow
from .synth import gen_moving_shapes
from .training import (
    FINETUNE_LR,
    Checkpoint,
    TrainingDiverged,
    finetune,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("flowfill")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for I/O here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- manifests -----------------------------------------------------------------


def write_manifest(out_dir: Path, entries: list[dict]) -> Path:
    path = out_dir / MANIFEST
    path.write_text(json.dumps({"version": 1, "samples": entries}, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> list[dict]:
    """Manifest entries with file paths resolved against the manifest's folder."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        doc = json.loads(path.read_text())
        samples = doc["samples"]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: not a manifest ({e})") from None
    base = path.parent
    out = []
    for entry in samples:
        e = dict(entry)
        for key in ("gt", "sparse", "mask", "edges"):
            if e.get(key):
                e[key] = str(base / e[key])
        out.append(e)
    return out


def load_entry(entry: dict, with_gt: bool = True) -> tuple[Sample, np.ndarray | None]:
    """A manifest entry as a network Sample plus its full-resolution GT."""
    flow = read_flo(entry["sparse"])
    mask = read_mask(entry["mask"])
    edges = read_edge_map(entry["edges"])
    gt = read_flo(entry["gt"]) if with_gt and entry.get("gt") else None
    return make_sample(gt, flow, mask, edges, entry["name"]), gt


def load_samples(manifest) -> list[Sample]:
    return [load_entry(e)[0] for e in read_manifest(manifest)]


# -- commands ------------------------------------------------------------------


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag in ("seed", "width", "height"):
        v = getattr(args, flag, None)
        if v is not None:
            out[flag] = str(v)
    return out


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, _overrides(args))
    # a bad value fails every command, not just the one that reads it
    cfg.model()
    cfg.synth()
    return cfg


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out DIR is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _config(args)
    spec = cfg.synth()
    out = _out_dir(args)
    entries = []
    for s in gen_moving_shapes(spec):
        files = {
            "gt": f"{s.name}_gt.flo",
            "sparse": f"{s.name}_sparse.flo",
            "mask": f"{s.name}_mask.pgm",
            "edges": f"{s.name}_edges.pgm",
        }
        write_flo(s.gt, out / files["gt"])
        write_flo(s.flow, out / files["sparse"])
        write_pgm(s.mask * np.uint8(255), out / files["mask"])
        write_pgm(s.edges, out / files["edges"])
        entries.append({"name": s.name, "width": spec.width, "height": spec.height, **files})
    write_manifest(out, entries)
    cfg.write_resolved(out, spec)
    print(f"wrote {len(entries)} samples to {out}")
    return EXIT_OK


def _manifest_arg(args, cfg, key) -> str:
    path = getattr(args, key) or cfg.get(f"{key}_manifest")
    if not path:
        raise UsageError(f"--{key} MANIFEST (or {key}_manifest in the config) is required")
    return path


class _CsvLog:
    """Per-step loss log; on resume rows past the checkpoint are dropped."""

    def __init__(self, path: Path, num_layers: int, resume_step: int | None):
        header = LossReport.csv_header(num_layers)
        rows = []
        if resume_step is not None and path.exists():
            with open(path, newline="") as f:
                rd = csv.reader(f)
                if next(rd, None) == header:
                    rows = [r for r in rd if r and int(r[0]) <= resume_step]
        self.f = open(path, "w", newline="")
        self.w = csv.writer(self.f)
        self.w.writerow(header)
        self.w.writerows(rows)

    def __call__(self, step, lr, report):
        self.w.writerow(report.csv_row(step, lr))

    def close(self):
        self.f.close()


def _atomic_save(ckpt: Checkpoint, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_checkpoint(ckpt, tmp)
    os.replace(tmp, path)


def _run_training(args, finetuning: bool) -> int:
    cfg = _config(args)
    train_set = load_samples(_manifest_arg(args, cfg, "train"))
    val_set = load_samples(_manifest_arg(args, cfg, "val"))
    out = _out_dir(args)
    start = None
    if args.ckpt:
        arch_keys = {f.name for f in fields(ModelConfig)} - {"seed"}
        expect = cfg.model() if arch_keys & cfg.values.keys() else None
        start = load_checkpoint(args.ckpt, expect)
    if finetuning and start is None:
        raise UsageError("finetune needs --ckpt BASE")
    defaults = {"lr": FINETUNE_LR} if finetuning else {}
    if start is not None and not finetuning and start.train_config is not None:
        # resuming: the interrupted run's settings, unless overridden
        defaults = asdict(start.train_config)
    tc = cfg.train(**defaults)
    mc = cfg.model() if start is None else start.config
    every = int(cfg.get("checkpoint_every", 0) or 0)
    resume_step = start.step if (start is not None and not finetuning) else None
    logger = _CsvLog(out / "loss.csv", mc.num_layers, resume_step)
    kwargs = dict(on_step=logger, on_checkpoint=lambda ck: _atomic_save(ck, out / "last.ckpt"), checkpoint_every=every)
    try:
        if finetuning:
            result = finetune(start, tc, train_set, val_set, **kwargs)
        else:
            result = train(mc, tc, train_set, val_set, start=start, **kwargs)
    finally:
        logger.close()
    _atomic_save(result, out / "best.ckpt")
    with open(out / "val.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "val_epe"])
        w.writerows([s, repr(float(v))] for s, v in result.history)
    cfg.write_resolved(out, mc, tc)
    print(f"best validation EPE {result.best_val:.6f} at step {result.best_step} ({result.step} steps)")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, finetuning=False)


def cmd_finetune(args) -> int:
    return _run_training(args, finetuning=True)


def _save_flow(flow: np.ndarray, out: Path, stem: str, viz: bool) -> None:
    write_flo(flow, out / f"{stem}.flo")
    if viz:
        write_image(flow_to_color(flow), out / f"{stem}.png")


def cmd_infer(args) -> int:
    if not (args.ckpt and args.fwd and args.width and args.height):
        raise UsageError("infer needs --ckpt, --fwd, --width and --height")
    if args.width <= 0 or args.height <= 0:
        raise ConfigError("--width and --height must be positive")
    out = _out_dir(args)
    params = load_checkpoint(args.ckpt).params
    w, h = args.width, args.height
    if args.edges:
        edges = read_edge_map(args.edges)
    else:
        log.warning("no --edges given; using an empty edge map")
        edges = np.zeros((h, w), dtype=np.float32)
    fwd = read_matches(args.fwd)
    bwd = read_matches(args.bwd) if args.bwd else None
    try:
        net_in = build_input(fwd, edges, w, h, bwd)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    flow = upsample_flow(predict(params, net_in), net_in.full_size)
    _save_flow(flow, out, "flow", args.viz)
    print(f"wrote {w}x{h} flow to {out / 'flow.flo'}")
    return EXIT_OK


def _gt_items(path) -> list[tuple[str, Path | dict]]:
    p = Path(path)
    if p.is_dir() and not (p / MANIFEST).exists():
        return [(f.stem, f) for f in sorted(p.glob("*.flo"))]
    return [(e["name"], e) for e in read_manifest(p)]


def cmd_eval(args) -> int:
    if not args.gt:
        raise UsageError("eval needs --gt DIR|MANIFEST")
    if not (args.pred or args.ckpt):
        raise UsageError("eval needs --pred DIR or --ckpt PATH")
    out = _out_dir(args)
    items = _gt_items(args.gt)
    if not items:
        raise FormatError(f"{args.gt}: no ground-truth flows found")
    params = load_checkpoint(args.ckpt).params if args.ckpt else None

    def one(item):
        name, src = item
        if isinstance(src, dict):
            sample, gt = load_entry(src)
        else:
            sample, gt = None, read_flo(src)
        if params is not None:
            if sample is None:
                raise UsageError("--ckpt evaluation needs a manifest for --gt")
            pred = upsample_flow(predict(params, sample.input), gt.shape[:2])
        else:
            pred = read_flo(Path(args.pred) / f"{name}.flo")
        occ = read_mask(Path(args.occ) / f"{name}.png") if args.occ else None
        other = read_flo(Path(args.other) / f"{name}.flo") if args.other else None
        return evaluate_image(name, pred, gt, occ, other)

    # map keeps manifest order whatever the completion order
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as ex:
        rows = list(ex.map(one, items))
    report = EvalReport(rows)
    note = "mean_ii compares --other against the evaluated predictions" if args.other else None
    report.write_csv(out / "eval.csv", note)
    print(report.summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    corrupt = frozenset(args.corrupt or ())
    ok, text = main_suite(seed=args.seed or 0, corrupt=corrupt)
    print(text)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_viz(args) -> int:
    flow = read_flo(args.flo)
    out = Path(args.out) if args.out else Path(args.flo).parent
    out.mkdir(parents=True, exist_ok=True)
    path = out / (Path(args.flo).stem + ".png")
    write_image(flow_to_color(flow, args.max_flow), path)
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "viz": cmd_viz,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--ckpt", metavar="PATH", help="model checkpoint")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="worker threads for per-image work")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="flowfill", description="Sparse-to-dense optical flow interpolation with a small CNN.")
    p.add_argument("--version", action="version", version=f"flowfill {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--width", type=int, metavar="N")
    s.add_argument("--height", type=int, metavar="N")

    for name, helptext in (("train", "train from scratch or resume with --ckpt"), ("finetune", "fine-tune --ckpt")):
        t = sub.add_parser(name, parents=[common], help=helptext)
        t.add_argument("--train", metavar="MANIFEST", help="training manifest")
        t.add_argument("--val", metavar="MANIFEST", help="validation manifest")

    i = sub.add_parser("infer", parents=[common], help="densify matches into a full-resolution .flo")
    i.add_argument("--fwd", metavar="PATH", help="forward matches (x1 y1 x2 y2 per line)")
    i.add_argument("--bwd", metavar="PATH", help="optional backward matches")
    i.add_argument("--edges", metavar="PATH", help="edge map (PGM/PNG or raw float)")
    i.add_argument("--width", type=int, metavar="N")
    i.add_argument("--height", type=int, metavar="N")
    i.add_argument("--viz", action="store_true", help="also write a color-coded PNG")

    e = sub.add_parser("eval", parents=[common], help="EPE / %%Out report against ground truth")
    e.add_argument("--gt", metavar="DIR|MANIFEST", help="ground-truth .flo folder or dataset manifest")
    e.add_argument("--pred", metavar="DIR", help="predicted <name>.flo files")
    e.add_argument("--occ", metavar="DIR", help="occlusion masks <name>.png")
    e.add_argument("--other", metavar="DIR", help="second method's <name>.flo files for the improvement index")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--corrupt", action="append", metavar="OP", help="testing hook: scale OP's backward rule")

    v = sub.add_parser("viz", parents=[common], help="color-code a .flo file")
    v.add_argument("flo", metavar="FLO")
    v.add_argument("--max-flow", type=float, metavar="M", help="normalization magnitude")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"flowfill: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as e:
        print(f"flowfill: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, CheckpointError) as e:
        print(f"flowfill: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # remaining validation failures: inconsistent shapes, bad values
        print(f"flowfill: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
