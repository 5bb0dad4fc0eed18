"""``radarsnn`` command line: gen | train | infer | eval | energy | sweep."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .backbone import Detector
from .config import ConfigError, RunConfig
from .energy import compare, energy_joules, energy_report, read_energy_report
from .engine import InferenceEngine
from .evaluation import eval_report, evaluate
from .head import read_detections, write_detections
from .scene import frame_name, generate_dataset, read_manifest
from .training import (CheckpointError, load_checkpoint, load_into, model_state, prepare_samples,
                       save_checkpoint, train_loop)

log = logging.getLogger("radarsnn")

CHECKPOINT = "checkpoint.spkr"
LOSS_LOG = "loss_log.csv"
SWEEP_HEADER = ("T", "r", "ap_3d", "ap_bev", "mac", "ac", "energy_j")


class CommandError(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _load_model(cfg: RunConfig, checkpoint, mode: str) -> Detector:
    model = Detector(cfg.detector(), mode=mode, seed=cfg.seed)
    load_into(model, load_checkpoint(checkpoint))
    return model


def _manifest_frames(path):
    manifest = read_manifest(path)
    frames = list(manifest.load_frames())
    return frames, {frame_name(name): gts for name, _, gts in frames}


def _engine(cfg: RunConfig, model: Detector, bti, count_mode) -> InferenceEngine:
    b = cfg.bti()
    if model.mode == "ann":
        return InferenceEngine(model, count_mode=count_mode)
    r, steps = bti if bti is not None else (b.r, b.T)
    if steps == 1:
        return InferenceEngine(model, count_mode=count_mode)
    return InferenceEngine(model, r=r, steps=steps, reset_between_steps=b.reset_between_steps,
                           count_mode=count_mode)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, args) -> int:
    frames = args.frames if args.frames is not None else cfg.data().frames
    manifest = generate_dataset(cfg.scene(), frames, cfg.seed, args.out)
    print(f"wrote {len(manifest)} frames and {manifest.path}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    ckpt, loss_log = out / CHECKPOINT, out / LOSS_LOG
    existing = [p.name for p in (ckpt, loss_log) if p.exists()]
    if existing:
        raise CommandError(f"{out} already holds {', '.join(existing)}; resuming is not supported, "
                           "choose a fresh --out directory")
    frames, _ = _manifest_frames(args.manifest)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train()
    if args.epochs is not None:
        tcfg = type(tcfg)(**{**tcfg.__dict__, "epochs": args.epochs})
    model = Detector(cfg.detector(), mode=args.mode, seed=cfg.seed)
    samples = prepare_samples(model, [(cloud, gts) for _, cloud, gts in frames])
    rows = train_loop(model, samples, tcfg, log_path=loss_log)
    save_checkpoint(model_state(model), ckpt)
    print(f"trained {len(rows)} steps, final loss {rows[-1].loss_total:.6f}; wrote {ckpt}")
    return 0


def cmd_infer(cfg: RunConfig, args) -> int:
    mode = args.mode or cfg.infer().mode
    if mode == "ann" and args.bti is not None:
        raise CommandError("--bti needs spiking mode; ann mode runs a single step")
    bti = None
    if args.bti is not None:
        r, steps = float(args.bti[0]), int(args.bti[1])
        if not 0 < r <= 100 or steps < 1:
            raise CommandError("--bti expects r in (0, 100] and T >= 1")
        bti = (r, steps)
    model = _load_model(cfg, args.checkpoint, mode)
    engine = _engine(cfg, model, bti, args.count_mode or cfg.infer().count_mode)
    frames, _ = _manifest_frames(args.manifest)
    dets, ledger, n = engine.run(cloud for _, cloud, _ in frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "detections.csv", dets)
    (out / "energy.csv").write_text(energy_report(ledger, cfg.energy(), frames=n))
    print(f"{n} frames, {len(dets)} detections, {energy_joules(ledger, cfg.energy()):.6e} J")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    manifest = read_manifest(args.manifest)
    gts = {frame_name(name): manifest.boxes[name] for name in manifest.frames}
    result = evaluate(read_detections(args.detections), gts, threshold=args.iou)
    report = eval_report(result)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_energy(cfg: RunConfig, args) -> int:
    model = cfg.energy()
    if (args.report is None) == (args.counts is None):
        raise CommandError("give either --report or --counts")
    if args.counts is not None and len(args.counts) % 2:
        raise CommandError("--counts takes MAC AC pairs")
    items = args.report if args.report is not None else [
        tuple(args.counts[i:i + 2]) for i in range(0, len(args.counts), 2)]
    if len(items) not in (1, 2):
        raise CommandError("energy compares at most two workloads")
    ledgers = [read_energy_report(p) if isinstance(p, str) else p for p in items]
    for label, led in zip(("baseline", "candidate"), ledgers):
        print(f"{label}: {energy_joules(led, model):.6e} J")
    if len(ledgers) == 2:
        print(f"reduction: {compare(ledgers[0], ledgers[1], model):.2f}%")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    model = _load_model(cfg, args.checkpoint, "snn")
    frames, gts = _manifest_frames(args.manifest)
    energy_model = cfg.energy()
    count_mode = args.count_mode or cfg.infer().count_mode
    rows = []
    single = None  # a cascade of length one ignores r
    for steps in args.T:
        for r in args.r:
            if steps == 1 and single is not None:
                rows.append((steps, r) + single)
                continue
            engine = _engine(cfg, model, (r, steps), count_mode)
            dets, ledger, n = engine.run(cloud for _, cloud, _ in frames)
            res = evaluate(dets, gts)
            stats = (res.ap_3d, res.ap_bev, ledger.mac / n, ledger.ac / n, energy_joules(ledger, energy_model) / n)
            if steps == 1:
                single = stats
            rows.append((steps, r) + stats)
            log.info("T=%d r=%g ap_bev=%.4f", steps, r, res.ap_bev)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for steps, r, ap3, apb, mac, ac, e in rows:
            w.writerow([steps, f"{r:g}", f"{ap3:.6f}", f"{apb:.6f}", f"{mac:.1f}", f"{ac:.1f}", f"{e:.9e}"])
    print(format_sweep(rows))
    return 0


def format_sweep(rows) -> str:
    """Human-readable sweep table; counts in G per frame, energy in mJ."""
    lines = [f"{'T':>2} {'r':>5} {'AP3D':>7} {'APBEV':>7} {'MAC(G)':>9} {'AC(G)':>9} {'E(mJ)':>9}"]
    for steps, r, ap3, apb, mac, ac, e in rows:
        r_txt = "-" if steps == 1 else f"{r:g}"
        lines.append(f"{steps:>2} {r_txt:>5} {100 * ap3:>7.2f} {100 * apb:>7.2f} "
                     f"{mac / 1e9:>9.4f} {ac / 1e9:>9.4f} {e * 1e3:>9.4f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def add_globals(parser, default):
        parser.add_argument("--config", default=default(None), help="flat key=value config file")
        parser.add_argument("--seed", type=int, default=default(0), help="base seed for data, init and shuffling")
        parser.add_argument("--out", default=default("."), help="output directory")
        parser.add_argument("-v", "--verbose", action="store_true", default=default(False))

    # global flags are accepted before or after the command name
    common = argparse.ArgumentParser(add_help=False)
    add_globals(common, lambda _: argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="radarsnn", description="Spiking 4D-radar object detection toolkit.")
    add_globals(p, lambda v: v)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        parser = sub.add_parser(name, help=help, parents=[common])
        parser.set_defaults(func=func)
        return parser

    g = command("gen", cmd_gen, "generate a synthetic dataset")
    g.add_argument("--frames", type=int, help="frame count (default data.frames)")

    t = command("train", cmd_train, "train a detector")
    t.add_argument("--manifest", required=True)
    t.add_argument("--mode", choices=("snn", "ann"), default="snn")
    t.add_argument("--epochs", type=int)

    i = command("infer", cmd_infer, "run detection and count operations")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--manifest", required=True)
    i.add_argument("--mode", choices=("snn", "ann"))
    i.add_argument("--bti", nargs=2, metavar=("R", "T"), help="density ratio (percent) and time steps")
    i.add_argument("--count-mode", choices=("dense", "event"))

    e = command("eval", cmd_eval, "score detections against a manifest")
    e.add_argument("--detections", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--iou", type=float, default=0.3)

    n = command("energy", cmd_energy, "energy of one workload or the reduction between two")
    n.add_argument("--report", nargs="+", metavar="CSV", help="energy.csv files (baseline first)")
    n.add_argument("--counts", nargs="+", type=float, metavar="N", help="MAC AC [MAC AC]")

    s = command("sweep", cmd_sweep, "AP and energy over time steps and density ratios")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--T", type=_ints, default=[1, 2, 3], help="comma-separated time steps")
    s.add_argument("--r", type=_floats, default=[80.0], help="comma-separated density ratios")
    s.add_argument("--count-mode", choices=("dense", "event"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg.seed = args.seed
        cfg.validate()
        return args.func(cfg, args)
    except (CommandError, ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"radarsnn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
