"""Track, train, benchmark and inspect the one-stream tracker from the shell."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import SynthSpec, evaluate_metrics, load_synth_spec, macs_estimate, synth_sequence
from .config import ConfigError, load_config
from .imageio import read_boxes, read_pnm, write_boxes
from .model import TrackerNet
from .tensor_core import WeightFormatError


def _parse_sweep(text: str) -> list[float]:
    """``rho=0.5:1.0:0.1`` → [0.5, 0.6, …, 1.0] (end inclusive)."""
    key, _, rng = text.partition("=")
    if key.strip() != "rho":
        raise argparse.ArgumentTypeError("only rho sweeps are supported")
    try:
        lo, hi, step = (float(v) for v in rng.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("sweep must look like rho=START:STOP:STEP") from None
    if step <= 0 or hi < lo:
        raise argparse.ArgumentTypeError("sweep needs STEP > 0 and STOP >= START")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def cmd_bench_macs(args) -> int:
    cfg, _ = load_config(args.config)
    rhos = args.sweep or [cfg.keep_ratio]
    rows = []
    for rho in rhos:
        c = cfg.replace(keep_ratio=rho)
        net_cfg = TrackerNet.attention_config_for(c)
        rep = macs_estimate(net_cfg, c.n_template, c.n_search, include_embed=args.with_embed_head,
                            include_head=args.with_embed_head, patch_size=c.patch_size,
                            head_layers=c.head_layers)
        row = {f.name: getattr(c, f.name) for f in dataclasses.fields(c)}
        row["elimination_layers"] = " ".join(str(i) for i in c.elimination_layers)
        row.update(n_template=c.n_template, n_search=c.n_search,
                   encoder_macs=int(rep.encoder), total_macs=int(rep.total))
        for i, n in enumerate(rep.search_counts, 1):
            row[f"search_tokens_stage{i}"] = n
        rows.append(row)
        stages = "→".join(str(n) for n in [c.n_search] + rep.search_counts)
        print(f"rho={rho:.2f}  encoder {rep.encoder / 1e9:.2f} G MACs  total {rep.total / 1e9:.2f} G  "
              f"search tokens {stages}")
    if args.csv:
        fields = list(dict.fromkeys(k for r in rows for k in r))
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
    return 0


def cmd_train(args) -> int:
    from .pipeline import train

    cfg, tcfg = load_config(args.config)
    if args.steps is not None:
        tcfg.steps = args.steps
    if args.seed is not None:
        tcfg.seed = args.seed
    net, _ = train(cfg, tcfg)
    net.save(args.out)
    print(f"wrote {args.out}")
    return 0


def _load_net(args) -> TrackerNet:
    cfg = load_config(args.config)[0] if args.config else None
    return TrackerNet.load(args.weights, cfg)


def _sequence_frames(seq: Path) -> list[Path]:
    frames = sorted(seq.glob("*.ppm"))
    if not frames:
        raise FileNotFoundError(f"no .ppm frames in {seq}")
    return frames


def cmd_track(args) -> int:
    from .pipeline import run_sequence

    net = _load_net(args)
    seq = Path(args.seq)
    if args.init:
        init = [float(v) for v in args.init.replace(",", " ").split()]
    else:
        init = read_boxes(seq / "groundtruth.txt")[0].tolist()
    frames = [read_pnm(p) for p in _sequence_frames(seq)]
    boxes = run_sequence(net, frames, init, hanning=False if args.no_hanning else None)
    write_boxes(args.out, boxes)
    print(f"tracked {len(frames)} frames → {args.out}")
    return 0


def cmd_dump_attn(args) -> int:
    from .pipeline import dump_attention

    net = _load_net(args)
    z, x = (read_pnm(p) for p in args.pair)
    paths = dump_attention(net, z, x, args.out)
    print(f"wrote {len(paths)} attention maps to {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    synth_sequence(spec, args.out)
    print(f"wrote {spec.length} frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred, gt = read_boxes(args.pred), read_boxes(args.gt)
    if args.skip_first:
        pred, gt = pred[1:], gt[1:]
    for k, v in evaluate_metrics(pred, gt).items():
        print(f"{k} {v:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onestream", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("bench-macs", help="analytic encoder MACs for a config")
    s.add_argument("--config", default="vitb256", help="config file or preset name")
    s.add_argument("--sweep", type=_parse_sweep, help="e.g. rho=0.5:1.0:0.1")
    s.add_argument("--csv", help="write one row per configuration")
    s.add_argument("--with-embed-head", action="store_true", help="add patch-embed and head MACs to the total")
    s.set_defaults(func=cmd_bench_macs)

    s = sub.add_parser("train", help="train on synthetic sequences")
    s.add_argument("--config", default="toy")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("track", help="track a sequence directory")
    s.add_argument("--weights", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="override the config stored with the weights")
    s.add_argument("--init", help="initial box 'x,y,w,h' (default: first line of groundtruth.txt)")
    s.add_argument("--no-hanning", action="store_true")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("dump-attn", help="write per-layer attention maps as PGM")
    s.add_argument("--weights", required=True)
    s.add_argument("--pair", nargs=2, required=True, metavar=("Z", "X"))
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_dump_attn)

    s = sub.add_parser("synth", help="render a synthetic sequence")
    s.add_argument("--spec", help="INI file with a [synth] section")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", help="AO / SR metrics of predicted boxes")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--skip-first", action="store_true", help="ignore the initialisation frame")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, WeightFormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"onestream: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
