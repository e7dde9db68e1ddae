"""Command-line entry point: ``moleclue {train,certify,clue,sweep,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .clue import clue_optimize
from .config import load_config
from .harness import aggregate_curves, emit_report, load_examples, run_sweep
from .molgraph import contaminate, parse_dataset, write_dataset
from .training import certify, fit, load_checkpoint, save_checkpoint


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train, test = load_examples(cfg, cfg.train.seed)
    ckpt = fit(train, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "checkpoint.bin")
    write_dataset(out / "train.json", train)
    write_dataset(out / "test.json", test)
    (out / "history.json").write_text(json.dumps(ckpt.history, indent=1))
    print(f"checkpoint written to {out / 'checkpoint.bin'}")
    return 0


def _sibling(ckpt_path: str, given: str | None, name: str) -> Path:
    return Path(given) if given else Path(ckpt_path).parent / name


def cmd_certify(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = parse_dataset(_sibling(args.checkpoint, args.dataset, "train.json"))
    bank = certify(ckpt.params, data, replace(ckpt.config, seed=args.seed))
    ckpt.certificates = bank
    save_checkpoint(ckpt, args.checkpoint)
    print(json.dumps({"k": bank.k, "orthonormality_error": bank.orthonormality_error()}))
    return 0


def cmd_clue(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = {e.id: e for e in parse_dataset(_sibling(args.checkpoint, args.dataset, "test.json"))}
    if args.molecule not in data:
        print(f"unknown molecule id {args.molecule!r}", file=sys.stderr)
        return 2
    ex = data[args.molecule]
    seed = int(np.random.SeedSequence([args.seed, int(round(args.tau * 1e6))]).generate_state(1)[0])
    x0 = contaminate(ex.conformer, args.tau, seed)
    cfg = replace(load_config(args.config).clue, clue_lr=args.lr, steps=args.steps,
                  normalize_terms=args.normalize_terms)
    traj = clue_optimize(ex.graph, x0, ckpt, cfg, label=args.label, reference=ex.conformer, tau=args.tau)
    text = json.dumps(traj.to_dict(), sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text)
        r0, r1 = traj.records[0], traj.final
        print(f"{traj.id}: L_total {r0.L_total:.4g} -> {r1.L_total:.4g} over {len(traj.records) - 1} steps"
              + (" (truncated)" if traj.truncated else ""))
    else:
        print(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    manifest = run_sweep(cfg, args.out)
    emit_report(aggregate_curves(args.out), args.out)
    failed = [c for r in manifest["runs"] for c in r.get("cells", []) if c["status"] != "done"]
    print(f"sweep finished in {args.out}; {len(failed)} failed cells")
    return 1 if failed else 0


def cmd_report(args) -> int:
    out = emit_report(aggregate_curves(args.inp), args.inp, args.out)
    print(f"report written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moleclue")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a checkpoint")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="refit the certificate bank of a checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--dataset", help="defaults to train.json next to the checkpoint")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_certify)

    q = sub.add_parser("clue", help="optimize one molecule")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--molecule", required=True)
    q.add_argument("--tau", type=float, default=0.0)
    q.add_argument("--lr", type=float, default=0.1)
    q.add_argument("--steps", type=int, default=20)
    q.add_argument("--label", type=float)
    q.add_argument("--normalize-terms", action="store_true")
    q.add_argument("--dataset", help="defaults to test.json next to the checkpoint")
    q.add_argument("--config")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", help="trajectory JSON path; stdout when omitted")
    q.set_defaults(func=cmd_clue)

    s = sub.add_parser("sweep", help="run the contamination sweep and write a report")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="aggregate a finished sweep")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
