"""``mnnca train | generate | ablate | verify``.

Exit codes: 0 success, 1 a verified property failed, 2 usage or I/O error.
``MNNCA_THREADS`` caps numba and BLAS worker threads.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config, parse_seed_spec

log = logging.getLogger("mnnca")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _limit_threads():
    n = os.environ.get("MNNCA_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    from . import _kernels

    _kernels.set_threads(int(n))
    return threadpool_limits(limits=int(n))


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like WxH, got {text!r}") from None
    if w < 4 or h < 4:
        raise UsageError(f"--size too small: {text}")
    return h, w


def _parse_snaps(text: str) -> list[int]:
    try:
        return sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise UsageError(f"--snap must be a comma-separated list of steps, got {text!r}") from None


class Manifest:
    """Resolved inputs of a command, written before the work starts."""

    def __init__(self, out_dir: Path, command: str, args: dict, config: dict | None = None,
                 master_seed: int | None = None):
        self.path = out_dir / "manifest.json"
        self.data = {
            "tool": "mnnca",
            "version": __version__,
            "command": command,
            "args": args,
            "config": config,
            "master_seed": master_seed,
            "artifacts": {},
            "started": _now(),
            "finished": None,
        }
        self.write()

    def write(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, artifacts: dict):
        self.data["artifacts"] = artifacts
        self.data["finished"] = _now()
        self.write()


def _read_manifest(path, command: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from exc
    if data.get("command") != command:
        raise UsageError(f"manifest {path} records command {data.get('command')!r}, "
                         f"not {command!r}")
    return data


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .imageio import load_target
    from .trainer import TrainConfig, TrainingDiverged, train
    from dataclasses import replace

    if args.manifest:
        m = _read_manifest(args.manifest, "train")
        config = TrainConfig.from_json(m["config"])
        target_path = args.target or m["args"]["target"]
    else:
        if args.config:
            config = load_config(args.config)
        else:
            from . import presets
            config = TrainConfig(automaton=presets.automaton_config("mnnca"),
                                 seed=presets.seed_spec("perlin"), **presets.DESK)
        target_path = args.target
    if target_path is None:
        raise UsageError("--target is required")
    if args.batches is not None:
        config = replace(config, batch_count=args.batches)
    if args.seed is not None:
        config = replace(config, master_seed=args.seed)
    target = load_target(target_path, config.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, "train", {"target": str(target_path), "out": str(out)},
                        config.to_json(), config.master_seed)

    def progress(b, loss, ms):
        if b % 10 == 0 or b == config.batch_count - 1:
            print(f"batch {b:5d}  loss {loss:.5f}  {ms:7.0f} ms", flush=True)

    try:
        ckpt, curve = train(config, target, callback=progress)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    save_checkpoint(ckpt, out / "checkpoint.mnca")
    curve.write_csv(out / "loss.csv")
    manifest.finish({"checkpoint": "checkpoint.mnca", "loss_curve": "loss.csv"})
    print(f"wrote {out / 'checkpoint.mnca'} ({len(curve)} batches)")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .generate import DEFAULT_SNAPS, render

    if args.manifest:
        m = _read_manifest(args.manifest, "generate")["args"]
        for key in ("checkpoint", "size", "steps", "snap", "seed_spec", "seed"):
            if getattr(args, key, None) in (None, "") and m.get(key) is not None:
                setattr(args, key, m[key])
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    res = ckpt.config.get("resolution", 64)
    size = _parse_size(args.size) if args.size else (2 * res, 2 * res)
    steps = args.steps if args.steps is not None else max(DEFAULT_SNAPS)
    snaps = _parse_snaps(args.snap) if args.snap else [s for s in DEFAULT_SNAPS if s <= steps]
    bad = [s for s in snaps if s > steps]
    if bad:
        raise UsageError(f"snapshot steps {bad} exceed --steps {steps}")
    seed_spec = parse_seed_spec(args.seed_spec) if args.seed_spec else None
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, "generate", {
        "checkpoint": str(args.checkpoint), "size": f"{size[1]}x{size[0]}", "steps": steps,
        "snap": ",".join(map(str, snaps)), "seed_spec": args.seed_spec, "seed": seed,
    }, master_seed=seed)
    paths = render(ckpt, out, size, steps, snaps, seed, seed_spec)
    manifest.finish({"frames": [p.name for p in paths]})
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablation
    from .imageio import load_target
    from . import presets

    if args.manifest:
        m = _read_manifest(args.manifest, "ablate")["args"]
        args.target = args.target or m["target"]
        args.scale = m["scale"]
        args.batches = m["batches"]
        args.seed = m["seed"]
    if not args.target:
        raise UsageError("--target is required")
    scale = args.scale
    res = (presets.DESK if scale == "desk" else presets.PAPER)["resolution"]
    target = load_target(args.target, res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    manifest = Manifest(out, "ablate", {"target": str(args.target), "scale": scale,
                                        "batches": args.batches, "seed": seed}, master_seed=seed)
    rows = run_ablation(target, out, scale, args.batches, seed, args.jobs)
    manifest.finish({"summary": "summary.csv", "contact_sheet": "contact_sheet.json",
                     "conditions": [r["condition"] for r in rows]})
    width = max(len(r["condition"]) for r in rows)
    for r in rows:
        print(f"{r['condition']:<{width}}  params {r['param_count']:6d}  "
              f"loss {r['initial_loss']:.4f} -> {r['final_loss']:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    ctx = verify.perturbed_conv_backward() if args.perturb_conv_backward else \
        contextlib.nullcontext()
    with ctx:
        results = verify.run_all(trials=args.trials, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mnnca", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mnnca {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an automaton on a target texture")
    t.add_argument("--config", help="JSON training config (default: desk-scale MNNCA)")
    t.add_argument("--target", help="target image (PNG/JPEG)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--batches", type=int, help="override batch_count")
    t.add_argument("--seed", type=int, help="override master_seed")
    t.add_argument("--manifest", help="re-run from a manifest.json")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="roll out a trained checkpoint and write frames")
    g.add_argument("--checkpoint")
    g.add_argument("--size", help="WxH (default: twice the training resolution)")
    g.add_argument("--steps", type=int)
    g.add_argument("--snap", help="comma-separated snapshot steps (default 50,200,600)")
    g.add_argument("--seed-spec", dest="seed_spec", help="seed spec JSON (inline or file)")
    g.add_argument("--seed", type=int, help="sampling seed (default 0)")
    g.add_argument("--out", required=True)
    g.add_argument("--manifest", help="re-run from a manifest.json")
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("ablate", help="NCA / NCA-XL / MNNCA x uniform / Perlin grid")
    a.add_argument("--target")
    a.add_argument("--out", required=True)
    scale = a.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", dest="scale", action="store_const", const="desk",
                       help="64x64, 200 batches (default)")
    scale.add_argument("--paper-scale", dest="scale", action="store_const", const="paper",
                       help="256x256, 3000 batches")
    a.add_argument("--batches", type=int, help="override batch count per condition")
    a.add_argument("--seed", type=int)
    a.add_argument("--jobs", type=int, default=1, help="conditions trained in parallel")
    a.add_argument("--manifest", help="re-run from a manifest.json")
    a.set_defaults(func=cmd_ablate, scale="desk")

    v = sub.add_parser("verify", help="gradient checks and invariants")
    v.add_argument("--trials", type=int, default=4, help="random trials per gradient case")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--perturb-conv-backward", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _limit_threads():
            return args.func(args)
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
