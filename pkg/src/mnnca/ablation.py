"""The model x seed-noise ablation grid: NCA, NCA-XL, MNNCA x uniform, Perlin."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import presets
from .automaton import param_count
from .checkpoint import save_checkpoint
from .generate import DEFAULT_SNAPS, frame_name, render
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

WINDOW = 10
SUMMARY_FIELDS = ("condition", "model", "seed", "param_count", "batches", "first_loss",
                  "initial_loss", "final_loss", "last_loss")


@dataclass(frozen=True)
class Condition:
    model: str
    seed_kind: str

    @property
    def name(self) -> str:
        return f"{self.model}_{self.seed_kind}"


CONDITIONS = tuple(Condition(m, s) for m in presets.MODELS for s in presets.SEED_KINDS)


def condition_config(cond: Condition, scale: str = "desk", batch_count: int | None = None,
                     master_seed: int = 0) -> TrainConfig:
    settings = dict(presets.DESK if scale == "desk" else presets.PAPER)
    if batch_count is not None:
        settings["batch_count"] = batch_count
    return TrainConfig(
        automaton=presets.automaton_config(cond.model, scale),
        seed=presets.seed_spec(cond.seed_kind),
        master_seed=master_seed,
        **settings,
    )


def window_mean(values, first: bool) -> float:
    n = min(WINDOW, len(values))
    part = values[:n] if first else values[-n:]
    return float(np.mean(part)) if n else float("nan")


def run_condition(cond: Condition, target: np.ndarray, out_dir, scale: str = "desk",
                  batch_count: int | None = None, master_seed: int = 0,
                  snaps=DEFAULT_SNAPS) -> dict:
    out = Path(out_dir) / cond.name
    out.mkdir(parents=True, exist_ok=True)
    cfg = condition_config(cond, scale, batch_count, master_seed)
    ckpt, curve = train(cfg, target)
    save_checkpoint(ckpt, out / "checkpoint.mnca")
    curve.write_csv(out / "loss.csv")
    render(ckpt, out, (cfg.resolution, cfg.resolution), max(snaps), snaps, seed=master_seed)
    L = curve.losses
    return {
        "condition": cond.name,
        "model": cond.model,
        "seed": cond.seed_kind,
        "param_count": param_count(cfg.automaton),
        "batches": len(L),
        "first_loss": L[0] if L else float("nan"),
        "initial_loss": window_mean(L, True),
        "final_loss": window_mean(L, False),
        "last_loss": L[-1] if L else float("nan"),
    }


def _run(args):
    return run_condition(*args)


def write_contact_sheet(out_dir, rows: list[dict], snaps=DEFAULT_SNAPS) -> dict:
    """Lay out frames in a conditions x steps grid: JSON description plus a PNG."""
    out_dir = Path(out_dir)
    layout = {
        "columns": [f"step {s}" for s in snaps],
        "rows": [{"label": r["condition"],
                  "frames": [f"{r['condition']}/{frame_name(s)}" for s in snaps]}
                 for r in rows],
    }
    (out_dir / "contact_sheet.json").write_text(json.dumps(layout, indent=2) + "\n")
    tiles = [[Image.open(out_dir / f) for f in row["frames"]] for row in layout["rows"]]
    if tiles and tiles[0]:
        w, h = tiles[0][0].size
        pad = 4
        sheet = Image.new("RGB", (len(snaps) * (w + pad) + pad, len(tiles) * (h + pad) + pad),
                          (255, 255, 255))
        for i, row in enumerate(tiles):
            for j, im in enumerate(row):
                sheet.paste(im, (pad + j * (w + pad), pad + i * (h + pad)))
        sheet.save(out_dir / "contact_sheet.png")
    return layout


def run_ablation(target: np.ndarray, out_dir, scale: str = "desk", batch_count: int | None = None,
                 master_seed: int = 0, jobs: int = 1, snaps=DEFAULT_SNAPS) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # each condition gets its own master seed, hence a disjoint RNG stream
    work = [(c, target, out_dir, scale, batch_count, master_seed + i, snaps)
            for i, c in enumerate(CONDITIONS)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run, work))
    else:
        rows = []
        for w in work:
            log.info("ablation condition %s", w[0].name)
            rows.append(_run(w))
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    write_contact_sheet(out_dir, rows, snaps)
    return rows
