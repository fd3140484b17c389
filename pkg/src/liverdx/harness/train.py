"""Training loop: per-case forward on each case's own phase path, one SAM step per batch."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from liverdx.errors import EmptySplitError, NonFiniteLossError
from liverdx.harness.checkpoint import save_checkpoint
from liverdx.harness.config import RunConfig, save_run_config
from liverdx.optim import SAM
from liverdx.phantom import load_index
from liverdx.segmenter import LesionSegmenter
from liverdx.training import MemoryBank, batch_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "total", "seg", "focal", "acl", "phases", "seconds")


class CaseSource:
    """Loads cases of one split by id, optionally keeping them in memory."""

    def __init__(self, index, split, cache=True):
        self.index = index
        self.ids = index.case_ids(split)
        if not self.ids:
            raise EmptySplitError(f"split {split!r} of {index.root} is empty")
        self.cache = {} if cache else None

    def __len__(self):
        return len(self.ids)

    def get(self, case_id):
        if self.cache is None:
            return self.index.load_case(case_id)
        if case_id not in self.cache:
            self.cache[case_id] = self.index.load_case(case_id)
        return self.cache[case_id]


def batch_schedule(n_items, batch_size, steps, seed):
    """Deterministic per-epoch shuffles, cut into ``steps`` batches of indices."""
    rng = np.random.default_rng(seed)
    stream = []
    batches = []
    for _ in range(steps):
        while len(stream) < batch_size:
            stream.extend(rng.permutation(n_items).tolist())
        batches.append(stream[:batch_size])
        stream = stream[batch_size:]
    return batches


def learning_rate(base_lr, schedule, step, steps):
    """Learning rate for 1-based ``step`` of ``steps``; cosine falls from base_lr to near 0 at the last step."""
    if schedule == "constant" or steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * (step - 1) / steps))


def step_seed(seed, step):
    return (int(seed) * 1_000_003 + int(step)) % (2**63 - 1)


@dataclass
class TrainResult:
    model: LesionSegmenter
    checkpoint: Path
    log: list = field(default_factory=list)
    bank: MemoryBank | None = None

    def losses(self):
        return [row["total"] for row in self.log]


def build_model(cfg: RunConfig) -> LesionSegmenter:
    torch.manual_seed(cfg.seed)
    return LesionSegmenter(cfg.model)


def run_train(config: RunConfig, progress=None) -> TrainResult:
    """Train per ``config``; writes checkpoints, the loss log and a manifest under the run directory."""
    cfg = config.resolved().validate(check_paths=True)
    run_dir = cfg.run_path()
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    save_run_config(config, run_dir / "config.yaml")

    index = load_index(cfg.dataset)
    source = CaseSource(index, cfg.train_split, cfg.cache_cases)
    steps = cfg.steps
    if cfg.epochs is not None:
        steps = cfg.epochs * math.ceil(len(source) / cfg.batch_size)

    model = build_model(cfg)
    optimizer = SAM(model.parameters(), cfg.sam)
    bank = MemoryBank(cfg.loss.bank_size)
    schedule = batch_schedule(len(source), cfg.batch_size, steps, cfg.seed)

    rows = []
    log_path = run_dir / "train_log.csv"
    last_good = None
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for step, batch_idx in enumerate(schedule, start=1):
            t0 = time.perf_counter()
            cases = [source.get(source.ids[i]) for i in batch_idx]
            optimizer.set_lr(learning_rate(cfg.sam.lr, cfg.lr_schedule, step, steps))
            first = {}

            def closure():
                gen = torch.Generator().manual_seed(step_seed(cfg.seed, step))
                out = batch_loss(model, cases, bank, cfg.loss, gen, push=False)
                out.total.backward()
                if not first:
                    first["out"] = out
                return out.total

            try:
                optimizer.step(closure)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(
                    f"step {step}: {exc}; last good checkpoint: {last_good or 'none'}"
                ) from exc
            out = first["out"]
            if len(out.anchor_labels):
                bank.push(out.anchors, out.anchor_labels)
            row = {"step": step, **out.stats,
                   "phases": "+".join(str(len(c.phases_present)) for c in cases),
                   "seconds": round(time.perf_counter() - t0, 3)}
            writer.writerow(row)
            rows.append(row)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_good = save_checkpoint(model, run_dir / "checkpoints" / f"step_{step:06d}.ckpt", step)
            if progress is not None:
                progress(row)

    final = save_checkpoint(model, run_dir / "model.ckpt", steps)
    manifest = {
        "command": "train",
        "dataset": str(cfg.dataset),
        "steps": steps,
        "checkpoint": final.name,
        "train_log": log_path.name,
        "seed": cfg.seed,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return TrainResult(model=model, checkpoint=final, log=rows, bank=bank)


def read_train_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("total", "seg", "focal", "acl", "seconds"):
            r[k] = float(r[k])
        r["step"] = int(r["step"])
    return rows
