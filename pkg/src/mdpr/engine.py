"""Training loop, learning-rate schedule, checkpoints and evaluation runs."""

from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
import yaml

from .config import DatasetSpec, RunConfig, from_dict
from .data import (
    Augmenter,
    ImageRecord,
    PKSampler,
    load_directory_dataset,
    pk_batches,
    synthetic_splits,
)
from .evaluation import RetrievalMetrics, compute_map_cmc, extract_features, rank, write_rankings
from .model import MDPR

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mdpr-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ["epoch", "circle", "triplet", "attention_diversity", "distillation", "total"]


@dataclass
class Checkpoint:
    """Everything needed to rebuild the model or resume training.

    On disk this is a ``torch.save`` dict with keys ``format`` ("mdpr-checkpoint"),
    ``version`` (1), ``model``, ``optimizer``, ``scheduler``, ``epoch`` (epochs
    completed), ``config`` (plain dict) and ``rng``.
    """

    model: dict[str, torch.Tensor]
    optimizer: dict[str, Any]
    scheduler: dict[str, Any]
    epoch: int
    config: dict[str, Any]
    rng: dict[str, Any] = field(default_factory=dict)
    history: list[dict[str, float]] = field(default_factory=list)

    @property
    def run_config(self) -> RunConfig:
        return from_dict(self.config)

    def build_model(self) -> MDPR:
        model = MDPR(self.run_config)
        model.load_state_dict(self.model)
        model.eval()
        return model

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "model": self.model,
                "optimizer": self.optimizer,
                "scheduler": self.scheduler,
                "epoch": self.epoch,
                "config": self.config,
                "rng": self.rng,
                "history": self.history,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        data = torch.load(path, map_location="cpu", weights_only=False)
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not an mdpr checkpoint")
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')}")
        return cls(
            data["model"],
            data["optimizer"],
            data["scheduler"],
            data["epoch"],
            data["config"],
            data.get("rng", {}),
            data.get("history", []),
        )


def warmup_cosine(base_lr: float, warmup_iters: int, total_iters: int, start_factor: float = 0.1) -> Callable[[int], float]:
    """Learning rate at iteration ``it``.

    Linear from ``start_factor * base_lr`` to ``base_lr`` over the warm-up,
    then cosine annealing to 0 at ``total_iters``.
    """

    def lr(it: int) -> float:
        if it < warmup_iters:
            return base_lr * (start_factor + (1 - start_factor) * it / warmup_iters)
        span = max(total_iters - warmup_iters, 1)
        t = min(it - warmup_iters, span)
        return base_lr * 0.5 * (1 + math.cos(math.pi * t / span))

    return lr


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def build_optimizer(model: torch.nn.Module, cfg: RunConfig) -> torch.optim.Optimizer:
    oc = cfg.optim
    params = [p for p in model.parameters() if p.requires_grad]
    if oc.name == "adam":
        return torch.optim.Adam(params, lr=oc.base_lr, betas=(oc.momentum, 0.999), weight_decay=oc.weight_decay)
    return torch.optim.SGD(params, lr=oc.base_lr, momentum=oc.momentum, weight_decay=oc.weight_decay)


def load_records(spec: DatasetSpec, size: tuple[int, int], seed: int, splits: tuple[str, ...]) -> dict[str, list[ImageRecord]]:
    if spec.is_synthetic:
        train, query, gallery = synthetic_splits(
            spec.n_ids, spec.images_per_id, spec.eval_images_per_id, size, seed
        )
        pools = {"train": train, "query": query, "gallery": gallery}
        return {s: pools[s] for s in splits}
    records = load_directory_dataset(spec.path, size, splits)
    return {s: [r for r in records if r.split == s] for s in splits}


def _append_metrics(path: Path, row: dict[str, float]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: row[k] for k in METRIC_COLUMNS})


def run_training(
    cfg: RunConfig,
    resume: Checkpoint | None = None,
    train_records: list[ImageRecord] | None = None,
    max_steps: int | None = None,
) -> Checkpoint:
    """Train from scratch (or resume) and return the final checkpoint.

    Writes ``metrics.csv`` (one row per epoch), ``config.yaml`` and
    ``checkpoint.pt`` under the resolved output directory. ``max_steps``
    stops early after that many optimizer steps (the partial epoch is still
    logged).
    """
    out_dir = cfg.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "config.yaml").open("w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)

    seed_everything(cfg.seed)
    model = MDPR(cfg)
    if cfg.pretrained and resume is None:
        state = torch.load(cfg.pretrained, map_location="cpu", weights_only=True)
        missing, unexpected = model.load_state_dict(state, strict=False)
        logger.info("pretrained weights: %d missing, %d unexpected keys", len(missing), len(unexpected))

    if train_records is None:
        train_records = load_records(cfg.dataset, cfg.image_size, cfg.seed, ("train",))["train"]
    sampler = PKSampler(train_records, cfg.sampler.P, cfg.sampler.S, cfg.seed)
    augmenter = Augmenter(cfg.image_size, cfg.augment)

    optimizer = build_optimizer(model, cfg)
    total_iters = cfg.optim.epochs * len(sampler)
    schedule = warmup_cosine(cfg.optim.base_lr, cfg.optim.warmup_iters, total_iters)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda it: schedule(it) / cfg.optim.base_lr)

    start_epoch, history = 0, []
    if resume is not None:
        model.load_state_dict(resume.model)
        optimizer.load_state_dict(resume.optimizer)
        scheduler.load_state_dict(resume.scheduler)
        start_epoch, history = resume.epoch, list(resume.history)
        if "torch" in resume.rng:
            torch.set_rng_state(resume.rng["torch"])

    metrics_path = out_dir / "metrics.csv"
    if resume is None and metrics_path.exists():
        metrics_path.unlink()

    steps = 0
    model.train()
    for epoch in range(start_epoch, cfg.optim.epochs):
        augmenter.pool = [train_records[i].pixels for batch in sampler.epoch(epoch) for i in batch]
        sums = dict.fromkeys(METRIC_COLUMNS[1:], 0.0)
        n = 0
        for batch in pk_batches(train_records, sampler, epoch, augmenter):
            bundle = model(batch.images)
            report = model.loss(bundle, batch.labels)
            report.check_finite()
            optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            optimizer.step()
            scheduler.step()
            for k, v in report.as_floats().items():
                sums[k] += v
            n += 1
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        history.append(row)
        _append_metrics(metrics_path, row)
        logger.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if max_steps is not None and steps >= max_steps:
            epoch_done = epoch + 1
            break
    else:
        epoch_done = cfg.optim.epochs

    ckpt = Checkpoint(
        model={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer=optimizer.state_dict(),
        scheduler=scheduler.state_dict(),
        epoch=epoch_done,
        config=cfg.to_dict(),
        rng={"torch": torch.get_rng_state()},
        history=history,
    )
    ckpt.save(out_dir / "checkpoint.pt")
    return ckpt


def evaluate_model(
    model: MDPR,
    cfg: RunConfig,
    query: list[ImageRecord],
    gallery: list[ImageRecord],
    out_dir: Path | None = None,
) -> RetrievalMetrics:
    if not query:
        raise ValueError("empty query set")
    if not gallery:
        raise ValueError("empty gallery set")
    selection = cfg.selected_inference_names()
    q = extract_features(model, query, cfg.image_size, selection, normalize_components=cfg.normalize_components)
    g = extract_features(model, gallery, cfg.image_size, selection, normalize_components=cfg.normalize_components)
    results = rank(
        q,
        g,
        [r.identity for r in query],
        [r.camera for r in query],
        [r.identity for r in gallery],
        [r.camera for r in gallery],
    )
    metrics = compute_map_cmc(results)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        names = [r.path or i for i, r in enumerate(gallery)]
        write_rankings(results, out_dir / "rankings.csv", names)
        (out_dir / "eval_metrics.json").write_text(json.dumps(metrics.as_dict(), indent=2))
    return metrics


def run_evaluation(
    checkpoint: Checkpoint,
    dataset: DatasetSpec | None = None,
    out_dir: str | Path | None = None,
) -> RetrievalMetrics:
    """Rank the held-out gallery for every query and return mAP / CMC.

    Writes ``rankings.csv`` and ``eval_metrics.json`` to ``out_dir``
    (defaults to the run's output directory).
    """
    cfg = checkpoint.run_config
    spec = dataset or cfg.dataset
    model = checkpoint.build_model()
    recs = load_records(spec, cfg.image_size, cfg.seed, ("query", "gallery"))
    out = Path(out_dir) if out_dir is not None else cfg.resolved_output_dir()
    return evaluate_model(model, cfg, recs["query"], recs["gallery"], out)
