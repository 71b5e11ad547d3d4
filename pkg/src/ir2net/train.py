"""Training loop, evaluation and run artifacts (metrics CSV, checkpoints)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import data as D
from .autograd import ConfigError, Tensor, backward, default_dtype, get_tape, no_grad, precision
from .complexity import CONVENTIONS
from .config import TrainConfig
from .models import build
from .nn import Module
from .optim import Optimizer, make_optimizer, scheduled_lr
from .restrict import ires_step

METRIC_COLUMNS = ("epoch", "train_loss", "test_acc", "keep_fraction", "lr")

# numeric conventions a checkpoint is only meaningful under
NUMERIC_CONVENTIONS = {
    "binary_bit_one": "+1",
    "bit_packing": "lsb-first uint64 words along input channels",
    "sign_of_zero": "+1",
    "upsample": "bilinear, half-pixel centres (align_corners=false)",
    "adaptive_pool": "windows [floor(i*n/out), ceil((i+1)*n/out))",
    "ires_threshold": "per-sample lambda * mean, mask = attention >= tau",
}


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class Accuracy:
    correct: int
    total: int

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.correct, self.total) if self.total else Fraction(0)

    def __float__(self) -> float:
        return float(self.fraction)

    def __str__(self) -> str:
        return f"{self.correct}/{self.total}"


@dataclass
class RunResult:
    output_dir: Path
    metrics_path: Path
    checkpoints: list[Path]
    step_losses: list[float] = field(default_factory=list)
    final_accuracy: Accuracy | None = None
    model: Module | None = None


def to_input(images: np.ndarray, cfg: TrainConfig) -> Tensor:
    dtype = default_dtype()
    return Tensor(D.normalize(images, cfg.mean, cfg.std, dtype), dtype=dtype)


def evaluate(model: Module, split: D.Split, cfg: TrainConfig, batch_size: int = 200) -> Accuracy:
    """Eval-mode top-1 accuracy; only the plain forward pass runs."""
    num_classes = model.spec.num_classes
    if len(split) and int(split.labels.max()) >= num_classes:
        raise ConfigError(f"data has label {int(split.labels.max())} but the model has {num_classes} classes")
    was_training = model.training
    model.eval()
    correct = 0
    try:
        with no_grad():
            for images, labels in D.iterate_batches(split, batch_size):
                logits = model(to_input(images, cfg)).logits.data
                correct += int((logits.argmax(axis=1) == labels).sum())
    finally:
        model.train(was_training)
    return Accuracy(correct, len(split))


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def make_checkpoint(cfg: TrainConfig, model: Module, opt: Optimizer | None, epoch: int,
                    rng: np.random.Generator | None = None, meta: dict | None = None) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        config=cfg.to_dict(), model={k: np.array(v) for k, v in model.state_dict().items()},
        optim=opt.state_dict() if opt is not None else {}, epoch=epoch,
        rng_state=_rng_state(rng) if rng is not None else None,
        conventions={"complexity": dict(CONVENTIONS), **NUMERIC_CONVENTIONS}, meta=meta or {})


def model_from_checkpoint(ckpt: ckpt_io.Checkpoint) -> tuple[TrainConfig, Module]:
    cfg = TrainConfig.from_dict(ckpt.config)
    with precision(cfg.precision):
        model = build(cfg.backbone_spec())
        model.load_state_dict(ckpt.model)
    model.eval()
    return cfg, model


def evaluate_checkpoint(path: str | Path, data_dir: str | None = None) -> Accuracy:
    cfg, model = model_from_checkpoint(ckpt_io.load(path))
    source = data_dir if data_dir is not None else cfg.data_dir
    _, test = D.load_dataset(source, cfg.num_classes, cfg.train_subset, cfg.test_subset, cfg.seed, cfg.input_size)
    with precision(cfg.precision):
        return evaluate(model, test, cfg)


def _dump_diagnostic(out_dir: Path, step: int, lr: float, images: np.ndarray, labels: np.ndarray,
                     loss_value: float, stats) -> Path:
    path = out_dir / "diagnostic.json"
    info = {
        "step": step, "lr": lr, "loss": repr(loss_value),
        "batch": {"size": int(len(labels)), "pixel_mean": float(images.mean()), "pixel_std": float(images.std()),
                  "label_counts": np.bincount(labels).tolist()},
        "loss_original": repr(stats.loss_original), "loss_masked": repr(stats.loss_masked),
        "keep_fraction": stats.keep_fraction,
    }
    path.write_text(json.dumps(info, indent=2))
    return path


class Trainer:
    """Holds model, optimizer and RNG for one run; `step` is one optimizer update."""

    def __init__(self, cfg: TrainConfig, model: Module | None = None):
        self.cfg = cfg
        self.model = model if model is not None else build(cfg.backbone_spec())
        self.opt = make_optimizer(cfg, self.model)
        self.ires = cfg.ires_config()
        self.rng = np.random.default_rng(cfg.seed)

    def step(self, images: np.ndarray, labels: np.ndarray, lr: float):
        """Returns (loss value, StepStats); raises NonFiniteLossError before touching weights."""
        get_tape().reset()
        self.model.train()
        self.opt.lr = lr
        batch = images if not self.cfg.augment else D.augment(images, self.rng)
        loss, stats = ires_step(self.model, to_input(batch, self.cfg), labels, self.ires)
        value = loss.item()
        if not np.isfinite(value):
            get_tape().reset()
            raise NonFiniteLossError(value, stats)
        self.opt.zero_grad()
        backward(loss)
        self.opt.step()
        return value, stats


def train(cfg: TrainConfig, data: tuple[D.Split, D.Split] | None = None, log=None) -> RunResult:
    """Run the configured training and write metrics.csv plus checkpoints into cfg.output_dir."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    with precision(cfg.precision):
        if data is None:
            data = D.load_dataset(cfg.data_dir, cfg.num_classes, cfg.train_subset, cfg.test_subset, cfg.seed,
                                  cfg.input_size)
        train_split, test_split = data
        if len(train_split) and int(train_split.labels.max()) >= cfg.num_classes:
            raise ConfigError(f"training labels exceed num_classes={cfg.num_classes}")
        trainer = Trainer(cfg)
        steps_per_epoch = -(-len(train_split) // cfg.batch_size)
        total = cfg.epochs * steps_per_epoch
        if cfg.max_steps:
            total = min(total, cfg.max_steps)
        (out_dir / "config.txt").write_text(cfg.to_text())
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)

        step, losses, checkpoints = 0, [], []
        acc = None
        for epoch in range(1, cfg.epochs + 1):
            epoch_losses, keeps, lr = [], [], cfg.lr
            for images, labels in D.iterate_batches(train_split, cfg.batch_size, trainer.rng):
                if step >= total:
                    break
                lr = scheduled_lr(cfg.schedule, cfg.lr, step, total, steps_per_epoch, cfg.step_size, cfg.gamma)
                try:
                    value, stats = trainer.step(images, labels, lr)
                except NonFiniteLossError as exc:
                    diag = _dump_diagnostic(out_dir, step, lr, images, labels, exc.args[0], exc.args[1])
                    raise NonFiniteLossError(f"non-finite loss {exc.args[0]} at step {step}; see {diag}") from None
                step += 1
                losses.append(value)
                epoch_losses.append(value)
                if stats.keep_fraction is not None:
                    keeps.append(stats.keep_fraction)
                if log is not None:
                    log(f"epoch {epoch} step {step}/{total} loss {value:.4f} lr {lr:.3g}")
            if not epoch_losses:
                break
            acc = evaluate(trainer.model, test_split, cfg)
            row = [epoch, repr(float(np.mean(epoch_losses))), repr(float(acc)),
                   repr(float(np.mean(keeps))) if keeps else "", repr(lr)]
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(row)
            last = epoch == cfg.epochs or step >= total
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and not last:
                path = out_dir / f"epoch{epoch:03d}.ir2n"
                ckpt_io.save(make_checkpoint(cfg, trainer.model, trainer.opt, epoch, trainer.rng), path)
                checkpoints.append(path)
            if last:
                break
        path = out_dir / "final.ir2n"
        ckpt_io.save(make_checkpoint(cfg, trainer.model, trainer.opt, epoch, trainer.rng,
                                     meta={"tag": "final", "steps": step}), path)
        checkpoints.append(path)
    return RunResult(out_dir, metrics_path, checkpoints, losses, acc, trainer.model)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
