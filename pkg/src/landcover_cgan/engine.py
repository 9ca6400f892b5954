"""Adversarial (cgan) and supervised (cnn) training loops.

Both modes train the same U-Net generator. ``cgan`` alternates one
discriminator SGD update and one generator Adam update per batch; ``cnn``
takes a single Adam step on the weighted cross-entropy.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import torch
import yaml

from . import __version__
from .data import Manifest, TileDataset, one_hot
from .errors import NonFiniteLossError
from .losses import LossConfig, d_loss, g_adv_loss, g_total_loss, weighted_cross_entropy, weighted_l2
from .metrics import ConfusionAccumulator, MetricsReport, decode
from .nets import (Discriminator, Generator, NetworkSpec, build_discriminator, build_from_spec,
                   build_generator)
from .taxonomy import ClassWeights, compute_class_weights

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "landcover-cgan-checkpoint"
CHECKPOINT_VERSION = 1
MODES = ("cgan", "cnn")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_RUN_LENGTH_KEYS = ("max_epochs", "early_stop_patience", "stop_at_train_f1", "eval_train")


@dataclass
class TrainConfig:
    mode: str = "cgan"
    seed: int = 0
    batch_size: int = 8
    max_epochs: int = 200
    early_stop_patience: int = 10  # epochs without validation macro-F1 gain; 0 disables
    lam: float = 100.0
    width_multiplier: str = "1"
    g_lr: float = 2e-4
    g_betas: tuple[float, float] = (0.5, 0.99)
    d_lr: float = 2e-4
    adversarial_g_form: str = "non_saturating"
    reconstruction: str = "l2"
    per_tile_norm: bool = True
    harden_fake: bool = False
    precision: str = "float32"
    eval_dropout: bool = False
    eval_train: bool = False  # score the train split after every epoch
    stop_at_train_f1: float | None = None  # stop once train macro-F1 (fraction) reaches this
    cache_tiles: bool = True

    def __post_init__(self):
        self.width_multiplier = str(Fraction(self.width_multiplier).limit_denominator(1024)
                                    if isinstance(self.width_multiplier, float)
                                    else Fraction(self.width_multiplier))
        self.g_betas = tuple(float(b) for b in self.g_betas)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.g_lr > 0 and self.d_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.early_stop_patience < 0:
            raise ValueError("max_epochs and early_stop_patience must be >= 0")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
        self.loss_config  # validates loss fields

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, adversarial_g_form=self.adversarial_g_form,
                          reconstruction=self.reconstruction, per_tile=self.per_tile_norm)

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["g_betas"] = list(self.g_betas)
        return d

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(doc))

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        doc = yaml.safe_load(Path(path).read_text()) or {}
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a new best score."""

    patience: int
    best: float = -math.inf
    bad_epochs: int = 0

    def update(self, score: float) -> tuple[bool, bool]:
        """Record an epoch score; return ``(improved, should_stop)``."""
        if score > self.best:
            self.best = score
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.patience > 0 and self.bad_epochs >= self.patience


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_val_macro_f1: float = -math.inf
    bad_epochs: int = 0
    running: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Trainer:
    """Owns the networks, optimizers, and PRNG state of one training run."""

    def __init__(self, config: TrainConfig, class_weights: ClassWeights | Iterable[float]):
        self.config = config
        self.class_weights = (class_weights if isinstance(class_weights, ClassWeights)
                              else ClassWeights(tuple(float(v) for v in class_weights)))
        self.loss_config = config.loss_config
        self.dtype = config.dtype
        torch.manual_seed(config.seed)
        self.generator: Generator = build_generator(config.width_multiplier).to(self.dtype)
        self.discriminator: Discriminator | None = None
        self.opt_d = None
        if config.mode == "cgan":
            self.discriminator = build_discriminator(config.width_multiplier).to(self.dtype)
            self.opt_d = torch.optim.SGD(self.discriminator.parameters(), lr=config.d_lr)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=config.g_lr, betas=config.g_betas)
        self._w = torch.tensor(self.class_weights.as_array(), dtype=self.dtype)
        self.state = TrainState()
        self.meta: dict[str, Any] = {}
        self.dump_dir: Path | None = None

    # steps

    def _tensors(self, images, labels_onehot):
        x = torch.as_tensor(np.asarray(images), dtype=self.dtype)
        y = torch.as_tensor(np.asarray(labels_onehot), dtype=self.dtype)
        return x, y

    def _check_finite(self, value: torch.Tensor, name: str, x, y, batch_index):
        if torch.isfinite(value).all():
            return
        dump = None
        if self.dump_dir is not None:
            dump = self.dump_dir / f"nonfinite_step{self.state.step}_batch{batch_index}.pt"
            torch.save({"images": x, "labels": y, "step": self.state.step, "batch_index": batch_index}, dump)
        raise NonFiniteLossError(
            f"{name} is not finite at step {self.state.step}, batch {batch_index}"
            + (f"; batch dumped to {dump}" if dump else ""),
            step=self.state.step, batch_index=batch_index, dump_path=dump)

    def d_update(self, x: torch.Tensor, y: torch.Tensor, fake: torch.Tensor, batch_index=None) -> float:
        """One SGD step of the discriminator; ``fake`` is detached from the generator."""
        D = self.discriminator
        D.train()
        fake = fake.detach()
        if self.config.harden_fake:
            fake = torch.nn.functional.one_hot(fake.argmax(1), fake.shape[1]).permute(0, 3, 1, 2).to(fake.dtype)
        self.opt_d.zero_grad(set_to_none=True)
        loss = d_loss(D(x, y), D(x, fake))
        self._check_finite(loss, "discriminator loss", x, y, batch_index)
        loss.backward()
        self.opt_d.step()
        return loss.item()

    def g_update(self, x: torch.Tensor, y: torch.Tensor, fake: torch.Tensor, batch_index=None):
        """One Adam step of the generator on ``adv + lambda * rec`` with D frozen."""
        D = self.discriminator
        D.requires_grad_(False)
        try:
            self.opt_g.zero_grad(set_to_none=True)
            adv = g_adv_loss(D(x, fake), self.loss_config.adversarial_g_form)
            rec = weighted_l2(y, fake, self._w, per_tile=self.loss_config.per_tile,
                              norm=self.loss_config.reconstruction)
            self._check_finite(adv + rec, "generator loss", x, y, batch_index)
            value = g_total_loss(adv, rec, self.loss_config)
            value.total.backward()
            self.opt_g.step()
        finally:
            D.requires_grad_(True)
        return value

    def cgan_step(self, images, labels_onehot, batch_index=None) -> dict[str, float]:
        x, y = self._tensors(images, labels_onehot)
        self.generator.train()
        fake = self.generator(x)
        ld = self.d_update(x, y, fake, batch_index)
        value = self.g_update(x, y, fake, batch_index)
        self.state.step += 1
        return {"d_loss": ld, **value.as_floats()}

    def cnn_step(self, images, labels_onehot, batch_index=None) -> dict[str, float]:
        x, y = self._tensors(images, labels_onehot)
        self.generator.train()
        self.opt_g.zero_grad(set_to_none=True)
        loss = weighted_cross_entropy(y, self.generator(x), self._w)
        self._check_finite(loss, "cross-entropy loss", x, y, batch_index)
        loss.backward()
        self.opt_g.step()
        self.state.step += 1
        return {"ce": loss.item()}

    def step(self, images, labels_onehot, batch_index=None) -> dict[str, float]:
        if self.config.mode == "cgan":
            return self.cgan_step(images, labels_onehot, batch_index)
        return self.cnn_step(images, labels_onehot, batch_index)

    # inference

    def predict(self, images) -> torch.Tensor:
        return predict(self.generator, images, self.dtype, self.config.eval_dropout)

    def evaluate(self, dataset: TileDataset, split: str, model: str | None = None) -> MetricsReport:
        return evaluate(self.generator, dataset, split, model or self.config.mode,
                        self.config.batch_size, self.dtype, self.config.eval_dropout)

    # checkpoints

    def checkpoint(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "mode": self.config.mode,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "class_weights": list(self.class_weights.w),
            "generator_spec": self.generator.spec.to_dict(),
            "discriminator_spec": self.discriminator.spec.to_dict() if self.discriminator else None,
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict() if self.discriminator else None,
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict() if self.opt_d else None,
            "state": self.state.to_dict(),
            "rng": {"torch": torch.get_rng_state()},
            "meta": dict(self.meta),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.checkpoint(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Trainer":
        ckpt = read_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(ckpt["config"]), ckpt["class_weights"])
        trainer.load_state(ckpt)
        return trainer

    def load_state(self, ckpt: dict) -> None:
        self.generator.load_state_dict(ckpt["generator"])
        self.opt_g.load_state_dict(ckpt["opt_g"])
        if self.discriminator is not None:
            self.discriminator.load_state_dict(ckpt["discriminator"])
            self.opt_d.load_state_dict(ckpt["opt_d"])
        self.state = TrainState(**ckpt["state"])
        self.meta = dict(ckpt.get("meta") or {})
        torch.set_rng_state(ckpt["rng"]["torch"])


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def checkpoint_dtype(ckpt: dict) -> torch.dtype:
    return _DTYPES[ckpt["config"]["precision"]]


def load_generator(path: str | Path) -> tuple[Generator, dict]:
    """Rebuild the generator stored in a checkpoint, in eval mode."""
    ckpt = read_checkpoint(path)
    gen = build_from_spec(NetworkSpec.from_dict(ckpt["generator_spec"]))
    gen.to(checkpoint_dtype(ckpt)).load_state_dict(ckpt["generator"])
    gen.eval()
    return gen, ckpt


def _set_eval(gen: Generator, dropout: bool) -> None:
    gen.eval()
    if dropout:
        for m in gen.modules():
            if isinstance(m, torch.nn.Dropout):
                m.train()


def predict(gen: Generator, images, dtype=torch.float32, dropout: bool = False) -> torch.Tensor:
    """Soft label maps for normalised images, without gradients."""
    _set_eval(gen, dropout)
    with torch.no_grad():
        return gen(torch.as_tensor(np.asarray(images), dtype=dtype))


def evaluate(gen: Generator, dataset: TileDataset, split: str, model: str = "",
             batch_size: int = 8, dtype=torch.float32, dropout: bool = False) -> MetricsReport:
    if len(dataset) == 0:
        raise ValueError(f"split {split!r} has no tiles")
    acc = ConfusionAccumulator()
    for images, labels, _ in dataset.batches(batch_size, split=split, shuffle=False):
        acc.update(decode(predict(gen, images, dtype, dropout)), labels)
    return MetricsReport.from_confusion(acc.matrix, split, model, tiles=acc.tiles,
                                        per_tile_macro_f1=100.0 * float(np.mean(acc.tile_macro)))


@dataclass
class FitResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    history: list[dict]
    trainer: Trainer


def fit(config: TrainConfig, manifest: Manifest, run_dir: str | Path,
        resume: str | Path | None = None) -> FitResult:
    """Train until ``max_epochs`` or early stopping on validation macro-F1.

    Writes ``config.yaml``, ``train_log.jsonl`` (one record per step and per
    epoch), ``best.ckpt`` and ``last.ckpt`` into ``run_dir``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train = TileDataset(manifest.split("train"), cache=config.cache_tiles)
    val = TileDataset(manifest.split("validation"), cache=config.cache_tiles)
    if len(train) == 0:
        raise ValueError("train split is empty")
    if len(val) == 0:
        raise ValueError("validation split is empty")

    if resume is not None:
        trainer = Trainer.from_checkpoint(resume)
        # run length may be extended; everything else comes from the checkpoint
        run_length = {k: getattr(config, k) for k in _RUN_LENGTH_KEYS}
        saved = trainer.config.replace(**run_length)
        if saved.to_dict() != config.to_dict():
            log.warning("resuming with the checkpoint's config; supplied config differs")
        config = trainer.config = saved
    else:
        trainer = Trainer(config, compute_class_weights(train.labels()))
    trainer.dump_dir = run_dir
    trainer.meta["train_regions"] = sorted(manifest.regions("train", "validation"))
    (run_dir / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))

    best_path, last_path = run_dir / "best.ckpt", run_dir / "last.ckpt"
    log_path = run_dir / "train_log.jsonl"
    stopper = EarlyStopping(config.early_stop_patience, trainer.state.best_val_macro_f1,
                            trainer.state.bad_epochs)
    history: list[dict] = []
    if trainer.state.epoch == 0 and resume is None:
        trainer.save(best_path)
        trainer.save(last_path)
    t0 = time.perf_counter()
    with open(log_path, "a" if resume is not None else "w") as logf:
        def emit(rec):
            rec["wall_time"] = round(time.perf_counter() - t0, 3)
            logf.write(json.dumps(rec) + "\n")
            logf.flush()
            history.append(rec)

        for epoch in range(trainer.state.epoch, config.max_epochs):
            sums: dict[str, float] = {}
            n_batches = 0
            for b, (images, labels, names) in enumerate(train.batches(config.batch_size, config.seed, epoch)):
                losses = trainer.step(images, one_hot(labels), batch_index=b)
                for k, v in losses.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
                emit({"kind": "step", "step": trainer.state.step, "epoch": epoch, "batch": b,
                      **losses, "lr_g": config.g_lr, **({"lr_d": config.d_lr} if config.mode == "cgan" else {}),
                      "tiles": names})
            trainer.state.running = {k: v / n_batches for k, v in sums.items()}
            val_report = trainer.evaluate(val, "validation")
            record = {"kind": "epoch", "epoch": epoch, "step": trainer.state.step,
                      **{f"mean_{k}": v for k, v in trainer.state.running.items()},
                      "val_macro_f1": val_report.macro_f1}
            train_f1 = None
            if config.eval_train or config.stop_at_train_f1 is not None:
                train_f1 = trainer.evaluate(train, "train").macro_f1
                record["train_macro_f1"] = train_f1
            improved, stop = stopper.update(val_report.macro_f1)
            trainer.state.epoch = epoch + 1
            trainer.state.best_val_macro_f1 = stopper.best
            trainer.state.bad_epochs = stopper.bad_epochs
            record["improved"] = improved
            emit(record)
            log.info("epoch %d: %s", epoch, {k: v for k, v in record.items() if k.startswith(("mean", "val", "train"))})
            if improved:
                trainer.save(best_path)
            trainer.save(last_path)
            if stop:
                log.info("early stop after %d epochs without improvement", stopper.bad_epochs)
                break
            if train_f1 is not None and config.stop_at_train_f1 is not None and train_f1 >= config.stop_at_train_f1:
                log.info("train macro-F1 %.4f reached target %.4f", train_f1, config.stop_at_train_f1)
                break
    return FitResult(best_path, last_path, log_path, history, trainer)


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def audit_batches(log_path: str | Path, manifest: Manifest) -> list[str]:
    """Return names of test-split tiles that appear in any logged training batch."""
    test_names = {r.name for r in manifest.split("test")}
    test_regions = manifest.regions("test")
    region_of = {r.name: r.region for r in manifest}
    leaks = []
    for rec in read_log(log_path):
        for name in rec.get("tiles", ()):
            if name in test_names or region_of.get(name) in test_regions:
                leaks.append(name)
    return leaks
