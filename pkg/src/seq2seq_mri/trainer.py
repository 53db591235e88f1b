"""Generator/discriminator training with per-subject sequence silencing."""
from __future__ import annotations

import logging
import math
import os
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import config as cfgmod
from .errors import CheckpointError, ConfigError, DataError
from .generator.model import GeneratorConfig, Seq2SeqGenerator
from .metrics import psnr
from .objectives import (
    DiscriminatorBank,
    FeatureExtractor,
    LossWeights,
    cycle_loss,
    discriminator_loss,
    generator_adv_loss,
    reconstruction_loss,
    set_requires_grad,
)
from .runlog import CsvLog, EventLog
from .volume_io import Study, extract_25d_slab, frames_of, load_study, read_manifest

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "loss_total", "loss_rec", "loss_adv_g", "loss_adv_d", "loss_cyc", "n_rec_terms")


# ---------------------------------------------------------------- configuration

@dataclass
class DataConfig:
    manifest: str = ""
    train_split: str = "train"
    val_split: str = "val"
    max_train_subjects: int | None = None
    max_val_subjects: int | None = 16
    crop_size: int | None = None
    silencing: str = "none"  # "none" | "random"
    max_silenced: int = 3
    sequence_frames: list | None = None  # frame count per sequence, for cycle targets
    clip_lo: float = 0.0
    clip_hi: float = 100.0


@dataclass
class LossConfig(LossWeights):
    perceptual_backend: str = "vgg19"
    perceptual_weights: str | None = None
    perceptual_width: float = 0.25
    disc_base_channels: int = 64


@dataclass
class OptimConfig:
    steps: int = 1000
    epochs: int | None = None  # overrides steps when set
    batch_size: int = 1
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    checkpoint_every: int = 1000
    val_every: int = 1000


@dataclass
class TrainConfig:
    seed: int = 0
    out_dir: str = "runs/train"
    deterministic: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    model: GeneratorConfig = field(default_factory=GeneratorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.train.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.train.epochs is None and self.train.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.train.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.data.silencing not in ("none", "random"):
            raise ConfigError(f"unknown silencing policy {self.data.silencing!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cfgmod.from_dict(cls, doc)

    def to_dict(self) -> dict:
        return cfgmod.to_dict(self)

    def total_steps(self, n_subjects: int) -> int:
        if self.train.epochs is not None:
            return self.train.epochs * math.ceil(n_subjects / self.train.batch_size)
        return self.train.steps


def seed_everything(seed: int, deterministic: bool = True):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=False)


# ---------------------------------------------------------------- silencing

@dataclass
class AvailabilityPlan:
    mask: np.ndarray  # (n_subjects, S) bool, True = kept

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2 or not self.mask.any(axis=1).all():
            raise DataError("every subject must keep at least one sequence")

    def keeps(self, subject: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.mask[subject])]


def make_availability_plan(subjects, n_sequences: int, seed: int, max_silenced: int = 3) -> AvailabilityPlan:
    """Silence ``k ~ U{1..min(max_silenced, S-1)}`` distinct sequences per subject.

    The plan is fixed for the whole run.
    """
    if n_sequences < 2:
        raise ConfigError("silencing needs at least two sequences")
    n = subjects if isinstance(subjects, int) else len(subjects)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA7A1]))
    k_max = max(1, min(max_silenced, n_sequences - 1))
    mask = np.ones((n, n_sequences), dtype=bool)
    for s in range(n):
        k = int(rng.integers(1, k_max + 1))
        mask[s, rng.choice(n_sequences, size=k, replace=False)] = False
    absent = np.flatnonzero(~mask.any(axis=0))
    if absent.size:
        warnings.warn(f"sequences {absent.tolist()} are silenced in every subject", RuntimeWarning)
    return AvailabilityPlan(mask)


# ---------------------------------------------------------------- data

class TrainingSet:
    """Serves the sequences a subject keeps under an availability plan.

    Only kept sequences are ever read from the underlying studies.
    """

    def __init__(self, studies: Sequence[Study], plan: AvailabilityPlan | None = None,
                 in_channels: int = 3, crop_size: int | None = None):
        self.studies = studies
        self.plan = plan
        self.in_channels = in_channels
        self.crop_size = crop_size
        if plan is not None and len(plan.mask) != len(studies):
            raise DataError("availability plan and study list differ in length")

    def __len__(self):
        return len(self.studies)

    def available(self, idx: int) -> list[int]:
        study = self.studies[idx]
        have = study.available
        if self.plan is None:
            return have
        keep = set(self.plan.keeps(idx))
        return [i for i in have if i in keep]

    def sample(self, idx: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
        """One subject's kept sequences at a shared random axial index and
        crop, each as ``(T, C, H, W)``."""
        study = self.studies[idx]
        seqs = {i: frames_of(study.sequences[i]) for i in self.available(idx)}
        if not seqs:
            return {}
        ref = next(iter(seqs.values()))[0]
        k = int(rng.integers(ref.shape[0])) if ref.ndim == 3 else None
        out = {i: np.stack([self._slab(f.data, k) for f in frames]) for i, frames in seqs.items()}
        if self.crop_size:
            h, w = ref.shape[-2:]
            c = self.crop_size
            if c > h or c > w:
                raise DataError(f"crop {c} larger than image {h}x{w}")
            y, x = int(rng.integers(h - c + 1)), int(rng.integers(w - c + 1))
            out = {i: a[..., y:y + c, x:x + c] for i, a in out.items()}
        return out

    def _slab(self, data, k):
        if k is None:
            return np.repeat(data[None], self.in_channels, axis=0)
        if self.in_channels == 3:
            return extract_25d_slab(data, k)
        return data[k:k + 1]


def collate(samples: list[dict[int, np.ndarray]]) -> dict[int, tuple[list[int], torch.Tensor]]:
    """Group per sequence: ``{i: (member rows, tensor (b_i, T, C, H, W))}``."""
    batch = {}
    for i in sorted({k for s in samples for k in s}):
        rows = [r for r, s in enumerate(samples) if i in s]
        try:
            x = np.stack([samples[r][i] for r in rows]).astype(np.float32)
        except ValueError as e:
            raise DataError(f"sequence {i} has mismatched shapes within a batch") from e
        batch[i] = (rows, torch.from_numpy(x))
    return batch


def _pair_rows(batch, i, j):
    rows_i, rows_j = batch[i][0], batch[j][0]
    common = sorted(set(rows_i) & set(rows_j))
    return [rows_i.index(r) for r in common], [rows_j.index(r) for r in common]


# ---------------------------------------------------------------- training

@dataclass
class LossRecord:
    step: int
    total: float = 0.0
    rec_terms: dict = field(default_factory=dict)
    adv_g: float = 0.0
    adv_d: float = 0.0
    cyc: float = 0.0
    skipped: bool = False

    @property
    def rec(self) -> float:
        return float(sum(self.rec_terms.values()))

    def row(self) -> dict:
        return {"step": self.step, "loss_total": self.total, "loss_rec": self.rec,
                "loss_adv_g": self.adv_g, "loss_adv_d": self.adv_d, "loss_cyc": self.cyc,
                "n_rec_terms": len(self.rec_terms)}


class Trainer:
    def __init__(self, cfg: TrainConfig, generator: Seq2SeqGenerator | None = None):
        self.cfg = cfg
        seed_everything(cfg.seed, cfg.deterministic)
        self.generator = generator or Seq2SeqGenerator(cfg.model)
        self.weights: LossWeights = cfg.loss
        self.extractor = None
        if cfg.loss.lambda_p > 0:
            self.extractor = FeatureExtractor(cfg.loss.perceptual_backend, cfg.loss.perceptual_weights,
                                              cfg.loss.perceptual_width)
        betas = tuple(cfg.train.betas)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), cfg.train.learning_rate, betas)
        self.discriminators = None
        self.opt_d = None
        if cfg.loss.adversarial:
            self.discriminators = DiscriminatorBank(cfg.model.n_sequences, cfg.model.out_channels,
                                                    cfg.loss.disc_base_channels)
            self.opt_d = torch.optim.Adam(self.discriminators.parameters(), cfg.train.learning_rate, betas)
        self.step_count = 0
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
        self._order: list[int] = []
        self.best_val = -math.inf

    # ---- single update

    def _frames(self, batch, j):
        if j in batch:
            return batch[j][1].shape[1]
        sf = self.cfg.data.sequence_frames
        return int(sf[j]) if sf else 1

    def train_step(self, batch: dict) -> LossRecord:
        """One update on a collated batch; reconstruction terms over all kept ordered
        pairs (i, j) including i == j, then optional adversarial/cycle terms."""
        rec = LossRecord(step=self.step_count + 1)
        if not batch:
            warnings.warn("empty availability: step skipped", RuntimeWarning)
            rec.skipped = True
            return rec
        G, w = self.generator, self.weights
        G.train()
        self.opt_g.zero_grad(set_to_none=True)
        latents = {i: G.encode_sequence(x) for i, (_, x) in batch.items()}
        loss = 0.0
        fakes = {}
        for i in batch:
            for j in batch:
                si, sj = _pair_rows(batch, i, j)
                if not si:
                    continue
                target = batch[j][1][sj]
                pred = G.decode_sequence(latents[i][si], j, target.shape[1])
                term = reconstruction_loss(pred, target, w, self.extractor)
                rec.rec_terms[(i, j)] = term.item()
                loss = loss + term
                if i != j:
                    fakes[(i, j)] = (pred, target)

        if self.discriminators is not None and fakes:
            D = self.discriminators
            set_requires_grad(D, True)
            self.opt_d.zero_grad(set_to_none=True)
            d_loss = sum(discriminator_loss(D[j], real, fake) for (i, j), (fake, real) in fakes.items())
            d_loss.backward()
            self.opt_d.step()
            self.opt_d.zero_grad(set_to_none=True)
            rec.adv_d = d_loss.item()
            set_requires_grad(D, False)
            g_adv = sum(generator_adv_loss(D[j], fake) for (i, j), (fake, _) in fakes.items())
            rec.adv_g = g_adv.item()
            loss = loss + w.lambda_adv * g_adv

        if w.cycle and G.n_sequences > 1:
            cyc = 0.0
            for i, (_, x_i) in batch.items():
                for j in range(G.n_sequences):
                    if j == i:
                        continue
                    fake = G.decode_sequence(latents[i], j, self._frames(batch, j))
                    back = G(fake, i, x_i.shape[1])
                    cyc = cyc + cycle_loss(x_i, back)
            rec.cyc = float(cyc.item())
            loss = loss + w.lambda_cyc * cyc

        loss.backward()
        self.opt_g.step()
        if self.discriminators is not None:
            set_requires_grad(self.discriminators, True)
        self.step_count += 1
        rec.total = float(loss.item())
        return rec

    # ---- loop

    def next_batch(self, data: TrainingSet) -> dict:
        bs = self.cfg.train.batch_size
        if len(self._order) < bs:
            self._order += self.rng.permutation(len(data)).tolist()
        idx, self._order = self._order[:bs], self._order[bs:]
        return collate([s for s in (data.sample(i, self.rng) for i in idx) if s])

    def fit(self, data: TrainingSet, steps: int, out_dir=None, val_studies=None,
            on_step=None) -> list[LossRecord]:
        """Run until ``steps`` optimizer steps in total have been taken."""
        out = ensure_writable(out_dir or self.cfg.out_dir)
        csv_log = CsvLog(out / "train_log.csv", LOG_COLUMNS, append=self.step_count > 0)
        events = EventLog(out / "events.jsonl")
        events("train_start", step=self.step_count, target_steps=steps, subjects=len(data))
        history = []
        ckpt_every, val_every = self.cfg.train.checkpoint_every, self.cfg.train.val_every
        while self.step_count < steps:
            rec = self.train_step(self.next_batch(data))
            if rec.skipped:
                continue
            history.append(rec)
            csv_log.write(rec.row())
            if on_step:
                on_step(rec)
            if val_studies and (self.step_count % val_every == 0 or self.step_count == steps):
                val = validate(self.generator, val_studies)
                events("validation", step=self.step_count, val_psnr=val)
                if val > self.best_val:
                    self.best_val = val
                    save_checkpoint(out / "best.pt", self)
            if self.step_count % ckpt_every == 0 or self.step_count == steps:
                save_checkpoint(out / "last.pt", self)
                events("checkpoint", step=self.step_count, loss=rec.total)
        events("train_end", step=self.step_count)
        return history


def ensure_writable(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise DataError(f"output directory {out} is not writable: {e}") from e
    return out


def train_step(batch: dict, state: Trainer) -> LossRecord:
    return state.train_step(batch)


@torch.no_grad()
def validate(generator: Seq2SeqGenerator, studies: Sequence[Study]) -> float:
    """Mean PSNR over kept ordered pairs i != j at each study's central slab."""
    from .generator.translate import image_to_tensor, translate_tensor

    scores = []
    c = generator.cfg.in_channels
    for st in studies:
        xs = {}
        for i in st.available:
            t = image_to_tensor(st.sequences[i], c)
            xs[i] = t[t.shape[0] // 2: t.shape[0] // 2 + 1]
        for i in xs:
            for j in xs:
                if i == j:
                    continue
                pred = translate_tensor(generator, xs[i], j, xs[j].shape[1])
                mid = pred.shape[2] // 2
                scores.append(psnr(pred[:, :, mid].numpy(), xs[j][:, :, mid].numpy()))
    return float(np.mean(scores)) if scores else float("nan")


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, trainer: Trainer) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "seq2seq_mri.generator",
        "step": trainer.step_count,
        "generator_config": trainer.generator.cfg.to_dict(),
        "train_config": trainer.cfg.to_dict(),
        "generator": trainer.generator.state_dict(),
        "optim_g": trainer.opt_g.state_dict(),
        "discriminators": trainer.discriminators.state_dict() if trainer.discriminators else None,
        "optim_d": trainer.opt_d.state_dict() if trainer.opt_d else None,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": trainer.rng.bit_generator.state,
        "order": list(trainer._order),
        "best_val": trainer.best_val,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # zip/pickle errors surface as many types
        raise CheckpointError(f"corrupted or unreadable checkpoint {path}: {e}") from e
    if not isinstance(state, dict) or "format_version" not in state:
        raise CheckpointError(f"{path} is not a seq2seq_mri checkpoint")
    if state["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format {state['format_version']} is incompatible with "
            f"this version (expects {CHECKPOINT_VERSION})"
        )
    return state


def load_generator(path) -> Seq2SeqGenerator:
    state = load_checkpoint(path)
    g = Seq2SeqGenerator(cfgmod.from_dict(GeneratorConfig, state["generator_config"]))
    g.load_state_dict(state["generator"])
    return g.eval()


def resume(path, cfg: TrainConfig | None = None) -> Trainer:
    state = load_checkpoint(path)
    cfg = cfg or TrainConfig.from_dict(state["train_config"])
    trainer = Trainer(cfg)
    trainer.generator.load_state_dict(state["generator"])
    trainer.opt_g.load_state_dict(state["optim_g"])
    if trainer.discriminators is not None and state["discriminators"] is not None:
        trainer.discriminators.load_state_dict(state["discriminators"])
        trainer.opt_d.load_state_dict(state["optim_d"])
    trainer.step_count = int(state["step"])
    torch.set_rng_state(state["torch_rng"])
    trainer.rng.bit_generator.state = state["numpy_rng"]
    trainer._order = list(state["order"])
    trainer.best_val = float(state["best_val"])
    return trainer


# ---------------------------------------------------------------- entry point

def load_split(manifest: dict, split: str | None, limit: int | None = None,
               clip=(0.0, 100.0)) -> list[Study]:
    entries = [e for e in manifest["studies"] if split is None or e.get("split", "train") == split]
    if limit is not None:
        entries = entries[:limit]
    return [load_study(e, manifest, clip=clip) for e in entries]


@dataclass
class TrainResult:
    last: Path
    best: Path | None
    steps: int
    history: list


def train(cfg: TrainConfig, studies: Sequence[Study] | None = None,
          val_studies: Sequence[Study] | None = None, resume_from=None) -> TrainResult:
    """Train a generator; studies default to the manifest named in the config."""
    if studies is None:
        if not cfg.data.manifest:
            raise ConfigError("data.manifest is required")
        manifest = read_manifest(cfg.data.manifest)
        clip = (cfg.data.clip_lo, cfg.data.clip_hi)
        studies = load_split(manifest, cfg.data.train_split, cfg.data.max_train_subjects, clip)
        if val_studies is None and cfg.data.max_val_subjects != 0:
            val_studies = load_split(manifest, cfg.data.val_split, cfg.data.max_val_subjects, clip)
    if not studies:
        raise DataError("no training subjects")
    plan = None
    if cfg.data.silencing == "random":
        plan = make_availability_plan(len(studies), cfg.model.n_sequences, cfg.seed, cfg.data.max_silenced)
    data = TrainingSet(studies, plan, cfg.model.in_channels, cfg.data.crop_size)
    out = ensure_writable(cfg.out_dir)
    trainer = resume(resume_from, cfg) if resume_from else Trainer(cfg)
    cfgmod.save_yaml(cfg.to_dict(), out / "resolved_config.yaml")
    steps = cfg.total_steps(len(studies))
    history = trainer.fit(data, steps, out, val_studies)
    best = out / "best.pt"
    return TrainResult(out / "last.pt", best if best.exists() else None, trainer.step_count, history)
