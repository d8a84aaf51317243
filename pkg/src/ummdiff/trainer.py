"""Training protocol: text-to-image pretraining, then the two TIUE phases.

Phase 1 trains only the projector against the frozen denoiser; phase 2 also
unfreezes the denoiser and keeps an EMA shadow of everything trainable. The
text and image trunks stay frozen after pretraining.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datagen import Manifest
from .diffusion import training_loss
from .encoders import Vocabulary, tokenize
from .model import ModelConfig, UMMDiffusion

log = logging.getLogger(__name__)

NULL, MULTIMODAL, TEXT = 0, 1, 2
KIND_NAMES = {NULL: "null", MULTIMODAL: "multimodal", TEXT: "text"}

# published schedule: 200k iterations per phase at batch 192, lr 1e-5, EMA 0.9999
PUBLISHED_ITERATIONS = 200_000
PUBLISHED_BATCH_SIZE = 192


@dataclass
class TrainConfig:
    phase: str = "phase1"
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 1e-5
    ema_decay: float = 0.9999
    cond_probs: tuple = (0.10, 0.54, 0.36)   # null, multi-modal, pure text
    uncond_prob: float = 0.10                # pretraining only
    seed: int = 0
    log_every: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.cond_probs = tuple(float(p) for p in self.cond_probs)
        if len(self.cond_probs) != 3 or min(self.cond_probs) < 0 or abs(sum(self.cond_probs) - 1) > 1e-9:
            raise ValueError(f"cond_probs must be three non-negative numbers summing to 1, got {self.cond_probs}")

    def to_dict(self):
        d = asdict(self)
        d["cond_probs"] = list(self.cond_probs)
        return d


def draw_condition(has_subjects, probs, rng: np.random.Generator) -> np.ndarray:
    """Categorical draw of NULL / MULTIMODAL / TEXT per sample.

    Samples without subjects cannot take the multi-modal branch; that mass
    goes to the pure-text branch.
    """
    has_subjects = np.atleast_1d(np.asarray(has_subjects, bool))
    u = rng.random(has_subjects.shape)
    p_null, p_multi, _ = probs
    kinds = np.where(u < p_null, NULL, np.where(u < p_null + p_multi, MULTIMODAL, TEXT))
    kinds[(kinds == MULTIMODAL) & ~has_subjects] = TEXT
    return kinds


@dataclass
class CorpusArrays:
    images: np.ndarray                 # (N, H, W, C)
    ids: np.ndarray                    # (N, L)
    crops: list = field(default_factory=list)      # per sample: (k, S, S, C) prepared crops
    positions: list = field(default_factory=list)  # per sample: (k,) positions

    def __len__(self):
        return len(self.images)

    @property
    def has_subjects(self) -> np.ndarray:
        return np.array([len(p) > 0 for p in self.positions])


def load_corpus(corpus, model: UMMDiffusion, limit: int | None = None) -> CorpusArrays:
    manifest = corpus if isinstance(corpus, Manifest) else Manifest.read(corpus)
    records = manifest.records[:limit] if limit else manifest.records
    if not records:
        raise ValueError("corpus is empty")
    images, ids, crops, positions = [], [], [], []
    empty = np.zeros((0,) + (model.config.encoder.img_size,) * 2 + (3,), np.float32)
    for rec in records:
        s = manifest.load_sample(rec)
        images.append(s.image)
        ids.append(tokenize(s.caption, model.vocab, model.config.encoder.max_len).ids)
        crops.append(model.image.prepare([x.crop for x in s.subjects]) if s.subjects else empty)
        positions.append(np.array([x.position for x in s.subjects], int))
    return CorpusArrays(np.stack(images), np.stack(ids), crops, positions)


def batch_loss(model: UMMDiffusion, data: CorpusArrays, idx: np.ndarray, kinds: np.ndarray,
               rng: np.random.Generator, t=None, eps=None) -> nx.Tensor:
    """Noise-prediction loss under the drawn conditions (TIUE in the loop)."""
    ids = data.ids[idx]
    rows, positions, crops = [], [], []
    for r, (i, k) in enumerate(zip(idx, kinds)):
        if k == MULTIMODAL:
            rows += [r] * len(data.positions[i])
            positions.extend(data.positions[i])
            crops.append(data.crops[i])
    crops = np.concatenate(crops) if crops else None
    enc = model.tiue.encode_batch(ids, crops, np.array(rows, int), np.array(positions, int))
    null_mask = kinds == NULL

    def eps_model(x_t, t_):
        return model.denoiser(x_t, t_, enc.h_u, null_mask)

    return training_loss(eps_model, data.images[idx], model.schedule, rng, t=t, eps=eps)


class EmaTracker:
    """shadow <- decay * shadow + (1 - decay) * param, after every optimizer step."""

    def __init__(self, store: nx.ParameterStore, names, decay: float):
        self.store, self.decay = store, decay
        self.shadow = {n: store[n].data.copy() for n in names}

    def update(self) -> None:
        d = self.decay
        for n, s in self.shadow.items():
            self.shadow[n] = (d * s + (1.0 - d) * self.store[n].data).astype(s.dtype)

    def arrays(self) -> dict:
        return {f"ema/{n}": v for n, v in self.shadow.items()}


class MetricsLog:
    """Append-only CSV: step, phase, loss, lr."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "phase", "loss", "lr"])

    def write(self, step, phase, loss, lr):
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([step, phase, f"{loss:.6f}", lr])


def run_training(model: UMMDiffusion, data: CorpusArrays, cfg: TrainConfig,
                 metrics_path=None, track_ema: bool = False) -> dict:
    """Optimise the model's current trainable set. Returns the loss history and EMA."""
    rng = np.random.default_rng(cfg.seed)
    state = nx.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    ema = EmaTracker(model.store, model.store.trainable_names(), cfg.ema_decay) if track_ema else None
    logger = MetricsLog(metrics_path)
    has_subjects = data.has_subjects
    losses, running = [], []
    for step in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        if cfg.phase == "pretrain":
            kinds = np.where(rng.random(cfg.batch_size) < cfg.uncond_prob, NULL, TEXT)
        else:
            kinds = draw_condition(has_subjects[idx], cfg.cond_probs, rng)
        loss = batch_loss(model, data, idx, kinds, rng)
        grads = model.store.gradients(loss)
        nx.adam_step(model.store, grads, state)
        if ema:
            ema.update()
        losses.append(loss.item())
        running.append(loss.item())
        if step % cfg.log_every == 0 or step == cfg.iterations:
            avg = float(np.mean(running))
            running = []
            logger.write(step, cfg.phase, avg, cfg.lr)
            log.info("%s step %d loss %.4f", cfg.phase, step, avg)
    return {"losses": np.array(losses), "ema": ema}


def _checkpoint_meta(cfg: TrainConfig, extra=None) -> dict:
    return {"phase": cfg.phase, "train_config": cfg.to_dict(), **(extra or {})}


def pretrain_t2i(cfg: TrainConfig, corpus, out_path, model_config: ModelConfig | None = None,
                 metrics_path=None, vocab: Vocabulary | None = None):
    """Train text encoder + denoiser on (image, caption) pairs.

    The checkpoint holds raw and EMA weights; the later phases start from the EMA.
    """
    manifest = Manifest.read(corpus)
    if vocab is None:
        vocab_file = manifest.root / "vocab.txt"
        if not vocab_file.exists():
            raise FileNotFoundError(f"vocabulary file missing: {vocab_file}")
        vocab = Vocabulary.load(vocab_file)
    model = UMMDiffusion(vocab, model_config)
    data = load_corpus(manifest, model)
    model.set_phase("pretrain")
    cfg = TrainConfig(**{**cfg.to_dict(), "phase": "pretrain"})
    hist = run_training(model, data, cfg, metrics_path, track_ema=True)
    model.set_phase("frozen")
    model.save(out_path, extra=hist["ema"].arrays(),
               meta=_checkpoint_meta(cfg, {"sampling_weights": "ema"}))
    return model, hist


def _load_init(path) -> UMMDiffusion:
    """Start from the EMA weights when the checkpoint carries them."""
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f"initial checkpoint not found: {path}")
    model, _, _ = UMMDiffusion.load(path, weights="ema")
    return model


def train_phase1(cfg: TrainConfig, corpus, init_path, out_path, metrics_path=None):
    """Projector only, against the frozen pretrained denoiser."""
    model = _load_init(init_path)
    data = load_corpus(corpus, model)
    model.set_phase("phase1")
    cfg = TrainConfig(**{**cfg.to_dict(), "phase": "phase1"})
    hist = run_training(model, data, cfg, metrics_path)
    model.set_phase("frozen")
    model.save(out_path, meta=_checkpoint_meta(cfg))
    return model, hist


def train_phase2(cfg: TrainConfig, corpus, init_path, out_path, metrics_path=None):
    """Projector + denoiser jointly; the checkpoint holds raw and EMA weights."""
    model = _load_init(init_path)
    data = load_corpus(corpus, model)
    model.set_phase("phase2")
    cfg = TrainConfig(**{**cfg.to_dict(), "phase": "phase2"})
    hist = run_training(model, data, cfg, metrics_path, track_ema=True)
    model.set_phase("frozen")
    model.save(out_path, extra=hist["ema"].arrays(),
               meta=_checkpoint_meta(cfg, {"sampling_weights": "ema"}))
    return model, hist
