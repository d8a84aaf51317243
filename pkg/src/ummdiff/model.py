"""The assembled model: encoders, TIUE and the conditional denoiser."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    SamplerConfig,
    ddim_sample,
    fuse_predictions,
    make_schedule,
)
from .encoders import EncoderConfig, ImageEncoder, TextEncoder, Vocabulary, tokenize
from .tiue import TIUE, ConditionSet, Projector

# which parameters each training stage may update
PHASE_TRAINABLE = {
    "pretrain": ("text.*", "denoiser.*"),
    "phase1": ("tiue.projector.*",),
    "phase2": ("tiue.projector.*", "denoiser.*"),
    "frozen": (),
}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    projector_hidden: int | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "denoiser": self.denoiser.to_dict(),
                "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "projector_hidden": self.projector_hidden, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig.from_dict(d.pop("encoder", {}))
        den = DenoiserConfig(**d.pop("denoiser", {}))
        return cls(encoder=enc, denoiser=den, **d)


class UMMDiffusion:
    def __init__(self, vocab: Vocabulary, config: ModelConfig | None = None):
        self.vocab = vocab
        self.config = config = config or ModelConfig()
        enc = config.encoder
        if config.denoiser.context_dim != enc.d_model or config.denoiser.context_len != enc.max_len:
            raise ValueError("denoiser context must match the text encoder width and length")
        rng = np.random.default_rng(config.seed)
        self.store = nx.ParameterStore()
        self.text = TextEncoder(self.store, len(vocab), enc, rng)
        self.image = ImageEncoder(self.store, enc, rng)
        self.projector = Projector(self.store, enc.d_img, enc.d_model, rng, hidden=config.projector_hidden)
        self.denoiser = Denoiser(self.store, config.denoiser, rng)
        self.tiue = TIUE(self.text, self.image, self.projector)
        self.schedule = make_schedule(config.T, config.beta_start, config.beta_end)
        self.set_phase("frozen")

    # -- trainable sets ----------------------------------------------------
    def set_phase(self, phase: str) -> None:
        if phase not in PHASE_TRAINABLE:
            raise ValueError(f"unknown phase {phase!r}")
        self.store.freeze_all()
        for pattern in PHASE_TRAINABLE[phase]:
            self.store.set_trainable(pattern, True)
        self.phase = phase

    # -- conditioning ------------------------------------------------------
    def tokens(self, caption: str):
        return tokenize(caption, self.vocab, self.config.encoder.max_len)

    def condition(self, caption: str, subjects=(), positions=()) -> ConditionSet:
        return ConditionSet(self.tokens(caption), list(subjects), list(positions))

    def encode_conditions(self, conds: list[ConditionSet]):
        """Returns ``(h_u, h_y)`` arrays of shape ``(B, L, d)``."""
        ids = np.stack([c.caption.ids for c in conds])
        rows, positions, crops = [], [], []
        for i, c in enumerate(conds):
            rows += [i] * len(c.positions)
            positions += c.positions
            crops += c.subjects
        prepared = self.image.prepare(crops) if crops else None
        out = self.tiue.encode_batch(ids, prepared, np.array(rows, int), np.array(positions, int))
        return out.h_u.data, out.h_y.data

    def predict_noise(self, x_t, cond, t) -> np.ndarray:
        """Noise estimate; ``cond`` is a ``(B, L, d)`` hidden sequence or None for the null condition."""
        return self.denoiser(x_t, t, cond).data

    # -- sampling ----------------------------------------------------------
    def sample(self, conds: list[ConditionSet], config: SamplerConfig | None = None,
               trajectory: list | None = None) -> np.ndarray:
        """Fused-guidance DDIM sampling of one image per condition set."""
        config = config or SamplerConfig()
        conds = list(conds)
        h_u, h_y = self.encode_conditions(conds)
        b = len(conds)
        has_subject = np.array([len(c.positions) > 0 for c in conds])
        alpha, w = config.alpha, config.guidance
        # rows without subjects have h_u == h_y, so their eps_u is eps_y
        need_u = alpha != 0.0 and has_subject.any()
        need_null = w != 1.0
        ctx = [h_y]
        if need_u:
            ctx.append(h_u[has_subject])
        ctx = np.concatenate(ctx)
        null_rows = b if need_null else 0

        def eps_fn(x, t):
            xs = [x, x[has_subject]] if need_u else [x]
            cond = np.concatenate([ctx, np.zeros((null_rows,) + ctx.shape[1:], ctx.dtype)])
            null_mask = np.arange(len(cond)) >= len(ctx)
            if null_rows:
                xs.append(x)
            eps = self.denoiser(np.concatenate(xs), t, cond, null_mask).data
            eps_y = eps[:b]
            eps_u = eps_y.copy()
            if need_u:
                eps_u[has_subject] = eps[b:len(ctx)]
            eps_null = eps[len(ctx):] if null_rows else None
            return fuse_predictions(eps_u, eps_y, eps_null, alpha, w)

        rng = np.random.default_rng(config.seed)
        shape = (b, self.config.denoiser.image_size, self.config.denoiser.image_size,
                 self.config.denoiser.image_channels)
        x_T = rng.standard_normal(shape).astype(nx.default_dtype())
        x = ddim_sample(eps_fn, self.schedule, x_T, config.steps, config.eta, rng, trajectory)
        return np.clip(x, -1.0, 1.0)

    # -- persistence ---------------------------------------------------------
    def meta(self) -> dict:
        return {"model_config": self.config.to_dict(), "vocab": self.vocab.tokens,
                "trainable": self.store.flags()}

    def save(self, path, extra: dict | None = None, meta: dict | None = None):
        arrays = dict(self.store.state())
        arrays.update(extra or {})
        return nx.save_checkpoint(path, arrays, {**self.meta(), **(meta or {})})

    @classmethod
    def load(cls, path, weights: str = "raw"):
        """Rebuild a model from a checkpoint; ``weights='ema'`` loads the EMA shadow
        over the raw values where present."""
        arrays, meta = nx.load_checkpoint(path)
        model = cls(Vocabulary(meta["vocab"]), ModelConfig.from_dict(meta["model_config"]))
        state = {k: v for k, v in arrays.items() if "/" not in k}
        if weights == "ema":
            for k in list(state):
                if f"ema/{k}" in arrays:
                    state[k] = arrays[f"ema/{k}"]
        elif weights != "raw":
            raise ValueError(f"unknown weights selector {weights!r}")
        model.store.load_state(state)
        return model, arrays, meta
