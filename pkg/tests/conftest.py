import hashlib
import os
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

import ummdiff
from ummdiff.config import desk_config
from ummdiff.datagen import build_corpus
from ummdiff.trainer import pretrain_t2i, train_phase1, train_phase2

from ummdiff.datagen import GrammarConfig
from ummdiff.diffusion import DenoiserConfig
from ummdiff.encoders import EncoderConfig, Vocabulary
from ummdiff.model import ModelConfig, UMMDiffusion

EXTRA_WORDS = ["dog", "is", "under", "tower"]


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.from_words(GrammarConfig().vocabulary_words() + EXTRA_WORDS)


def tiny_config(seed=0, **enc):
    enc = EncoderConfig(**{"max_len": 8, "d_model": 16, "n_layers": 2, "n_heads": 2, "d_img": 8,
                           "img_size": 8, "img_channels": (4, 8), **enc})
    den = DenoiserConfig(channels=8, context_dim=enc.d_model, context_len=enc.max_len, heads=2,
                         time_dim=16, groups=4, image_size=8)
    return ModelConfig(encoder=enc, denoiser=den, T=100, seed=seed)


@pytest.fixture
def tiny_model(vocab):
    return UMMDiffusion(vocab, tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion at the end of the run

ACCEPTANCE = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE[number] = (title, bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")


# ---------------------------------------------------------------------------
# desk-scale training run shared by the trained-model tests

CACHE_ROOT = Path(os.environ.get("UMMDIFF_CACHE", Path(__file__).resolve().parent.parent / ".acceptance_cache"))


# modules whose code decides what training writes; evaluation and CLI code do not
TRAINING_SOURCES = ("numerics", "encoders.py", "tiue.py", "diffusion", "datagen.py", "model.py", "trainer.py")


def source_digest() -> str:
    """Hash of the training code, so cached checkpoints never outlive a change to it."""
    root = Path(ummdiff.__file__).parent
    h = hashlib.sha256()
    for name in TRAINING_SOURCES:
        path = root / name
        for f in sorted(path.rglob("*.py")) if path.is_dir() else [path]:
            h.update(f.read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def desk_run():
    """Corpus plus pretrain / phase 1 / phase 2 checkpoints at desk scale (cached)."""
    cfg = desk_config()
    key = hashlib.sha256((cfg.dumps() + source_digest()).encode()).hexdigest()[:16]
    root = CACHE_ROOT / key
    paths = {"root": root, "corpus": root / "corpus", "pre": root / "pretrain.npz",
             "p1": root / "phase1.npz", "p2": root / "phase2.npz", "config": cfg}
    if not paths["p2"].exists():
        root.mkdir(parents=True, exist_ok=True)
        cfg.save(root / "run.json")
        with threadpool_limits(limits=1):
            if not (paths["corpus"] / "manifest.jsonl").exists():
                build_corpus(cfg.candidates, paths["corpus"], cfg.grammar, cfg.filters, cfg.seed)
            if not paths["pre"].exists():
                pretrain_t2i(cfg.pretrain, paths["corpus"], paths["pre"], cfg.model, root / "metrics.csv")
            if not paths["p1"].exists():
                train_phase1(cfg.phase1, paths["corpus"], paths["pre"], paths["p1"], root / "metrics.csv")
            train_phase2(cfg.phase2, paths["corpus"], paths["p1"], paths["p2"], root / "metrics.csv")
    return paths
