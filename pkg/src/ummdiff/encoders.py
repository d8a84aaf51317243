"""Toy stand-ins for the CLIP text and image towers.

The text side is a word-level tokenizer, learned token and positional
embeddings, and a causal pre-LN transformer whose *unpooled* output is the
conditioning signal. The image side is a small convolutional trunk with
global average pooling and a linear head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import imageio
from . import numerics as nx
from .numerics.layers import Conv2d, LayerNorm, Linear, Module, MultiHeadAttention

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"


@dataclass
class EncoderConfig:
    max_len: int = 16
    d_model: int = 64          # word embeddings share this width
    n_layers: int = 2
    n_heads: int = 4
    d_img: int = 32
    img_size: int = 16
    img_channels: tuple = (16, 32, 32)

    def to_dict(self):
        d = asdict(self)
        d["img_channels"] = list(self.img_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["img_channels"] = tuple(d.get("img_channels", cls.img_channels))
        return cls(**d)


class Vocabulary:
    """Dense ids: PAD=0, BOS=1, EOS=2, then words in file order."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:3] != [PAD, BOS, EOS]:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_words(cls, words):
        seen = []
        for w in words:
            if w not in seen:
                seen.append(w)
        return cls([PAD, BOS, EOS] + seen)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([line for line in Path(path).read_text().splitlines() if line])

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.tokens) + "\n")
        return path

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.ids[token]

    @property
    def pad_id(self):
        return 0

    @property
    def bos_id(self):
        return 1

    @property
    def eos_id(self):
        return 2


@dataclass
class TokenSequence:
    ids: np.ndarray   # (max_len,) int
    length: int       # BOS + content + EOS

    @property
    def mask(self) -> np.ndarray:
        return np.arange(len(self.ids)) < self.length

    @property
    def eos_index(self) -> int:
        return self.length - 1

    def content_positions(self) -> range:
        return range(1, self.length - 1)


def tokenize(text: str, vocab: Vocabulary, max_len: int = 16) -> TokenSequence:
    words = text.lower().split()
    unknown = [w for w in words if w not in vocab.ids or w in (PAD, BOS, EOS)]
    if unknown:
        raise KeyError(f"unknown words: {unknown}")
    if len(words) + 2 > max_len:
        raise ValueError(f"caption of {len(words)} words exceeds max length {max_len}")
    ids = np.full(max_len, vocab.pad_id, np.int64)
    ids[0] = vocab.bos_id
    ids[1:1 + len(words)] = [vocab[w] for w in words]
    ids[1 + len(words)] = vocab.eos_id
    return TokenSequence(ids, len(words) + 2)


class TextEncoder(Module):
    """Token/positional embedding plus a causal transformer."""

    def __init__(self, store, vocab_size, cfg: EncoderConfig, rng, name="text"):
        super().__init__(store, name)
        d, self.cfg = cfg.d_model, cfg
        self.add("tok_emb", rng.normal(0, 0.5, (vocab_size, d)))
        self.add("pos_emb", rng.normal(0, 0.1, (cfg.max_len, d)))
        self.blocks = []
        for i in range(cfg.n_layers):
            pre = f"{name}.block{i}"
            self.blocks.append((
                LayerNorm(store, f"{pre}.ln1", d),
                MultiHeadAttention(store, f"{pre}.attn", d, d, d, cfg.n_heads, rng),
                LayerNorm(store, f"{pre}.ln2", d),
                Linear(store, f"{pre}.fc1", d, 4 * d, rng),
                Linear(store, f"{pre}.fc2", 4 * d, d, rng),
            ))
        self.ln_final = LayerNorm(store, f"{name}.ln_final", d)
        self.pool_proj = Linear(store, f"{name}.pool_proj", d, d, rng, bias=False)
        self.causal = np.tril(np.ones((cfg.max_len, cfg.max_len), bool))

    def embed(self, ids: np.ndarray) -> nx.Tensor:
        """``(B, L)`` ids -> ``(B, L, d)`` token rows plus positional rows."""
        ids = np.atleast_2d(ids)
        return nx.take_rows(self.p("tok_emb"), ids) + self.p("pos_emb")[: ids.shape[1]]

    def positional(self, positions: np.ndarray) -> nx.Tensor:
        return nx.take_rows(self.p("pos_emb"), np.asarray(positions))

    def encode(self, w: nx.Tensor) -> nx.Tensor:
        """Embedding sequence -> hidden sequence of the same length."""
        L = w.shape[1]
        mask = self.causal[:L, :L]
        h = w
        for ln1, attn, ln2, fc1, fc2 in self.blocks:
            h = h + attn(ln1(h), mask=mask)
            h = h + fc2(nx.gelu(fc1(ln2(h))))
        return self.ln_final(h)

    def __call__(self, ids: np.ndarray) -> nx.Tensor:
        return self.encode(self.embed(ids))

    def pooled(self, h: nx.Tensor, ids: np.ndarray, vocab: Vocabulary) -> nx.Tensor:
        """Diagnostic pooled embedding: projection of the hidden vector at EOS."""
        ids = np.atleast_2d(ids)
        eos = []
        for row in ids:
            hits = np.flatnonzero(row == vocab.eos_id)
            if not hits.size:
                raise ValueError("EOS token not found")
            eos.append(hits[0])
        return self.pool_proj(h[np.arange(len(ids)), np.array(eos)])


class ImageEncoder(Module):
    """Conv trunk -> global average pool -> linear head."""

    def __init__(self, store, cfg: EncoderConfig, rng, name="image"):
        super().__init__(store, name)
        self.cfg = cfg
        chans = (3,) + tuple(cfg.img_channels)
        self.convs = [Conv2d(store, f"{name}.conv{i}", chans[i], chans[i + 1], rng,
                             stride=1 if i == 0 else 2, scale=np.sqrt(2.0))
                      for i in range(len(chans) - 1)]
        self.head = Linear(store, f"{name}.head", chans[-1], cfg.d_img, rng)

    def prepare(self, images) -> np.ndarray:
        """Resize a list of images to the encoder resolution and stack them."""
        out = []
        for img in images:
            img = np.asarray(img)
            if img.size == 0:
                raise ValueError("empty image")
            out.append(imageio.resize(img, self.cfg.img_size))
        return np.stack(out)

    def __call__(self, batch: np.ndarray) -> nx.Tensor:
        x = nx.Tensor(batch)
        for conv in self.convs:
            x = nx.relu(conv(x))
        return self.head(x.mean(axis=(1, 2)))

    def encode(self, images) -> np.ndarray:
        return self(self.prepare(images)).data
