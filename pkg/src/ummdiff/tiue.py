"""Text-and-image unified encoder.

Subject images become pseudo word embeddings through a trainable MLP, are
written into the caption's embedding sequence at their referenced positions,
and the spliced sequence is re-encoded by the frozen text tower. The final
condition takes the re-encoded vectors only at the subject positions and the
pure-text vectors everywhere else.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoders import ImageEncoder, TextEncoder, TokenSequence
from .numerics.layers import Linear, Module


class Projector(Module):
    """Image embedding -> pseudo word embedding; MLP with two GELU hidden layers."""

    def __init__(self, store, d_img, d_emb, rng, hidden=None, name="tiue.projector"):
        super().__init__(store, name)
        hidden = hidden or 4 * d_emb
        self.d_img, self.d_emb, self.hidden = d_img, d_emb, hidden
        self.fc1 = Linear(store, f"{name}.fc1", d_img, hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, hidden, rng)
        self.fc3 = Linear(store, f"{name}.fc3", hidden, d_emb, rng)

    def __call__(self, e) -> nx.Tensor:
        e = e if isinstance(e, nx.Tensor) else nx.Tensor(e)
        return self.fc3(nx.gelu(self.fc2(nx.gelu(self.fc1(e)))))

    def identity_init(self) -> None:
        """Diagnostic weights under which the projector is the identity map.

        Uses gelu(x) - gelu(-x) == x, so it needs d_img == d_emb and
        hidden >= 2 * d_emb.
        """
        d, h = self.d_emb, self.hidden
        if self.d_img != d or h < 2 * d:
            raise ValueError("identity configuration needs d_img == d_emb and hidden >= 2*d_emb")
        eye = np.eye(d)
        w1 = np.zeros((d, h))
        w1[:, :d], w1[:, d:2 * d] = eye, -eye
        w2 = np.zeros((h, h))
        w2[:d, :d], w2[d:2 * d, :d] = eye, -eye
        w2[:d, d:2 * d], w2[d:2 * d, d:2 * d] = -eye, eye
        w3 = np.zeros((h, d))
        w3[:d], w3[d:2 * d] = eye, -eye
        for layer, w in ((self.fc1, w1), (self.fc2, w2), (self.fc3, w3)):
            layer.p("weight").data = w.astype(layer.p("weight").dtype)
            layer.p("bias").data = np.zeros_like(layer.p("bias").data)


@dataclass
class ConditionSet:
    """Caption tokens, subject images and the caption indices they refer to."""

    caption: TokenSequence
    subjects: list = field(default_factory=list)
    positions: list = field(default_factory=list)

    def __post_init__(self):
        self.positions = [int(p) for p in self.positions]
        validate_positions(self.caption, self.positions)
        if len(self.subjects) != len(self.positions):
            raise ValueError(f"{len(self.subjects)} subjects but {len(self.positions)} positions")


def validate_positions(tokens: TokenSequence, positions) -> None:
    positions = list(positions)
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise ValueError(f"positions must be strictly increasing, got {positions}")
    content = tokens.content_positions()
    for p in positions:
        if p not in content:
            raise ValueError(f"position {p} is out of range or points at a reserved token")


@dataclass
class UnifiedCondition:
    h_u: np.ndarray          # (L, d)
    provenance: np.ndarray   # (L,) bool, True where the row came from h_r


def assemble(w_y: nx.Tensor, pseudo: nx.Tensor, rows: np.ndarray, positions: np.ndarray,
             positional: nx.Tensor) -> nx.Tensor:
    """Replace ``w_y[rows[k], positions[k]]`` by ``pseudo[k] + positional[k]``.

    ``w_y`` is ``(B, L, d)``; the sequence length is preserved.
    """
    rows, positions = np.asarray(rows, int), np.asarray(positions, int)
    b, L, d = w_y.shape
    if rows.size == 0:
        return w_y
    if positions.min() < 0 or positions.max() >= L:
        raise IndexError(f"positions {positions} out of range for length {L}")
    mask = np.zeros((b, L, 1), bool)
    mask[rows, positions] = True
    spliced = nx.scatter_rows(pseudo + positional, (rows, positions), (b, L, d))
    return nx.where(mask, spliced, w_y)


def merge_hidden(h_r: nx.Tensor, h_y: nx.Tensor, rows, positions) -> nx.Tensor:
    """h_u: rows of h_r at the subject positions, h_y elsewhere."""
    rows, positions = np.asarray(rows, int), np.asarray(positions, int)
    mask = np.zeros(h_y.shape[:2] + (1,), bool)
    if rows.size:
        mask[rows, positions] = True
    return nx.where(mask, h_r, h_y)


@dataclass
class EncodedBatch:
    h_y: nx.Tensor
    h_r: nx.Tensor
    h_u: nx.Tensor
    pseudo: nx.Tensor | None


class TIUE:
    def __init__(self, text: TextEncoder, image: ImageEncoder, projector: Projector):
        self.text, self.image, self.projector = text, image, projector

    def project(self, e) -> nx.Tensor:
        return self.projector(e)

    def encode_text_condition(self, ids: np.ndarray) -> nx.Tensor:
        return self.text(np.atleast_2d(ids))

    def encode_batch(self, ids: np.ndarray, crops: np.ndarray | None, rows, positions) -> EncodedBatch:
        """Batched TIUE.

        ``ids`` is ``(B, L)``; ``crops`` holds one prepared subject image per
        entry of ``rows``/``positions`` (``rows[k]`` is the batch row it belongs to).
        """
        ids = np.atleast_2d(ids)
        rows = np.asarray(rows, int)
        w_y = self.text.embed(ids)
        h_y = self.text.encode(w_y)
        if rows.size == 0:
            return EncodedBatch(h_y, h_y, h_y, None)
        pseudo = self.projector(self.image(crops))
        w_r = assemble(w_y, pseudo, rows, positions, self.text.positional(positions))
        h_r = self.text.encode(w_r)
        return EncodedBatch(h_y, h_r, merge_hidden(h_r, h_y, rows, positions), pseudo)

    def encode_unified(self, cond: ConditionSet) -> UnifiedCondition:
        crops = self.image.prepare(cond.subjects) if cond.subjects else None
        k = len(cond.positions)
        out = self.encode_batch(cond.caption.ids[None], crops, np.zeros(k, int), np.array(cond.positions, int))
        prov = np.zeros(len(cond.caption.ids), bool)
        prov[cond.positions] = True
        return UnifiedCondition(out.h_u.data[0], prov)
