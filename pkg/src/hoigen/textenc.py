"""Text frontend: deterministic text embedding, hand-type selection and the
motion-length predictor.

The default encoder is seeded feature hashing of word n-grams: zero model
weights, fully reproducible.  A semantic encoder (e.g. precomputed CLIP
embeddings in a JSON-lines file) can be plugged in behind the same interface;
hand-type selection then uses cosine similarity against prompt templates,
otherwise a rule-based fallback on hand-type phrases is applied.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

TEXT_EMBED_DIM = 512
LENGTH_NOISE_DIM = 64
L_MAX = 150

HAND_TYPES = ("left", "right", "both")
HAND_TYPE_PHRASES = {"left": "left hand", "right": "right hand", "both": "both hands"}

log = logging.getLogger(__name__)


def hand_indicators(hand_type: str) -> tuple[int, int]:
    """(1_left, 1_right) for a hand type: left->(1,0), right->(0,1), both->(1,1)."""
    if hand_type == "left":
        return 1, 0
    if hand_type == "right":
        return 0, 1
    if hand_type == "both":
        return 1, 1
    raise ValueError(f"unknown hand type {hand_type!r}")


class HashingTextEncoder:
    """512-d seeded feature hashing of lowercased word uni/bi-grams, unit norm."""

    dim = TEXT_EMBED_DIM
    is_semantic = False

    def __init__(self, seed: int = 0):
        self.seed = seed

    def encode(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot encode empty text")
        tokens = [t for t in "".join(c if c.isalnum() else " " for c in text.lower()).split() if t]
        grams = tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]
        v = np.zeros(self.dim, dtype=np.float64)
        for g in grams:
            h = hashlib.sha256(f"{self.seed}:{g}".encode()).digest()
            idx = int.from_bytes(h[:4], "little") % self.dim
            sign = 1.0 if h[4] & 1 else -1.0
            v[idx] += sign
        n = np.linalg.norm(v)
        if n == 0:
            # pathological but possible with exotic tokenization; keep determinism
            v[0] = 1.0
            n = 1.0
        return v / n


class JsonlEmbeddingEncoder:
    """Precomputed-embedding adapter: JSON-lines of {"text":..., "embedding":[512]}."""

    dim = TEXT_EMBED_DIM
    is_semantic = True

    def __init__(self, path, fallback: HashingTextEncoder | None = None):
        self.table = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                emb = np.asarray(rec["embedding"], dtype=np.float64)
                if emb.shape != (self.dim,):
                    raise ValueError(f"{path}:{lineno}: embedding must have length {self.dim}")
                self.table[rec["text"]] = emb
        self.fallback = fallback

    def encode(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot encode empty text")
        if text in self.table:
            return self.table[text]
        if self.fallback is not None:
            return self.fallback.encode(text)
        raise KeyError(f"no precomputed embedding for text: {text!r}")


def make_encoder(spec: str = "hashing", seed: int = 0):
    """Encoder factory: "hashing" or "jsonl:<path>"."""
    if spec == "hashing":
        return HashingTextEncoder(seed=seed)
    if spec.startswith("jsonl:"):
        return JsonlEmbeddingEncoder(Path(spec[6:]), fallback=HashingTextEncoder(seed=seed))
    raise ValueError(f"unknown encoder spec {spec!r}")


def select_hand_type(text: str, encoder) -> str:
    """Pick left/right/both for a prompt.

    Semantic encoders: cosine similarity against "A photo of {hand type}"
    templates.  The hashed default carries no semantics, so a substring rule
    on the hand-type phrase decides; with no match we default to both.
    """
    lowered = text.lower()
    if "both hands" in lowered or "both" in lowered.split():
        rule = "both"
    elif "left hand" in lowered:
        rule = "left"
    elif "right hand" in lowered:
        rule = "right"
    else:
        rule = None

    if not getattr(encoder, "is_semantic", False):
        if rule is None:
            log.warning("no hand-type phrase in %r; defaulting to both hands", text)
            return "both"
        return rule

    emb = np.asarray(encoder.encode(text))
    best, best_sim = "both", -math.inf
    for ht, phrase in HAND_TYPE_PHRASES.items():
        t = np.asarray(encoder.encode(f"A photo of {phrase}"))
        sim = float(emb @ t / (np.linalg.norm(emb) * np.linalg.norm(t) + 1e-12))
        if sim > best_sim:
            best, best_sim = ht, sim
    return best


class LengthPredictor(nn.Module):
    """Small MLP regressing motion length from (text embedding, noise)."""

    def __init__(self, hidden: int = 256, l_max: int = L_MAX):
        super().__init__()
        self.l_max = l_max
        self.net = nn.Sequential(
            nn.Linear(TEXT_EMBED_DIM + LENGTH_NOISE_DIM, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, emb: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([emb, noise], dim=-1)).squeeze(-1)

    @torch.no_grad()
    def predict(self, emb, noise=None, generator: torch.Generator | None = None) -> int:
        emb = torch.as_tensor(np.asarray(emb), dtype=torch.float32).reshape(1, -1)
        if noise is None:
            noise = torch.randn(1, LENGTH_NOISE_DIM, generator=generator)
        else:
            noise = torch.as_tensor(np.asarray(noise), dtype=torch.float32).reshape(1, -1)
        raw = float(self(emb, noise).item())
        # round half up, clamp to [1, l_max]
        return int(min(max(math.floor(raw + 0.5), 1), self.l_max))
