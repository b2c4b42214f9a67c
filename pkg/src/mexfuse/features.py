"""Synthetic modality feature streams.

Stands in for frozen visual/text encoders: deterministic pseudo-random
embeddings with the same output shapes ([n,16,768] visual, [n,20,1024]
textual by default), plus truncation and the per-modality projection MLPs
that reduce raw channels to the fused width.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import DegenerateInputError, DimensionError, Linear, Tensor, gelu

GLOBAL_FRAME = "global_frame"
LOCAL_TRACK = "local_track"
PROMPT = "prompt"
MODALITIES = (GLOBAL_FRAME, LOCAL_TRACK, PROMPT)


@dataclass(frozen=True)
class EmbedderConfig:
    seed: int = 0
    raw_visual_dim: int = 768
    visual_tokens: int = 16
    raw_text_dim: int = 1024
    text_tokens: int = 20
    fused_dim: int = 256
    truncate_to: int | None = None
    oracle_mode: bool = False
    noise_scale: float = 0.05
    concepts: tuple = ()

    def __post_init__(self):
        for name in ("raw_visual_dim", "visual_tokens", "raw_text_dim",
                     "text_tokens", "fused_dim"):
            if getattr(self, name) <= 0:
                raise DegenerateInputError(f"{name} must be positive")
        if self.truncate_to is not None and self.truncate_to < 1:
            raise DegenerateInputError("truncate_to must be >= 1 when set")

    def token_shape(self, modality):
        if modality == PROMPT:
            return self.text_tokens, self.raw_text_dim
        if modality in (GLOBAL_FRAME, LOCAL_TRACK):
            return self.visual_tokens, self.raw_visual_dim
        raise ValueError(f"unknown modality {modality!r}")


@dataclass
class ModalityFeatures:
    modality: str
    tokens: np.ndarray  # [n, s, d_raw]
    source_id: str

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise DimensionError(f"tokens must be [n,s,d], got {self.tokens.shape}")
        if not np.isfinite(self.tokens).all():
            raise ValueError("non-finite embedding values")


def _rng_for(*parts):
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def concept_space(config: EmbedderConfig, dim: int):
    """Orthonormal base vector per configured concept.

    QR of a seeded Gaussian matrix, so distinct concepts are exactly
    orthogonal and the oracle-mode cosine bounds hold by construction.
    """
    k = len(config.concepts)
    if k == 0:
        return {}
    if k > dim:
        raise DegenerateInputError(f"{k} concepts exceed embedding dim {dim}")
    rng = _rng_for(config.seed, "concept-space", dim, *sorted(config.concepts))
    q, _ = np.linalg.qr(rng.standard_normal((dim, k)))
    return {c: np.ascontiguousarray(q[:, i]) for i, c in enumerate(sorted(config.concepts))}


def embed_synthetic(entity_id, modality, config: EmbedderConfig, concept=None):
    """Deterministic features for one entity; pure in (seed, entity_id, modality).

    In oracle mode a concept label anchors the embedding at that concept's
    base direction plus small noise, so same-concept entities are highly
    similar and disjoint-concept entities nearly orthogonal.
    """
    s, d = config.token_shape(modality)
    rng = _rng_for(config.seed, entity_id, modality)
    if config.oracle_mode and concept is not None:
        if concept not in config.concepts:
            raise KeyError(f"concept {concept!r} not in configured concepts")
        base = concept_space(config, d)[concept]
        # noise_scale is the expected noise norm relative to the unit base vector
        noise = rng.standard_normal((1, s, d)) / np.sqrt(d)
        tokens = base[None, None, :] + config.noise_scale * noise
    else:
        tokens = rng.standard_normal((1, s, d))
    return ModalityFeatures(modality=modality, tokens=tokens, source_id=str(entity_id))


def truncate(f: ModalityFeatures, k: int) -> ModalityFeatures:
    """Keep the first min(k, s) tokens."""
    if k < 1:
        raise DegenerateInputError(f"truncate length must be >= 1, got {k}")
    if k >= f.tokens.shape[1]:
        return f
    return ModalityFeatures(modality=f.modality, tokens=f.tokens[:, :k, :],
                            source_id=f.source_id)


class ProjectionMLP:
    """Two-layer per-token MLP: d_raw -> hidden -> d_k."""

    def __init__(self, first: Linear, second: Linear, activation="gelu"):
        self.first = first
        self.second = second
        self.activation = activation

    @classmethod
    def init(cls, d_raw, d_k, rng, hidden=None, activation="gelu", requires_grad=True):
        hidden = hidden or d_k
        return cls(Linear.init(d_raw, hidden, rng, requires_grad=requires_grad),
                   Linear.init(hidden, d_k, rng, requires_grad=requires_grad),
                   activation=activation)

    def param_count(self):
        return self.first.param_count() + self.second.param_count()

    def parameters(self):
        return self.first.parameters() + self.second.parameters()

    def __call__(self, x):
        h = self.first(x)
        if self.activation == "gelu":
            h = gelu(h)
        elif self.activation != "identity":
            raise ValueError(f"unknown activation {self.activation!r}")
        return self.second(h)


def project(f: ModalityFeatures, mlp: ProjectionMLP):
    """Project raw tokens to the fused width; leading [n, s] axes preserved."""
    if f.tokens.shape[-1] != mlp.first.d_in:
        raise DimensionError(
            f"projection expects raw dim {mlp.first.d_in}, got tokens {f.tokens.shape}")
    return mlp(Tensor(f.tokens))


def write_concept_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_concept_manifest(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            out.append({"entity_id": rec["entity_id"], "modality": rec["modality"],
                        "concept": rec["concept"]})
    return out
