"""Toy joint text/image embedding space with CLIP-like alignment.

The image encoder is the exact left-inverse of the world's injection
matrix. The text encoder is a frozen one-layer contextual mixer:

    y_i = tanh(W1 e_i + W2 mean(e))        per-row mixing
    out = W3 mean(y_i)                     sequence summary

The summary is mean-pooled by default (soft prompts carry no terminator
token); a last-position summary is available for comparison. Both paths
have closed-form gradients w.r.t. the input rows, which is the channel the
prototype optimizer trains through.

Embeddings are not normalized at encode time; normalization happens inside
`cosine`, matching the explicit norm division in the ascent objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidConfigError, UnknownTokenError, ZeroNormError
from .semworld import Prompt, World

MEAN = "mean"
LAST = "last"


@dataclass
class SoftPrompt:
    """L x d_tok matrix of token embeddings (free parameters when learned)."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if self.rows.shape[0] < 1:
            raise InvalidConfigError("soft prompt needs at least one row")
        if not np.all(np.isfinite(self.rows)):
            raise InvalidConfigError("soft prompt rows must be finite")

    @property
    def L(self) -> int:
        return self.rows.shape[0]

    @property
    def d_tok(self) -> int:
        return self.rows.shape[1]

    def copy(self) -> "SoftPrompt":
        return SoftPrompt(self.rows.copy())


@dataclass(frozen=True)
class ImageEncoder:
    """Linear map W_I = A^T from image space R^D to the joint space R^d."""

    W_I: np.ndarray

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.W_I.shape[1]:
            raise DimensionMismatchError(
                f"image dim {x.shape[-1]} != encoder dim {self.W_I.shape[1]}"
            )
        if not np.all(np.isfinite(x)):
            raise InvalidConfigError("image vector must be finite")
        return x @ self.W_I.T

    __call__ = encode


@dataclass(frozen=True)
class TextEncoder:
    """Frozen contextual text encoder with a differentiable summary."""

    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    summary: str = MEAN

    def encode(self, sp: SoftPrompt) -> np.ndarray:
        _, y = self._forward(sp)
        if self.summary == MEAN:
            pooled = y.mean(axis=0)
        else:
            pooled = y[-1]
        return self.W3 @ pooled

    __call__ = encode

    def _forward(self, sp: SoftPrompt) -> tuple[np.ndarray, np.ndarray]:
        e = sp.rows
        ebar = e.mean(axis=0)
        u = e @ self.W1.T + ebar @ self.W2.T
        return u, np.tanh(u)

    def encode_grad(self, sp: SoftPrompt, cotangent: np.ndarray) -> np.ndarray:
        """Exact gradient of <encode(sp), cotangent> w.r.t. sp.rows.

        Chain rule through the pooling and tanh:
          g_i = (1 - y_i^2) * (W3^T c) / L          (mean summary)
          d/de_j = W1^T g_j + W2^T (sum_i g_i) / L
        The last-position summary replaces g_i with a single-row term.
        """
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if not np.all(np.isfinite(cotangent)):
            raise InvalidConfigError("cotangent must be finite")
        L = sp.L
        _, y = self._forward(sp)
        back = self.W3.T @ cotangent
        if self.summary == MEAN:
            g = (1.0 - y**2) * back / L  # L x d
        else:
            g = np.zeros_like(y)
            g[-1] = (1.0 - y[-1] ** 2) * back
        grad = g @ self.W1 + np.tile((g.sum(axis=0) @ self.W2) / L, (L, 1))
        return grad


def embed_tokens(world: World, prompt: Prompt) -> SoftPrompt:
    """Lift a hard prompt into encoder input space (d_tok = d, identity lift)."""
    rows = []
    for t in prompt:
        if not 0 <= t < world.vocab_size:
            raise UnknownTokenError(f"token {t} outside vocabulary")
        rows.append(world.gt_matrix[t])
    return SoftPrompt(np.array(rows))


def text_encoder(world: World, summary: str = MEAN) -> TextEncoder:
    return TextEncoder(W1=world.W1, W2=world.W2, W3=world.W3, summary=summary)


def image_encoder(world: World) -> ImageEncoder:
    return ImageEncoder(W_I=world.A.T)


def encode_prompt(world: World, prompt: Prompt) -> np.ndarray:
    """Summary embedding of a hard prompt: encode_text(embed_tokens(prompt))."""
    return text_encoder(world).encode(embed_tokens(world, prompt))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))
