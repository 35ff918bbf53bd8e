"""Stub visual and text encoders.

The visual side is a frozen random base map followed by a trainable tanh
MLP adapter; the adapter is what the lifelong stages fine-tune. The text side
is entirely frozen: tokens are mean-pooled, lifted from token width to the
shared feature width, and passed through a fixed random MLP. Gradients still
flow back to the token values so prompts can be learned.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import ortho_group

from .numerics import DimensionError, Linear, Parameter, TanhMLP
from .world import D_LAT, SyntheticSample

FEATURE_DIM = 64
ADAPTER_HIDDEN = 96
TOKEN_DIM = 32
TEXT_HIDDEN = 64


class EmptyPromptError(ValueError):
    pass


class VisualEncoder:
    def __init__(self, rng: np.random.Generator):
        base = ortho_group.rvs(D_LAT, random_state=rng)
        self.base = Parameter("visual.base", base, requires_grad=False)
        self.adapter = TanhMLP("visual.adapter", D_LAT, ADAPTER_HIDDEN, FEATURE_DIM, rng)

    @property
    def parameters(self) -> list[Parameter]:
        return self.adapter.parameters

    @property
    def frozen(self) -> list[Parameter]:
        return [self.base]

    def forward(self, latents: np.ndarray) -> np.ndarray:
        latents = np.atleast_2d(latents)
        if latents.shape[1] != D_LAT:
            raise DimensionError(f"visual encoder expects width {D_LAT}, got {latents.shape}")
        return self.adapter.forward(latents @ self.base.value)

    def backward(self, df_v: np.ndarray) -> None:
        # The base map is frozen, so the input gradient is discarded.
        self.adapter.backward(df_v)


def encode_visual(encoder: VisualEncoder, sample: SyntheticSample) -> np.ndarray:
    return encoder.forward(sample.latent[None, :])[0]


class TextEncoder:
    def __init__(self, rng: np.random.Generator):
        self.lift = Linear(Parameter("text.lift", rng.normal(0, 1 / np.sqrt(TOKEN_DIM), (TOKEN_DIM, FEATURE_DIM)),
                                     requires_grad=False))
        self.mlp = TanhMLP("text.mlp", FEATURE_DIM, TEXT_HIDDEN, FEATURE_DIM, rng, requires_grad=False)
        self._n_tokens = 0

    @property
    def frozen(self) -> list[Parameter]:
        return self.lift.parameters + self.mlp.parameters

    def forward(self, tokens: np.ndarray) -> np.ndarray:
        """Encode a batch of token sequences shaped (batch, n_tokens, TOKEN_DIM)."""
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim == 2:
            tokens = tokens[None]
        if tokens.shape[1] == 0:
            raise EmptyPromptError("text encoder received an empty token sequence")
        if tokens.shape[2] != TOKEN_DIM:
            raise DimensionError(f"tokens must have width {TOKEN_DIM}, got {tokens.shape}")
        self._n_tokens = tokens.shape[1]
        # pool in a canonical token order so permutations give bit-identical output
        order = np.lexsort(tokens.transpose(2, 0, 1)[::-1], axis=-1)
        pooled = np.take_along_axis(tokens, order[:, :, None], axis=1).mean(axis=1)
        return self.mlp.forward(self.lift.forward(pooled))

    def backward(self, de_t: np.ndarray) -> np.ndarray:
        """Return the gradient w.r.t. every input token, shaped like the input."""
        dpool = self.lift.backward(self.mlp.backward(de_t))
        return np.repeat(dpool[:, None, :] / self._n_tokens, self._n_tokens, axis=1)


def encode_text(encoder: TextEncoder, tokens: np.ndarray) -> np.ndarray:
    return encoder.forward(np.asarray(tokens)[None])[0]
