from typing import Annotated, Sequence
import logging
import math

import torch
from torch import nn
import torch.nn.functional as F

from ._common import N_CLASSES, T_CosimTarget, T_Precision, T_Mode, mode_flags
from ._struct import struct, field, replace
from ._constraints import Value
from ._pointers import Pointer
from ._issues import BaseIssue, InvariantIssue, NumberIssue
from ._errors import ShapeError, VocabError
from ._numtok import Vocab, PAD_ID, UNK_ID, tokenize
from ._numerics import (
    Tensor,
    matmul,
    add,
    scale,
    transpose,
    row_softmax,
    layer_norm,
    gelu,
    l2_normalize,
)

__all__ = [
    "ModelConfig",
    "LayerTrace",
    "AttentionTrace",
    "EncoderOutput",
    "label_mixing_matrix",
    "build_label_embeddings",
    "lesa_attention",
    "Encoder",
]

logger = logging.getLogger(__name__)


@struct
class ModelConfig:
    d_model: Annotated[int, Value("ge", 1)] = 64
    n_layers: Annotated[int, Value("ge", 1)] = 2
    n_heads: Annotated[int, Value("ge", 1)] = 4
    d_ff: Annotated[int, Value("ge", 1)] = 256
    max_length: Annotated[int, Value("ge", 2)] = 128
    vocab_size: Annotated[int, Value("ge", 5)] = 4096
    lesa_enabled: bool = False
    xval_enabled: bool = False
    lesa_layers: tuple[Annotated[int, Value("ge", 0)], ...] = (0,)
    # which side of the softmax receives the label similarity
    cosim_target: T_CosimTarget = "scores"
    freeze_label_embeddings: bool = False
    init_std: Annotated[float, Value("gt", 0.0)] = 0.02
    precision: T_Precision = "float64"

    def _validate_(self, pointer: Pointer) -> list[BaseIssue]:
        issues: list[BaseIssue] = []
        if self.d_model % self.n_heads:
            issues.append(
                InvariantIssue(
                    value=self.d_model,
                    pointer=pointer / "d_model",
                    message=f"d_model must be divisible by n_heads={self.n_heads}",
                )
            )
        for i, layer in enumerate(self.lesa_layers):
            if layer >= self.n_layers:
                issues.append(
                    NumberIssue(
                        value=layer,
                        pointer=pointer / "lesa_layers" / i,
                        comparator="lt",
                        limit=self.n_layers,
                    )
                )
        return issues

    @property
    def dtype(self) -> torch.dtype:
        return getattr(torch, self.precision)

    def with_mode(self, mode: T_Mode) -> "ModelConfig":
        lesa, xval = mode_flags(mode)
        return replace(self, lesa_enabled=lesa, xval_enabled=xval)


@struct(eq=False)
class LayerTrace:
    scores: Tensor  # (B, h, L, L) before softmax
    probs: Tensor  # (B, h, L, L)
    label_attention: Tensor | None = None  # (B, n, L)
    cosim: Tensor | None = None  # (B, L, L)


@struct(eq=False)
class AttentionTrace:
    layers: list[LayerTrace] = field(default_factory=list)


@struct(eq=False)
class EncoderOutput:
    hidden: Tensor
    trace: AttentionTrace


def label_mixing_matrix(
    class_labels: Sequence, vocab: Vocab, dtype: torch.dtype = torch.float64
) -> Tensor:
    """(n, V) averaging weights so that ``mixing @ E`` gives the label embeddings.

    A keyword's embedding is the mean over its in-vocabulary tokens and a class
    row is the mean over its keywords.
    """
    mixing = torch.zeros(len(class_labels), len(vocab), dtype=dtype)
    for row, class_label in enumerate(class_labels):
        keywords = class_label.keywords
        for keyword in keywords:
            ids = [vocab.id(_.surface) for _ in tokenize(keyword)]
            ids = [_ for _ in ids if _ != UNK_ID]
            if not ids:
                raise VocabError(
                    f"keyword {keyword!r} of class {class_label.id.value} has no token in the vocabulary"
                )
            for id in ids:
                mixing[row, id] += 1.0 / (len(keywords) * len(ids))
    return mixing


def build_label_embeddings(embedding_weight: Tensor, mixing: Tensor) -> Tensor:
    """X^l, one row per class: averaged initial embeddings of the class keywords."""
    return matmul(mixing, embedding_weight)


def lesa_attention(
    x: Tensor,
    label_embeddings: Tensor,
    w_q: nn.Linear,
    w_k: nn.Linear,
    n_heads: int,
    key_mask: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Token-token cosine similarity of label-attention profiles.

    Returns ``(A, CoSim)`` where ``A = softmax(X^l W_q (X W_k)^T / sqrt(D/h))``
    over the token axis, shape (B, n, L), and ``CoSim = norm(A)^T norm(A)``
    with each token's column normalized, shape (B, L, L).
    """
    if x.shape[-1] != label_embeddings.shape[-1]:
        raise ShapeError("lesa_attention", x.shape, label_embeddings.shape)
    d_head = x.shape[-1] // n_heads
    label_queries = w_q(label_embeddings)  # (n, D)
    keys = w_k(x)  # (B, L, D)
    logits = matmul(label_queries, transpose(keys)) / math.sqrt(d_head)
    mask = None if key_mask is None else key_mask[:, None, :]
    attention = row_softmax(logits, mask)
    profiles = l2_normalize(attention, dim=-2)
    cosim = matmul(transpose(profiles), profiles)
    return attention, cosim


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        d, dtype = config.d_model, config.dtype
        self.n_heads = config.n_heads
        self.d_head = d // config.n_heads
        self.cosim_target = config.cosim_target
        self.w_q = nn.Linear(d, d, dtype=dtype)
        self.w_k = nn.Linear(d, d, dtype=dtype)
        self.w_v = nn.Linear(d, d, dtype=dtype)
        self.w_o = nn.Linear(d, d, dtype=dtype)

    def _heads(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.n_heads, self.d_head).transpose(1, 2)

    def forward(
        self, x: Tensor, key_mask: Tensor, label_embeddings: Tensor | None = None
    ) -> tuple[Tensor, LayerTrace]:
        q, k, v = self._heads(self.w_q(x)), self._heads(self.w_k(x)), self._heads(self.w_v(x))
        scores = matmul(q, transpose(k)) / math.sqrt(self.d_head)
        label_attention = cosim = None
        if label_embeddings is not None:
            label_attention, cosim = lesa_attention(
                x, label_embeddings, self.w_q, self.w_k, self.n_heads, key_mask
            )
            if self.cosim_target == "scores":
                # the same similarity is broadcast to every head
                scores = add(scores, cosim.unsqueeze(1))
        probs = row_softmax(scores, key_mask[:, None, None, :])
        if cosim is not None and self.cosim_target == "probs":
            probs = add(probs, cosim.unsqueeze(1))
        context = matmul(probs, v).transpose(1, 2).reshape(x.shape)
        trace = LayerTrace(
            scores=scores, probs=probs, label_attention=label_attention, cosim=cosim
        )
        return self.w_o(context), trace


class EncoderLayer(nn.Module):
    """Post-norm block: attention, residual, norm, GELU feed-forward, residual, norm."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        d, dtype = config.d_model, config.dtype
        self.attention = SelfAttention(config)
        self.attention_norm = nn.LayerNorm(d, dtype=dtype)
        self.ffn_in = nn.Linear(d, config.d_ff, dtype=dtype)
        self.ffn_out = nn.Linear(config.d_ff, d, dtype=dtype)
        self.ffn_norm = nn.LayerNorm(d, dtype=dtype)

    def forward(
        self, x: Tensor, key_mask: Tensor, label_embeddings: Tensor | None = None
    ) -> tuple[Tensor, LayerTrace]:
        attended, trace = self.attention(x, key_mask, label_embeddings)
        x = layer_norm(add(x, attended), self.attention_norm.weight, self.attention_norm.bias)
        fed = self.ffn_out(gelu(self.ffn_in(x)))
        x = layer_norm(add(x, fed), self.ffn_norm.weight, self.ffn_norm.bias)
        return x, trace


class Encoder(nn.Module):
    """Transformer encoder with value-scaled number embeddings and label-embedding attention.

    ``label_mixing`` (n x V, see ``label_mixing_matrix``) is required when
    LESA is enabled. Weights are drawn from a generator seeded with ``seed``.
    """

    def __init__(
        self, config: ModelConfig, label_mixing: Tensor | None = None, seed: int = 0
    ) -> None:
        super().__init__()
        if config.lesa_enabled and label_mixing is None:
            raise ValueError("label-embedding attention needs the class keyword mixing matrix")
        self.config = config
        d, dtype = config.d_model, config.dtype
        self.token_embedding = nn.Embedding(config.vocab_size, d, dtype=dtype)
        self.position_embedding = nn.Embedding(config.max_length, d, dtype=dtype)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.lm_head = nn.Linear(d, config.vocab_size, dtype=dtype)
        self.num_head = nn.Linear(d, 1, dtype=dtype)
        self.classifier = nn.Linear(d, N_CLASSES, dtype=dtype)
        self._init_weights(seed)
        if label_mixing is not None:
            if label_mixing.shape != (N_CLASSES, config.vocab_size):
                raise ShapeError(
                    "label_mixing", label_mixing.shape, (N_CLASSES, config.vocab_size)
                )
            self.register_buffer("label_mixing", label_mixing.to(dtype))
            self.register_buffer(
                "frozen_label_embeddings",
                build_label_embeddings(self.token_embedding.weight, self.label_mixing).detach(),
            )
        else:
            self.label_mixing = None

    def _init_weights(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.endswith("norm.weight"):
                    param.fill_(1.0)
                elif name.endswith("bias"):
                    param.zero_()
                else:
                    nn.init.normal_(param, 0.0, self.config.init_std, generator=generator)

    def label_embeddings(self) -> Tensor | None:
        if self.label_mixing is None:
            return None
        if self.config.freeze_label_embeddings:
            return self.frozen_label_embeddings
        # recomputed every call so X^l follows the embedding table during training
        return build_label_embeddings(self.token_embedding.weight, self.label_mixing)

    def embed(self, ids: Tensor, values: Tensor) -> Tensor:
        """Token plus position embeddings; with Xval each row is scaled by its value."""
        length = ids.shape[-1]
        if length > self.config.max_length:
            raise ShapeError("embed", ids.shape, (self.config.max_length,))
        if values.shape != ids.shape:
            raise ShapeError("embed", ids.shape, values.shape)
        positions = torch.arange(length, device=ids.device)
        h = add(self.token_embedding(ids), self.position_embedding(positions))
        if self.config.xval_enabled:
            h = scale(h, values.to(h.dtype))
        return h

    def forward(
        self, ids: Tensor, values: Tensor, attention_mask: Tensor | None = None
    ) -> EncoderOutput:
        if attention_mask is None:
            attention_mask = ids != PAD_ID
        x = self.embed(ids, values)
        label_embeddings = self.label_embeddings() if self.config.lesa_enabled else None
        trace = AttentionTrace()
        for i, layer in enumerate(self.layers):
            lesa = label_embeddings if i in self.config.lesa_layers else None
            x, layer_trace = layer(x, attention_mask, lesa)
            trace.layers.append(layer_trace)
        return EncoderOutput(hidden=x, trace=trace)

    def head_lm(self, hidden: Tensor) -> Tensor:
        return self.lm_head(hidden)

    def head_num(self, hidden: Tensor) -> Tensor:
        """Positive value prediction per position through a softplus link."""
        return F.softplus(self.num_head(hidden)).squeeze(-1)

    def head_classify(self, hidden: Tensor) -> Tensor:
        return self.classifier(hidden)
