"""Miniature encoder-decoder transformer with re-scalable attention.

The attention temperature k divides the logits in every attention module
(encoder self, decoder self, cross). k = 1 is the canonical model; k > 1
flattens the attention distributions, which is how diverse pseudo summaries
are produced. Training updates go through an explicit Adam implementation so
runs are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import BOS_ID, Vocabulary

TokenSequence = Sequence[int]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    max_positions: int = 128
    dropout_rate: float = 0.0

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "num_heads", "ff_dim", "encoder_layers", "decoder_layers", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class AttentionScale:
    k: float = 1.0

    def __post_init__(self) -> None:
        if not self.k >= 1.0:
            raise ValueError("attention scale k must be >= 1")


UNIT_SCALE = AttentionScale(1.0)


def sample_attention_scale(gamma: float, rng) -> AttentionScale:
    """Draw k uniformly from [1, gamma]."""
    if gamma < 1.0:
        raise ValueError("gamma must be >= 1")
    return AttentionScale(k=rng.uniform(1.0, gamma))


def scaled_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    scale: AttentionScale = UNIT_SCALE,
    mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """softmax(Q K^T / (k sqrt(d))) V with boolean masking.

    ``mask`` entries that are True are excluded (set to -inf before the
    softmax). Works on any batched layout whose last two dims are
    (positions, d).
    """
    for name, tensor in (("queries", queries), ("keys", keys), ("values", values)):
        if not torch.isfinite(tensor).all():
            raise ValueError(f"{name} contains non-finite values")
    d = queries.shape[-1]
    scores = queries @ keys.transpose(-2, -1) / (scale.k * math.sqrt(d))
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    output = weights @ values
    if return_weights:
        return output, weights
    return output


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, query, key, value, scale: AttentionScale, mask=None):
        # mask: broadcastable to (batch, heads, q_len, k_len), True = exclude.
        batch, q_len, d_model = query.shape
        k_len = key.shape[1]
        q = self.q(query).view(batch, q_len, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(key).view(batch, k_len, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(value).view(batch, k_len, self.num_heads, self.head_dim).transpose(1, 2)
        ctx = scaled_attention(q, k, v, scale, mask)
        ctx = ctx.transpose(1, 2).reshape(batch, q_len, d_model)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ff_dim: int, dropout_rate: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ff_dim)
        self.fc2 = nn.Linear(ff_dim, d_model)
        self.dropout_rate = dropout_rate

    def forward(self, x):
        hidden = F.gelu(self.fc1(x))
        hidden = F.dropout(hidden, self.dropout_rate, training=self.training)
        return self.fc2(hidden)


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(config.d_model, config.num_heads)
        self.norm1 = nn.LayerNorm(config.d_model)
        self.ff = FeedForward(config.d_model, config.ff_dim, config.dropout_rate)
        self.norm2 = nn.LayerNorm(config.d_model)
        self.dropout_rate = config.dropout_rate

    def forward(self, x, scale, pad_mask):
        normed = self.norm1(x)
        attn = self.self_attn(normed, normed, normed, scale, pad_mask)
        x = x + F.dropout(attn, self.dropout_rate, training=self.training)
        x = x + self.ff(self.norm2(x))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(config.d_model, config.num_heads)
        self.norm1 = nn.LayerNorm(config.d_model)
        self.cross_attn = MultiHeadAttention(config.d_model, config.num_heads)
        self.norm2 = nn.LayerNorm(config.d_model)
        self.ff = FeedForward(config.d_model, config.ff_dim, config.dropout_rate)
        self.norm3 = nn.LayerNorm(config.d_model)
        self.dropout_rate = config.dropout_rate

    def forward(self, y, memory, scale, causal_mask, memory_mask):
        normed = self.norm1(y)
        attn = self.self_attn(normed, normed, normed, scale, causal_mask)
        y = y + F.dropout(attn, self.dropout_rate, training=self.training)
        normed = self.norm2(y)
        cross = self.cross_attn(normed, memory, memory, scale, memory_mask)
        y = y + F.dropout(cross, self.dropout_rate, training=self.training)
        y = y + self.ff(self.norm3(y))
        return y


class Seq2SeqModel(nn.Module):
    """Pre-norm transformer encoder-decoder over a shared token embedding."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.encoder_positions = nn.Embedding(config.max_positions, config.d_model)
        self.decoder_positions = nn.Embedding(config.max_positions, config.d_model)
        self.encoder_layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.encoder_layers))
        self.encoder_norm = nn.LayerNorm(config.d_model)
        self.decoder_layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.decoder_layers))
        self.decoder_norm = nn.LayerNorm(config.d_model)
        self.output_projection = nn.Linear(config.d_model, config.vocab_size)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if param.dim() >= 2:
                    std = math.sqrt(2.0 / sum(param.shape[-2:]))
                    param.copy_(torch.randn(param.shape, generator=generator) * std)
                elif name.endswith(".weight"):
                    param.fill_(1.0)  # layer-norm gains
                else:
                    param.zero_()

    def _check_length(self, length: int, what: str) -> None:
        if length > self.config.max_positions:
            raise ValueError(f"{what} length {length} exceeds max_positions {self.config.max_positions}")

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor | None, scale: AttentionScale) -> torch.Tensor:
        """src: (batch, src_len) token ids; src_pad True marks padding."""
        batch, src_len = src.shape
        self._check_length(src_len, "document")
        positions = torch.arange(src_len, device=src.device)
        x = self.token_embedding(src) + self.encoder_positions(positions)[None, :, :]
        pad_mask = None
        if src_pad is not None:
            pad_mask = src_pad[:, None, None, :]
        for layer in self.encoder_layers:
            x = layer(x, scale, pad_mask)
        return self.encoder_norm(x)

    def decode_logits(
        self,
        memory: torch.Tensor,
        src_pad: torch.Tensor | None,
        tgt_input: torch.Tensor,
        scale: AttentionScale,
    ) -> torch.Tensor:
        """tgt_input: (batch, tgt_len) decoder input ids. Returns (batch, tgt_len, vocab)."""
        batch, tgt_len = tgt_input.shape
        self._check_length(tgt_len, "decoder input")
        positions = torch.arange(tgt_len, device=tgt_input.device)
        y = self.token_embedding(tgt_input) + self.decoder_positions(positions)[None, :, :]
        causal = torch.triu(torch.ones(tgt_len, tgt_len, dtype=torch.bool, device=tgt_input.device), diagonal=1)
        causal = causal[None, None, :, :]
        memory_mask = None
        if src_pad is not None:
            memory_mask = src_pad[:, None, None, :]
        for layer in self.decoder_layers:
            y = layer(y, memory, scale, causal, memory_mask)
        return self.output_projection(self.decoder_norm(y))

    def forward_batch(
        self,
        src: torch.Tensor,
        src_pad: torch.Tensor | None,
        tgt_input: torch.Tensor,
        scale: AttentionScale = UNIT_SCALE,
    ) -> torch.Tensor:
        memory = self.encode(src, src_pad, scale)
        return self.decode_logits(memory, src_pad, tgt_input, scale)


def forward_logprobs(
    model: Seq2SeqModel,
    document: TokenSequence,
    decoder_prefix: TokenSequence,
    scale: AttentionScale = UNIT_SCALE,
) -> torch.Tensor:
    """Per-position next-token log-probabilities for one example.

    Row t is the distribution over token t+1 given the begin marker, the first
    t prefix tokens, and the document; the returned matrix has
    len(decoder_prefix) + 1 rows.
    """
    if len(document) == 0:
        raise ValueError("document must be nonempty")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            src = torch.tensor([list(document)], dtype=torch.long)
            tgt = torch.tensor([[BOS_ID] + list(decoder_prefix)], dtype=torch.long)
            logits = model.forward_batch(src, None, tgt, scale)
    finally:
        model.train(was_training)
    return F.log_softmax(logits[0], dim=-1)


GradientSet = dict[str, torch.Tensor]


def backward(model: Seq2SeqModel, loss: torch.Tensor) -> GradientSet:
    """Gradient of a scalar loss with respect to every model parameter."""
    names = [name for name, _ in model.named_parameters()]
    params = [param for _, param in model.named_parameters()]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    result: GradientSet = {}
    for name, param, grad in zip(names, params, grads):
        if grad is None:
            grad = torch.zeros_like(param)
        elif not torch.isfinite(grad).all():
            raise ValueError(f"non-finite gradient for parameter {name}")
        result[name] = grad
    return result


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def init_adam_state(model: Seq2SeqModel) -> AdamState:
    state = AdamState()
    for name, param in model.named_parameters():
        state.m[name] = torch.zeros_like(param)
        state.v[name] = torch.zeros_like(param)
    return state


def adam_step(
    model: Seq2SeqModel,
    grads: GradientSet,
    state: AdamState,
    learning_rate: float,
    weight_decay: float = 0.0,
) -> AdamState:
    """One Adam update (beta1 0.9, beta2 0.999, eps 1e-8, decoupled decay).

    Parameters and state are updated in place; the state is also returned.
    """
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for name, param in model.named_parameters():
            grad = grads[name]
            if not torch.isfinite(grad).all():
                raise ValueError(f"non-finite gradient for parameter {name}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
            denom = (v / bias2).sqrt_().add_(eps)
            if weight_decay != 0.0:
                param.mul_(1.0 - learning_rate * weight_decay)
            param.addcdiv_(m / bias1, denom, value=-learning_rate)
    return state


def default_decoder_indices(teacher_layers: int, student_layers: int) -> list[int]:
    """Evenly spaced teacher decoder layers, last layer always included."""
    if not 1 <= student_layers <= teacher_layers:
        raise ValueError("student_layers must be in [1, teacher_layers]")
    if student_layers == 1:
        return [teacher_layers - 1]
    return [i * (teacher_layers - 1) // (student_layers - 1) for i in range(student_layers)]


def init_student_from_teacher(teacher: Seq2SeqModel, decoder_layer_indices: Sequence[int]) -> Seq2SeqModel:
    """Shrink-style student: teacher encoder plus the selected decoder layers."""
    indices = list(decoder_layer_indices)
    if not indices:
        raise ValueError("decoder_layer_indices must be nonempty")
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ValueError("decoder_layer_indices must be strictly increasing")
    if indices[0] < 0 or indices[-1] >= teacher.config.decoder_layers:
        raise ValueError(
            f"decoder_layer_indices must lie in [0, {teacher.config.decoder_layers - 1}]"
        )
    student_config = replace(teacher.config, decoder_layers=len(indices))
    student = Seq2SeqModel(student_config, seed=0)
    source = teacher.state_dict()
    target = {}
    for key, value in source.items():
        if key.startswith("decoder_layers."):
            continue
        target[key] = value.clone()
    for student_idx, teacher_idx in enumerate(indices):
        prefix = f"decoder_layers.{teacher_idx}."
        for key, value in source.items():
            if key.startswith(prefix):
                target[f"decoder_layers.{student_idx}." + key[len(prefix):]] = value.clone()
    student.load_state_dict(target)
    return student


MAGIC = b"DSCL"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes / version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared content."""


class CheckpointShapeError(CheckpointError):
    """Manifest disagrees with the model shapes implied by the config."""


def save_checkpoint(model: Seq2SeqModel, vocab: Vocabulary, path: str | Path) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, param in model.named_parameters():
        data = param.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(param.shape), "offset": offset, "count": param.numel()}
        )
        blobs.append(data)
        offset += len(data)
    header = {
        "config": asdict(model.config),
        "vocab": vocab.to_token_list(),
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[Seq2SeqModel, Vocabulary]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise CheckpointTruncatedError(f"{path}: file shorter than the magic preamble")
    if data[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic bytes {data[:4]!r}")
    if len(data) < 9:
        raise CheckpointTruncatedError(f"{path}: header length field missing")
    if data[4] != FORMAT_VERSION:
        raise CheckpointMagicError(f"{path}: unsupported format version {data[4]}")
    (header_len,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + header_len:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(data[9 : 9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointMagicError(f"{path}: header is not valid JSON") from exc
    config = ModelConfig(**header["config"])
    vocab = Vocabulary.from_token_list(header["vocab"])
    model = Seq2SeqModel(config, seed=0)
    manifest = {entry["name"]: entry for entry in header["manifest"]}
    payload = data[9 + header_len :]
    state = {}
    for name, param in model.named_parameters():
        entry = manifest.get(name)
        if entry is None:
            raise CheckpointShapeError(f"{path}: manifest missing parameter {name}")
        if list(entry["shape"]) != list(param.shape) or entry["count"] != param.numel():
            raise CheckpointShapeError(
                f"{path}: shape mismatch for {name}: manifest {entry['shape']}, model {list(param.shape)}"
            )
        end = entry["offset"] + 4 * entry["count"]
        if end > len(payload):
            raise CheckpointTruncatedError(f"{path}: parameter data truncated at {name}")
        array = np.frombuffer(payload, dtype="<f4", count=entry["count"], offset=entry["offset"])
        state[name] = torch.from_numpy(array.copy()).view(*entry["shape"])
    model.load_state_dict(state)
    model.eval()
    return model, vocab
