"""Trajectory tracing: question answering over gathered instances.

The encoder consumes question characters plus one short token block per
instance. Instance-instance attention logits receive an additive per-head
bias derived from the pair's relative position at the central frame of
their temporal intersection, sinusoidally embedded and linearly projected
per head. Temporally disjoint pairs get a dedicated learned bias vector;
question tokens participate through learned relation-class biases. The
decoder is a vanilla transformer emitting the answer character by
character.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .kvconfig import ConfigError
from .nets import DecoderLayer, EncoderLayer, scaled_dot_attention
from .vocab import DEFAULT_CHARSET, Vocabulary

TYPE_QUESTION = "question"
TYPE_INSTANCE_MARKER = "instance_marker"
TYPE_INSTANCE_TEXT = "instance_text"
TYPE_IDS = {TYPE_QUESTION: 0, TYPE_INSTANCE_MARKER: 1, TYPE_INSTANCE_TEXT: 2}

BIAS_MODES = ("off", "spatial_only", "full")

Trajectory = list[tuple[int, float, float]]


@dataclass
class TraceModelConfig:
    width: int = 96
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 8
    bands: int = 8
    omega_max: float = 100.0
    symmetric_embed: bool = False
    bias_mode: str = "full"
    max_instances: int = 6
    max_instance_text_len: int = 12
    max_question_len: int = 64
    max_answer_len: int = 16
    multi_label: bool = False
    charset: str = DEFAULT_CHARSET
    frame_markers: int = 16

    def validate(self) -> None:
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} must be divisible by heads {self.heads}")
        if self.bands < 1:
            raise ConfigError("bands must be >= 1")
        if self.bias_mode not in BIAS_MODES:
            raise ConfigError(f"bias_mode must be one of {BIAS_MODES}, got {self.bias_mode!r}")
        if self.max_instances < 1:
            raise ConfigError("max_instances must be >= 1")

    @property
    def embed_dim(self) -> int:
        return (4 if self.symmetric_embed else 2) * self.bands

    @property
    def max_sequence_len(self) -> int:
        return 2 + self.max_question_len + self.max_instances * (1 + self.max_instance_text_len)

    def build_vocab(self) -> Vocabulary:
        # Same charset and marker inventory as the gathering model, so both
        # models address one shared token id space.
        return Vocabulary(self.charset, self.frame_markers)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# Trajectory geometry
# ---------------------------------------------------------------------------


def temporal_intersection(traj_i: Trajectory, traj_j: Trajectory) -> tuple[int, int] | None:
    """Inclusive frame range where both trajectories exist, or None."""
    lo = max(traj_i[0][0], traj_j[0][0])
    hi = min(traj_i[-1][0], traj_j[-1][0])
    return (lo, hi) if lo <= hi else None


def central_frame(frame_range: tuple[int, int]) -> int:
    """Midpoint of an inclusive range; lower median for even lengths."""
    lo, hi = frame_range
    if lo > hi:
        raise ValueError(f"empty frame range {frame_range}")
    return (lo + hi) // 2


def _position_at(traj: Trajectory, frame: int) -> tuple[float, float]:
    for f, cx, cy in traj:
        if f == frame:
            return cx, cy
    raise ValueError(f"trajectory has no observation at frame {frame}")


def traj_pos(traj_i: Trajectory, traj_j: Trajectory, f_t: int) -> tuple[float, float]:
    """Center offset (i minus j) at the shared frame f_t."""
    xi, yi = _position_at(traj_i, f_t)
    xj, yj = _position_at(traj_j, f_t)
    return xi - xj, yi - yj


def nearest_frames(traj_i: Trajectory, traj_j: Trajectory) -> tuple[int, int]:
    """Temporally closest frame pair; ties resolved to the earliest pair.

    For co-occurring trajectories this is the first common frame. Used by
    the spatial-only bias mode, which ignores the temporal factor.
    """
    best: tuple[int, int, int] | None = None
    for fi, _, _ in traj_i:
        for fj, _, _ in traj_j:
            key = (abs(fi - fj), fi, fj)
            if best is None or key < best:
                best = key
    if best is None:
        raise ValueError("empty trajectory")
    return best[1], best[2]


def frequency_bands(config: TraceModelConfig) -> list[float]:
    """Geometric frequency ladder from 1 to omega_max."""
    if config.bands == 1:
        return [1.0]
    return [config.omega_max ** (b / (config.bands - 1)) for b in range(config.bands)]


def traj_embed(dx: float, dy: float, config: TraceModelConfig) -> torch.Tensor:
    """Sinusoidal embedding of a relative position.

    Default layout is [sin(w_b * dx)] ++ [cos(w_b * dy)]: odd in dx, even
    in dy. The symmetric variant appends the complementary blocks.
    """
    omegas = frequency_bands(config)
    sin_x = [math.sin(w * dx) for w in omegas]
    cos_y = [math.cos(w * dy) for w in omegas]
    if config.symmetric_embed:
        cos_x = [math.cos(w * dx) for w in omegas]
        sin_y = [math.sin(w * dy) for w in omegas]
        return torch.tensor(sin_x + cos_x + sin_y + cos_y, dtype=torch.float64)
    return torch.tensor(sin_x + cos_y, dtype=torch.float64)


def pair_geometry(
    traj_i: Trajectory, traj_j: Trajectory, config: TraceModelConfig
) -> torch.Tensor | None:
    """The pair's trajectory embedding under the configured bias mode, or
    None for a temporally disjoint pair in full mode (learned sentinel)."""
    inter = temporal_intersection(traj_i, traj_j)
    if config.bias_mode == "spatial_only":
        fi, fj = nearest_frames(traj_i, traj_j)
        xi, yi = _position_at(traj_i, fi)
        xj, yj = _position_at(traj_j, fj)
        return traj_embed(xi - xj, yi - yj, config)
    if inter is None:
        return None
    dx, dy = traj_pos(traj_i, traj_j, central_frame(inter))
    return traj_embed(dx, dy, config)


class TrajectoryBiasHead(nn.Module):
    """Maps pair geometry to per-head attention biases.

    A learned linear projection reduces the trajectory embedding to one
    scalar per head; temporally disjoint pairs get a dedicated learned
    vector; question tokens use relation-class biases (question-question,
    question-instance, instance-question), zero-initialized.
    """

    def __init__(self, config: TraceModelConfig):
        super().__init__()
        self.projection = nn.Linear(config.embed_dim, config.heads, bias=False)
        self.disjoint_bias = nn.Parameter(torch.zeros(config.heads))
        self.relation_bias = nn.Parameter(torch.zeros(3, config.heads))


def head_bias(embed: torch.Tensor | None, head: TrajectoryBiasHead) -> torch.Tensor:
    """Per-head bias for one instance pair; None means temporally disjoint."""
    if embed is None:
        return head.disjoint_bias
    return head.projection(embed.to(head.projection.weight.dtype))


@dataclass
class TrajectoryBias:
    """Geometric record for one instance pair."""

    pair: tuple[int, int]
    intersection: tuple[int, int] | None
    central_frame: int | None
    traj_pos: tuple[float, float] | None
    traj_embed: torch.Tensor | None
    head_bias: torch.Tensor


def compute_pair_bias(
    pair: tuple[int, int],
    traj_i: Trajectory,
    traj_j: Trajectory,
    head: TrajectoryBiasHead,
    config: TraceModelConfig,
) -> TrajectoryBias:
    """Resolve one pair's geometry under the configured bias mode."""
    inter = temporal_intersection(traj_i, traj_j)
    f_t = central_frame(inter) if inter is not None else None
    embed = pair_geometry(traj_i, traj_j, config)
    pos = None
    if embed is not None and inter is not None and config.bias_mode != "spatial_only":
        pos = traj_pos(traj_i, traj_j, f_t)
    elif embed is not None and config.bias_mode == "spatial_only":
        fi, fj = nearest_frames(traj_i, traj_j)
        xi, yi = _position_at(traj_i, fi)
        xj, yj = _position_at(traj_j, fj)
        pos = (xi - xj, yi - yj)
    return TrajectoryBias(
        pair=pair,
        intersection=inter,
        central_frame=f_t,
        traj_pos=pos,
        traj_embed=embed,
        head_bias=head_bias(embed, head),
    )


def biased_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, pair_bias: torch.Tensor
) -> torch.Tensor:
    """Scaled dot-product attention with an additive logit bias; rows of the
    attention matrix sum to 1 for any finite bias."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError("query/key/value dimensions do not agree")
    return scaled_dot_attention(q, k, v, bias=pair_bias)


# ---------------------------------------------------------------------------
# Encoder input
# ---------------------------------------------------------------------------


@dataclass
class EncoderInput:
    token_ids: list[int]
    token_types: list[str]
    instance_of_token: list[int | None]
    trajectories: list[Trajectory] = field(default_factory=list)


def select_instances(instances: list, cap: int) -> list[int]:
    """Indices kept under the cap: longest trajectories first, ties by
    earlier start frame; original order is preserved among the kept."""
    if len(instances) <= cap:
        return list(range(len(instances)))
    ranked = sorted(
        range(len(instances)),
        key=lambda i: (-len(instances[i][1]), instances[i][1][0][0], i),
    )
    return sorted(ranked[:cap])


def build_encoder_input(
    question: str,
    instances: list[tuple[str, Trajectory]],
    config: TraceModelConfig,
    vocab: Vocabulary,
) -> EncoderInput:
    """Lay out [BOS] question [SEP] then [INST] + characters per instance."""
    if not question:
        raise ValueError("question must be nonempty")
    keep = select_instances(instances, config.max_instances)
    token_ids = [vocab.bos_id]
    token_types = [TYPE_QUESTION]
    owner: list[int | None] = [None]
    for ch in question[: config.max_question_len]:
        token_ids.append(vocab.char_id(ch))
        token_types.append(TYPE_QUESTION)
        owner.append(None)
    token_ids.append(vocab.sep_id)
    token_types.append(TYPE_QUESTION)
    owner.append(None)
    trajectories = []
    for slot, idx in enumerate(keep):
        text, traj = instances[idx]
        trajectories.append(list(traj))
        token_ids.append(vocab.inst_id)
        token_types.append(TYPE_INSTANCE_MARKER)
        owner.append(slot)
        for ch in text[: config.max_instance_text_len]:
            token_ids.append(vocab.char_id(ch))
            token_types.append(TYPE_INSTANCE_TEXT)
            owner.append(slot)
    return EncoderInput(
        token_ids=token_ids,
        token_types=token_types,
        instance_of_token=owner,
        trajectories=trajectories,
    )


def pair_bias_matrix(
    enc: EncoderInput, head: TrajectoryBiasHead, config: TraceModelConfig
) -> torch.Tensor | None:
    """Token-level [heads, L, L] additive bias for one encoder input.

    Instance-instance entries use the pair's trajectory bias (the diagonal
    uses the self pair); entries involving question tokens use the
    relation-class biases. Returns None when the mode is off. This is the
    single-input reference path; the model computes the same matrix in
    batch form at forward time.
    """
    if config.bias_mode == "off":
        return None
    n = len(enc.trajectories)
    length = len(enc.token_ids)
    dtype = head.projection.weight.dtype
    heads = head.projection.weight.shape[0]
    owner = torch.tensor([-1 if o is None else o for o in enc.instance_of_token], dtype=torch.long)
    is_q = owner < 0
    qq = is_q[:, None] & is_q[None, :]
    qi = is_q[:, None] & ~is_q[None, :]
    iq = ~is_q[:, None] & is_q[None, :]
    bias = torch.zeros(heads, length, length, dtype=dtype)
    bias = bias + head.relation_bias[0][:, None, None] * qq
    bias = bias + head.relation_bias[1][:, None, None] * qi
    bias = bias + head.relation_bias[2][:, None, None] * iq
    if n > 0:
        rows = []
        for i in range(n):
            cols = [
                compute_pair_bias((i, j), enc.trajectories[i], enc.trajectories[j], head, config).head_bias
                for j in range(n)
            ]
            rows.append(torch.stack(cols))
        pair = torch.stack(rows).to(dtype)
        idx = owner.clamp(min=0)
        grid = pair[idx[:, None], idx[None, :]].permute(2, 0, 1)
        bias = bias + grid * (~is_q[:, None] & ~is_q[None, :])
    return bias


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class TraceBatch:
    """Tensors for a batch of encoder inputs plus raw pair geometry.

    Pair embeddings are constants; the per-head biases are recomputed from
    the live projection parameters inside the model's forward pass so they
    stay on the autograd tape.
    """

    token_ids: torch.Tensor
    token_types: torch.Tensor
    instance_index: torch.Tensor
    char_offset: torch.Tensor
    padding_mask: torch.Tensor
    pair_embed: torch.Tensor
    pair_disjoint: torch.Tensor
    pair_valid: torch.Tensor
    has_bias: bool
    target_in: torch.Tensor
    target_out: torch.Tensor
    target_mask: torch.Tensor


def _segment_offsets(enc: EncoderInput) -> list[int]:
    """Token position within its segment (question or one instance block).

    Derived from the input layout; gives the decoder a direct handle on
    "character t of some instance" when copying answers.
    """
    offsets = []
    run = 0
    for tok_type in enc.token_types:
        if tok_type == TYPE_INSTANCE_MARKER:
            run = 0
            offsets.append(0)
        else:
            offsets.append(run)
            run += 1
    return offsets


def collate_encoder_inputs(
    inputs: list[EncoderInput],
    targets: list[list[int]],
    config: TraceModelConfig,
    vocab: Vocabulary,
    dtype: torch.dtype = torch.float32,
) -> TraceBatch:
    batch = len(inputs)
    seq_len = max(len(e.token_ids) for e in inputs)
    n_max = max((len(e.trajectories) for e in inputs), default=0)
    n_max = max(n_max, 1)
    tgt_len = max(len(t) for t in targets) + 1

    token_ids = torch.full((batch, seq_len), vocab.pad_id, dtype=torch.long)
    token_types = torch.zeros(batch, seq_len, dtype=torch.long)
    inst_index = torch.full((batch, seq_len), -1, dtype=torch.long)
    offsets = torch.zeros(batch, seq_len, dtype=torch.long)
    padding = torch.ones(batch, seq_len, dtype=torch.bool)
    pair_embed = torch.zeros(batch, n_max, n_max, config.embed_dim, dtype=dtype)
    pair_disjoint = torch.zeros(batch, n_max, n_max, dtype=torch.bool)
    pair_valid = torch.zeros(batch, n_max, n_max, dtype=torch.bool)
    target_in = torch.full((batch, tgt_len), vocab.pad_id, dtype=torch.long)
    target_out = torch.full((batch, tgt_len), vocab.pad_id, dtype=torch.long)
    target_mask = torch.zeros(batch, tgt_len, dtype=torch.bool)

    for b, (enc, tgt) in enumerate(zip(inputs, targets)):
        n = len(enc.token_ids)
        token_ids[b, :n] = torch.tensor(enc.token_ids, dtype=torch.long)
        token_types[b, :n] = torch.tensor([TYPE_IDS[t] for t in enc.token_types], dtype=torch.long)
        inst_index[b, :n] = torch.tensor(
            [-1 if o is None else o for o in enc.instance_of_token], dtype=torch.long
        )
        offsets[b, :n] = torch.tensor(_segment_offsets(enc), dtype=torch.long)
        padding[b, :n] = False
        if config.bias_mode != "off":
            for i, ti in enumerate(enc.trajectories):
                for j, tj in enumerate(enc.trajectories):
                    pair_valid[b, i, j] = True
                    embed = pair_geometry(ti, tj, config)
                    if embed is None:
                        pair_disjoint[b, i, j] = True
                    else:
                        pair_embed[b, i, j] = embed.to(dtype)
        target_in[b, 0] = vocab.bos_id
        target_in[b, 1 : len(tgt) + 1] = torch.tensor(tgt, dtype=torch.long)
        target_out[b, : len(tgt)] = torch.tensor(tgt, dtype=torch.long)
        target_out[b, len(tgt)] = vocab.eos_id
        target_mask[b, : len(tgt) + 1] = True
    return TraceBatch(
        token_ids=token_ids,
        token_types=token_types,
        instance_index=inst_index,
        char_offset=offsets,
        padding_mask=padding,
        pair_embed=pair_embed,
        pair_disjoint=pair_disjoint,
        pair_valid=pair_valid,
        has_bias=config.bias_mode != "off",
        target_in=target_in,
        target_out=target_out,
        target_mask=target_mask,
    )


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class TraceModel(nn.Module):
    def __init__(self, config: TraceModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.vocab = config.build_vocab()
        width = config.width
        self.token_embed = nn.Embedding(len(self.vocab), width)
        self.type_embed = nn.Embedding(len(TYPE_IDS), width)
        self.pos_embed = nn.Embedding(config.max_sequence_len, width)
        self.instance_embed = nn.Embedding(config.max_instances + 1, width)
        self.offset_embed = nn.Embedding(config.max_sequence_len, width)
        self.bias_head = TrajectoryBiasHead(config)
        self.encoder = nn.ModuleList(EncoderLayer(width, config.heads) for _ in range(config.encoder_layers))
        self.encoder_norm = nn.LayerNorm(width)
        self.target_pos_embed = nn.Embedding(config.max_answer_len + 2, width)
        self.decoder = nn.ModuleList(DecoderLayer(width, config.heads) for _ in range(config.decoder_layers))
        self.decoder_norm = nn.LayerNorm(width)
        self.lm_head = nn.Linear(width, len(self.vocab))

    def compute_bias(self, batch: TraceBatch) -> torch.Tensor | None:
        """Assemble the [B, heads, L, L] attention bias from raw geometry."""
        if not batch.has_bias:
            return None
        head = self.bias_head
        weight = head.projection.weight
        pair = batch.pair_embed.to(weight.dtype) @ weight.t()
        pair = torch.where(batch.pair_disjoint[..., None], head.disjoint_bias, pair)
        pair = pair * batch.pair_valid[..., None]
        owner = batch.instance_index
        b = owner.shape[0]
        idx = owner.clamp(min=0)
        arange = torch.arange(b)[:, None, None]
        grid = pair[arange, idx[:, :, None], idx[:, None, :]]
        is_q = owner < 0
        qq = is_q[:, :, None] & is_q[:, None, :]
        qi = is_q[:, :, None] & ~is_q[:, None, :]
        iq = ~is_q[:, :, None] & is_q[:, None, :]
        rel = head.relation_bias
        bias = grid * (~is_q[:, :, None] & ~is_q[:, None, :]).unsqueeze(-1)
        bias = bias + rel[0] * qq.unsqueeze(-1) + rel[1] * qi.unsqueeze(-1) + rel[2] * iq.unsqueeze(-1)
        return bias.permute(0, 3, 1, 2)

    def encode(self, batch: TraceBatch) -> torch.Tensor:
        positions = torch.arange(batch.token_ids.shape[1], device=batch.token_ids.device)
        x = (
            self.token_embed(batch.token_ids)
            + self.type_embed(batch.token_types)
            + self.pos_embed(positions)[None]
            + self.instance_embed(batch.instance_index + 1)
            + self.offset_embed(batch.char_offset.clamp(0, self.config.max_sequence_len - 1))
        )
        # Static geometry: computed once per batch, shared by all layers.
        bias = self.compute_bias(batch)
        for layer in self.encoder:
            x = layer(x, key_padding_mask=batch.padding_mask, bias=bias)
        return self.encoder_norm(x)

    def decode(self, memory: torch.Tensor, memory_padding: torch.Tensor, target_prefix: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(target_prefix.shape[1], device=target_prefix.device)
        y = self.token_embed(target_prefix) + self.target_pos_embed(positions)[None]
        for layer in self.decoder:
            y = layer(y, memory, memory_padding_mask=memory_padding)
        return self.lm_head(self.decoder_norm(y))

    def forward(self, batch: TraceBatch) -> torch.Tensor:
        memory = self.encode(batch)
        return self.decode(memory, batch.padding_mask, batch.target_in)


# ---------------------------------------------------------------------------
# Losses and generation
# ---------------------------------------------------------------------------


def answer_loss(
    logits: torch.Tensor,
    answers: list[str],
    vocab: Vocabulary,
    multi_label: bool = False,
    rng: random.Random | None = None,
) -> torch.Tensor:
    """Decoder loss against a set of acceptable answers.

    Default: teacher-forced per-step cross-entropy against one sampled
    answer. Multi-label: per-step binary cross-entropy over the vocabulary
    with multi-hot targets from the union of the answers' step-t tokens,
    summed over the vocabulary and averaged over steps.
    """
    if not answers:
        raise ValueError("answers must be nonempty")
    if multi_label:
        return multilabel_step_bce(logits, answers, vocab).mean()
    ordered = sorted(answers)
    answer = ordered[rng.randrange(len(ordered))] if rng is not None and len(ordered) > 1 else ordered[0]
    target = torch.tensor(vocab.encode_text(answer) + [vocab.eos_id], dtype=torch.long)
    if logits.shape[0] < target.shape[0]:
        raise ValueError(f"answer needs {target.shape[0]} steps, logits have {logits.shape[0]}")
    return F.cross_entropy(logits[: target.shape[0]], target, reduction="mean")


def multilabel_step_bce(logits: torch.Tensor, answers: list[str], vocab: Vocabulary) -> torch.Tensor:
    """Per-step summed BCE of the vocabulary distribution against the union
    multi-hot targets; answers shorter than a step stop contributing."""
    steps = max(len(a) for a in answers) + 1
    if logits.shape[0] < steps:
        raise ValueError(f"answers need {steps} steps, logits have {logits.shape[0]}")
    target = torch.zeros(steps, len(vocab), dtype=logits.dtype)
    active = torch.zeros(steps, dtype=logits.dtype)
    for answer in answers:
        ids = vocab.encode_text(answer) + [vocab.eos_id]
        for t, tok in enumerate(ids):
            target[t, tok] = 1.0
            active[t] = 1.0
    probs = F.softmax(logits[:steps], dim=-1)
    eps = torch.finfo(logits.dtype).tiny
    bce = -(target * (probs + eps).log() + (1 - target) * (1 - probs + eps).log())
    return bce.sum(dim=-1) * active


def batched_answer_ce(logits: torch.Tensor, batch: TraceBatch) -> torch.Tensor:
    """Mean over the batch of per-answer mean step cross-entropy."""
    ce = F.cross_entropy(logits.transpose(1, 2), batch.target_out, reduction="none")
    ce = ce * batch.target_mask
    return (ce.sum(dim=1) / batch.target_mask.sum(dim=1)).mean()


@torch.no_grad()
def generate_answer(
    model: TraceModel,
    question: str,
    instances: list[tuple[str, Trajectory]],
    config: TraceModelConfig | None = None,
) -> str:
    """Greedy answer decoding; deterministic for fixed weights."""
    return generate_answer_batch(model, [(question, instances)], config)[0]


@torch.no_grad()
def generate_answer_batch(
    model: TraceModel,
    items: list[tuple[str, list[tuple[str, Trajectory]]]],
    config: TraceModelConfig | None = None,
) -> list[str]:
    config = config or model.config
    vocab = model.vocab
    inputs = [build_encoder_input(q, inst, config, vocab) for q, inst in items]
    batch = collate_encoder_inputs(inputs, [[] for _ in inputs], config, vocab)
    memory = model.encode(batch)
    n = len(items)
    prefix = torch.full((n, 1), vocab.bos_id, dtype=torch.long)
    finished = torch.zeros(n, dtype=torch.bool)
    outputs: list[list[int]] = [[] for _ in range(n)]
    for _ in range(config.max_answer_len + 1):
        logits = model.decode(memory, batch.padding_mask, prefix)
        nxt = logits[:, -1].argmax(dim=-1)
        for i in range(n):
            if not finished[i]:
                if nxt[i].item() == vocab.eos_id:
                    finished[i] = True
                else:
                    outputs[i].append(nxt[i].item())
        if bool(finished.all()):
            break
        prefix = torch.cat([prefix, nxt[:, None]], dim=1)
    return [vocab.decode_text(ids) for ids in outputs]
