"""Instance gathering: recovering one canonical transcription per instance.

An instance's full per-frame observation sequence (frame markers, layout,
OCR characters, visual features) is encoded by a small transformer; a
decoder emits the canonical text auto-regressively. A scalar head on each
observation's frame-marker state scores whether that sighting already
matches the target transcription, trained as an auxiliary objective.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .kvconfig import ConfigError
from .nets import DecoderLayer, EncoderLayer
from .vocab import DEFAULT_CHARSET, Vocabulary

TYPE_SPECIAL = "special"
TYPE_TEXT = "text"
TYPE_LAYOUT = "layout"
TYPE_VISUAL = "visual"
TYPE_IDS = {TYPE_SPECIAL: 0, TYPE_TEXT: 1, TYPE_LAYOUT: 2, TYPE_VISUAL: 3}


@dataclass
class GatherModelConfig:
    width: int = 96
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    max_observations: int = 16
    max_text_len: int = 8
    visual_dim: int = 16
    charset: str = DEFAULT_CHARSET
    aux_weight: float = 1.0
    max_frame_index: int = 64

    def validate(self) -> None:
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} must be divisible by heads {self.heads}")
        if self.aux_weight < 0:
            raise ConfigError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if self.max_observations < 1 or self.max_text_len < 1:
            raise ConfigError("max_observations and max_text_len must be positive")

    def build_vocab(self) -> Vocabulary:
        return Vocabulary(self.charset, self.max_observations)

    @property
    def max_sequence_len(self) -> int:
        # [BOS] + per observation ([FRAME_k] [BOX] chars [VIS]) + [EOS]
        return 2 + self.max_observations * (3 + self.max_text_len * 2)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class GatherSequence:
    """Flattened multimodal sequence for one instance.

    Parallel per-position records: token id, token type, layout 4-vector
    (nonzero only at [BOX] positions), visual vector (only at [VIS]
    positions), source frame, and the index of the owning observation
    (-1 for [BOS]/[EOS]).
    """

    token_ids: list[int]
    token_types: list[str]
    layout_values: list[tuple[float, float, float, float]]
    visual_values: list[list[float]]
    frame_index: list[int]
    observation_index: list[int]

    def __post_init__(self):
        n = len(self.token_ids)
        for name in ("token_types", "layout_values", "visual_values", "frame_index", "observation_index"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from token_ids")

    @property
    def num_observations(self) -> int:
        return max(self.observation_index) + 1

    def frame_marker_positions(self) -> list[int]:
        """Position of [FRAME_k] for each observation k, in order."""
        positions = {}
        for pos, (tok_type, obs) in enumerate(zip(self.token_types, self.observation_index)):
            if obs >= 0 and obs not in positions and tok_type == TYPE_SPECIAL:
                positions[obs] = pos
        return [positions[k] for k in sorted(positions)]


def subsample_indices(count: int, cap: int) -> list[int]:
    """Evenly spaced indices including first and last when count > cap."""
    if count <= cap:
        return list(range(count))
    if cap == 1:
        return [0]
    return [round(i * (count - 1) / (cap - 1)) for i in range(cap)]


def kept_observations(instance, config: GatherModelConfig) -> list:
    """The (possibly subsampled) frame-ordered observations the sequence encodes."""
    observations = sorted(instance.observations, key=lambda o: o.frame)
    if not observations:
        raise ValueError("instance has no observations")
    return [observations[i] for i in subsample_indices(len(observations), config.max_observations)]


def build_sequence(instance, config: GatherModelConfig, vocab: Vocabulary | None = None) -> GatherSequence:
    """Lay out one instance as [BOS] ([FRAME_k] [BOX] chars [VIS])* [EOS]."""
    vocab = vocab or config.build_vocab()
    zeros4 = (0.0, 0.0, 0.0, 0.0)
    zerosv = [0.0] * config.visual_dim

    token_ids = [vocab.bos_id]
    token_types = [TYPE_SPECIAL]
    layout = [zeros4]
    visual = [zerosv]
    frames = [0]
    obs_index = [-1]
    for k, obs in enumerate(kept_observations(instance, config)):
        text_ids = vocab.encode_text(obs.ocr_text[: config.max_text_len * 2])
        token_ids += [vocab.frame_marker_id(k), vocab.box_id] + text_ids + [vocab.vis_id]
        token_types += [TYPE_SPECIAL, TYPE_LAYOUT] + [TYPE_TEXT] * len(text_ids) + [TYPE_VISUAL]
        layout += [zeros4, (obs.box.cx, obs.box.cy, obs.box.w, obs.box.h)]
        layout += [zeros4] * (len(text_ids) + 1)
        visual += [zerosv, zerosv] + [zerosv] * len(text_ids) + [list(obs.visual_feat)]
        frames += [obs.frame] * (3 + len(text_ids))
        obs_index += [k] * (3 + len(text_ids))
    token_ids.append(vocab.eos_id)
    token_types.append(TYPE_SPECIAL)
    layout.append(zeros4)
    visual.append(zerosv)
    frames.append(0)
    obs_index.append(-1)
    return GatherSequence(
        token_ids=token_ids,
        token_types=token_types,
        layout_values=layout,
        visual_values=visual,
        frame_index=frames,
        observation_index=obs_index,
    )


@dataclass
class GatherOutput:
    """Per-decode-step vocabulary logits and one aux logit per observation."""

    recognition_logits: torch.Tensor
    aux_logits: torch.Tensor


class GatherModel(nn.Module):
    def __init__(self, config: GatherModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.vocab = config.build_vocab()
        width = config.width
        self.token_embed = nn.Embedding(len(self.vocab), width)
        self.type_embed = nn.Embedding(len(TYPE_IDS), width)
        self.pos_embed = nn.Embedding(config.max_sequence_len, width)
        self.frame_embed = nn.Embedding(config.max_frame_index, width)
        self.obs_embed = nn.Embedding(config.max_observations + 1, width)
        self.offset_embed = nn.Embedding(config.max_text_len * 2, width)
        self.layout_proj = nn.Linear(4, width)
        self.visual_proj = nn.Linear(config.visual_dim, width)
        self.encoder = nn.ModuleList(EncoderLayer(width, config.heads) for _ in range(config.encoder_layers))
        self.encoder_norm = nn.LayerNorm(width)
        self.target_pos_embed = nn.Embedding(config.max_text_len + 2, width)
        self.decoder = nn.ModuleList(DecoderLayer(width, config.heads) for _ in range(config.decoder_layers))
        self.decoder_norm = nn.LayerNorm(width)
        self.lm_head = nn.Linear(width, len(self.vocab))
        self.aux_head = nn.Linear(width, 1)

    def encode(self, batch: "GatherBatch") -> torch.Tensor:
        positions = torch.arange(batch.token_ids.shape[1], device=batch.token_ids.device)
        x = (
            self.token_embed(batch.token_ids)
            + self.type_embed(batch.token_types)
            + self.pos_embed(positions)[None]
            + self.frame_embed(batch.frame_index.clamp(0, self.config.max_frame_index - 1))
            + self.obs_embed(batch.observation_index + 1)
            + self.offset_embed(batch.char_offset.clamp(0, self.config.max_text_len * 2 - 1))
        )
        layout_mask = (batch.token_types == TYPE_IDS[TYPE_LAYOUT]).unsqueeze(-1)
        visual_mask = (batch.token_types == TYPE_IDS[TYPE_VISUAL]).unsqueeze(-1)
        x = x + self.layout_proj(batch.layout_values) * layout_mask
        x = x + self.visual_proj(batch.visual_values) * visual_mask
        for layer in self.encoder:
            x = layer(x, key_padding_mask=batch.padding_mask)
        return self.encoder_norm(x)

    def decode(self, memory: torch.Tensor, memory_padding: torch.Tensor, target_prefix: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(target_prefix.shape[1], device=target_prefix.device)
        y = self.token_embed(target_prefix) + self.target_pos_embed(positions)[None]
        for layer in self.decoder:
            y = layer(y, memory, memory_padding_mask=memory_padding)
        return self.lm_head(self.decoder_norm(y))

    def aux_scores(self, memory: torch.Tensor, batch: "GatherBatch") -> torch.Tensor:
        """One logit per observation, read at its frame-marker position."""
        gathered = memory.gather(
            1, batch.marker_positions.unsqueeze(-1).expand(-1, -1, memory.shape[-1])
        )
        return self.aux_head(gathered).squeeze(-1)

    def forward(self, batch: "GatherBatch") -> tuple[torch.Tensor, torch.Tensor]:
        memory = self.encode(batch)
        logits = self.decode(memory, batch.padding_mask, batch.target_in)
        return logits, self.aux_scores(memory, batch)


@dataclass
class GatherBatch:
    token_ids: torch.Tensor
    token_types: torch.Tensor
    layout_values: torch.Tensor
    visual_values: torch.Tensor
    frame_index: torch.Tensor
    observation_index: torch.Tensor
    char_offset: torch.Tensor
    padding_mask: torch.Tensor
    marker_positions: torch.Tensor
    marker_mask: torch.Tensor
    target_in: torch.Tensor
    target_out: torch.Tensor
    target_mask: torch.Tensor
    aux_targets: torch.Tensor


def _char_offsets(seq: GatherSequence) -> list[int]:
    """Index of each text token within its observation's OCR string.

    Derived from the sequence layout; gives the decoder a direct handle on
    "character t of some observation" across all sightings.
    """
    offsets = []
    run = 0
    for tok_type in seq.token_types:
        if tok_type == TYPE_TEXT:
            offsets.append(run)
            run += 1
        else:
            offsets.append(0)
            run = 0
    return offsets


def collate_sequences(
    sequences: list[GatherSequence],
    targets: list[list[int]],
    aux_targets: list[list[int]],
    vocab: Vocabulary,
    dtype: torch.dtype = torch.float32,
) -> GatherBatch:
    """Pad sequences, teacher-forcing targets, and aux targets into tensors.

    `targets` holds character ids without [BOS]/[EOS]; the decoder input is
    [BOS] + target and the label sequence is target + [EOS].
    """
    batch = len(sequences)
    seq_len = max(len(s.token_ids) for s in sequences)
    num_obs = max(s.num_observations for s in sequences)
    tgt_len = max(len(t) for t in targets) + 1

    token_ids = torch.full((batch, seq_len), vocab.pad_id, dtype=torch.long)
    token_types = torch.zeros(batch, seq_len, dtype=torch.long)
    layout = torch.zeros(batch, seq_len, 4, dtype=dtype)
    visual_dim = len(sequences[0].visual_values[0])
    visual = torch.zeros(batch, seq_len, visual_dim, dtype=dtype)
    frames = torch.zeros(batch, seq_len, dtype=torch.long)
    obs_index = torch.full((batch, seq_len), -1, dtype=torch.long)
    offsets = torch.zeros(batch, seq_len, dtype=torch.long)
    padding = torch.ones(batch, seq_len, dtype=torch.bool)
    markers = torch.zeros(batch, num_obs, dtype=torch.long)
    marker_mask = torch.zeros(batch, num_obs, dtype=torch.bool)
    target_in = torch.full((batch, tgt_len), vocab.pad_id, dtype=torch.long)
    target_out = torch.full((batch, tgt_len), vocab.pad_id, dtype=torch.long)
    target_mask = torch.zeros(batch, tgt_len, dtype=torch.bool)
    aux = torch.zeros(batch, num_obs, dtype=dtype)

    for i, (seq, tgt, aux_t) in enumerate(zip(sequences, targets, aux_targets)):
        n = len(seq.token_ids)
        token_ids[i, :n] = torch.tensor(seq.token_ids, dtype=torch.long)
        token_types[i, :n] = torch.tensor([TYPE_IDS[t] for t in seq.token_types], dtype=torch.long)
        layout[i, :n] = torch.tensor(seq.layout_values, dtype=dtype)
        visual[i, :n] = torch.tensor(seq.visual_values, dtype=dtype)
        frames[i, :n] = torch.tensor(seq.frame_index, dtype=torch.long)
        obs_index[i, :n] = torch.tensor(seq.observation_index, dtype=torch.long)
        offsets[i, :n] = torch.tensor(_char_offsets(seq), dtype=torch.long)
        padding[i, :n] = False
        positions = seq.frame_marker_positions()
        markers[i, : len(positions)] = torch.tensor(positions, dtype=torch.long)
        marker_mask[i, : len(positions)] = True
        aux[i, : len(aux_t)] = torch.tensor(aux_t, dtype=dtype)
        target_in[i, 0] = vocab.bos_id
        target_in[i, 1 : len(tgt) + 1] = torch.tensor(tgt, dtype=torch.long)
        target_out[i, : len(tgt)] = torch.tensor(tgt, dtype=torch.long)
        target_out[i, len(tgt)] = vocab.eos_id
        target_mask[i, : len(tgt) + 1] = True
    return GatherBatch(
        token_ids=token_ids,
        token_types=token_types,
        layout_values=layout,
        visual_values=visual,
        frame_index=frames,
        observation_index=obs_index,
        char_offset=offsets,
        padding_mask=padding,
        marker_positions=markers,
        marker_mask=marker_mask,
        target_in=target_in,
        target_out=target_out,
        target_mask=target_mask,
        aux_targets=aux,
    )


def gather_forward(model: GatherModel, seq: GatherSequence, target_prefix: str) -> GatherOutput:
    """Single-instance forward pass under teacher forcing."""
    vocab = model.vocab
    for tok in seq.token_ids:
        if tok >= len(vocab):
            raise ValueError(f"token id {tok} outside model vocabulary")
    target = vocab.encode_text(target_prefix)
    batch = collate_sequences([seq], [target], [[0] * seq.num_observations], vocab)
    logits, aux_logits = model(batch)
    return GatherOutput(recognition_logits=logits[0], aux_logits=aux_logits[0])


def aux_targets_for(observations, gt_text: str) -> list[int]:
    """1 where an observation's OCR string equals the target exactly."""
    return [int(o.ocr_text == gt_text) for o in observations]


def gather_loss(
    output: GatherOutput,
    gt_text: str,
    aux_targets: list[int],
    aux_weight: float,
    vocab: Vocabulary,
) -> torch.Tensor:
    """Mean per-step recognition cross-entropy plus `aux_weight` times the
    summed per-observation binary cross-entropy of the alignment head."""
    if aux_weight < 0:
        raise ValueError(f"aux_weight must be >= 0, got {aux_weight}")
    target = torch.tensor(vocab.encode_text(gt_text) + [vocab.eos_id], dtype=torch.long)
    logits = output.recognition_logits
    if logits.shape[0] != target.shape[0]:
        raise ValueError(f"expected {target.shape[0]} decode steps, got {logits.shape[0]}")
    rec = F.cross_entropy(logits, target, reduction="mean")
    if len(aux_targets) != output.aux_logits.shape[0]:
        raise ValueError("one aux target per observation required")
    aux = F.binary_cross_entropy_with_logits(
        output.aux_logits,
        torch.tensor(aux_targets, dtype=logits.dtype),
        reduction="sum",
    )
    return rec + aux_weight * aux


def batched_gather_loss(
    logits: torch.Tensor,
    aux_logits: torch.Tensor,
    batch: GatherBatch,
    aux_weight: float,
    vocab: Vocabulary,
) -> torch.Tensor:
    """Batch mean of the per-instance objective used for training."""
    ce = F.cross_entropy(
        logits.transpose(1, 2), batch.target_out, reduction="none"
    ) * batch.target_mask
    rec = ce.sum(dim=1) / batch.target_mask.sum(dim=1)
    bce = F.binary_cross_entropy_with_logits(
        aux_logits, batch.aux_targets, reduction="none"
    ) * batch.marker_mask
    return (rec + aux_weight * bce.sum(dim=1)).mean()


@torch.no_grad()
def decode_canonical(model: GatherModel, instance, config: GatherModelConfig | None = None) -> str:
    """Greedy decoding of the canonical transcription for one instance."""
    return decode_canonical_batch(model, [instance], config)[0]


@torch.no_grad()
def decode_canonical_batch(model: GatherModel, instances, config: GatherModelConfig | None = None) -> list[str]:
    config = config or model.config
    vocab = model.vocab
    sequences = [build_sequence(inst, config, vocab) for inst in instances]
    batch = collate_sequences(
        sequences, [[] for _ in sequences], [[0] * s.num_observations for s in sequences], vocab
    )
    memory = model.encode(batch)
    n = len(instances)
    prefix = torch.full((n, 1), vocab.bos_id, dtype=torch.long)
    finished = torch.zeros(n, dtype=torch.bool)
    outputs: list[list[int]] = [[] for _ in range(n)]
    for _ in range(config.max_text_len + 1):
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


def heuristic_random(instance, rng: random.Random) -> str:
    """Uniformly pick one observation's OCR string."""
    observations = sorted(instance.observations, key=lambda o: o.frame)
    if not observations:
        raise ValueError("instance has no observations")
    return observations[rng.randrange(len(observations))].ocr_text


def heuristic_max(instance) -> str:
    """Most frequent OCR string; ties broken by earliest frame."""
    observations = sorted(instance.observations, key=lambda o: o.frame)
    if not observations:
        raise ValueError("instance has no observations")
    counts: dict[str, int] = {}
    first_frame: dict[str, int] = {}
    for obs in observations:
        counts[obs.ocr_text] = counts.get(obs.ocr_text, 0) + 1
        first_frame.setdefault(obs.ocr_text, obs.frame)
    return min(counts, key=lambda t: (-counts[t], first_frame[t]))
