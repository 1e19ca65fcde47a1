"""Configuration, training loops, the two-stage pipeline, and ablations.

A run generates (or loads) a corpus, tracks the per-frame observations,
derives one textual representation per track (learned gathering, oracle,
or a heuristic), trains the tracing model on the QA pairs, and scores the
test split. `ablate` reruns the pipeline over the five standard flag
combinations and tabulates accuracy and ANLS.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from . import association, corpus as corpus_mod, gather as gather_mod, metrics, trace as trace_mod
from .association import AssociationConfig, Track, TrackingReport
from .corpus import CorpusConfig, VideoSample
from .gather import GatherModel, GatherModelConfig
from .kvconfig import ConfigError, read_kv_file, write_kv_file
from .metrics import EvalRecord, TokenLengthReport
from .trace import TraceModel, TraceModelConfig
from .vocab import UNREADABLE

logger = logging.getLogger(__name__)

GATHER_SOURCES = ("learned", "oracle", "random", "max")
ABLATION_ROWS = (
    ("a", "random", "full"),
    ("b", "max", "full"),
    ("c", "learned", "off"),
    ("d", "learned", "spatial_only"),
    ("e", "learned", "full"),
)


class NumericalError(RuntimeError):
    """Training hit a non-finite loss; message names the offending batch."""


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**31 - 1)


def _set_threads() -> None:
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@dataclass
class OptimizerSettings:
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_fraction: float = 0.08
    batch_size: int = 128
    gather_epochs: int = 8
    trace_epochs: int = 16
    grad_clip: float = 1.0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.gather_epochs < 0 or self.trace_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    gather: GatherModelConfig = field(default_factory=GatherModelConfig)
    trace: TraceModelConfig = field(default_factory=TraceModelConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    num_videos: int = 2000
    seed: int = 0
    gather_source: str = "learned"
    trace_bias: str = "full"

    def validate(self) -> None:
        if self.gather_source not in GATHER_SOURCES:
            raise ConfigError(f"gather_source must be one of {GATHER_SOURCES}, got {self.gather_source!r}")
        if self.trace_bias not in trace_mod.BIAS_MODES:
            raise ConfigError(f"trace_bias must be one of {trace_mod.BIAS_MODES}, got {self.trace_bias!r}")
        if self.num_videos < 3:
            raise ConfigError("num_videos must be >= 3 (train/val/test split)")
        self.corpus.validate()
        self.gather.validate()
        self.trace.validate()
        self.optimizer.validate()
        self.association.validate()
        if not set(self.corpus.alphabet) <= set(self.gather.charset):
            raise ConfigError("corpus alphabet is not covered by the model charset")
        if self.gather.visual_dim != self.corpus.visual_dim:
            raise ConfigError("gather.visual_dim must match corpus.visual_dim")
        if self.gather.max_text_len < self.corpus.text_len_max:
            raise ConfigError("gather.max_text_len must cover corpus text lengths")

    def normalized(self) -> "RunConfig":
        """Copy with derived fields synced to the ablation flags."""
        trace_cfg = replace(self.trace, bias_mode=self.trace_bias, frame_markers=self.gather.max_observations)
        return replace(self, trace=trace_cfg)

    def config_hash(self) -> str:
        """Hash of everything except the ablation flags, so ablation rows
        remain mutually comparable."""
        trace_dict = self.trace.to_dict()
        trace_dict.pop("bias_mode")
        payload = {
            "corpus": {k: getattr(self.corpus, k) for k in self.corpus.__dataclass_fields__},
            "gather": self.gather.to_dict(),
            "trace": trace_dict,
            "optimizer": self.optimizer.to_dict(),
            "association": {"iou_threshold": self.association.iou_threshold,
                            "max_frame_gap": self.association.max_frame_gap},
            "num_videos": self.num_videos,
            "seed": self.seed,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def load_run_config(path: str | Path) -> RunConfig:
    """Flat key-value run config with dotted section prefixes."""
    from .kvconfig import apply_kv

    raw = read_kv_file(path)
    config = RunConfig()
    sections = {
        "corpus.": config.corpus,
        "gather.": config.gather,
        "trace.": config.trace,
        "optimizer.": config.optimizer,
        "association.": config.association,
    }
    run_keys = {"seed": int, "num_videos": int, "gather_source": str, "trace_bias": str}
    for key in raw:
        if key.startswith("run."):
            name = key[4:]
            if name not in run_keys:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(config, name, run_keys[name](raw[key]))
        else:
            prefix = next((p for p in sections if key.startswith(p)), None)
            if prefix is None:
                raise ConfigError(f"unknown config key {key!r}")
            apply_kv(sections[prefix], {key: raw[key]}, prefix)
    config = config.normalized()
    config.validate()
    return config


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def fit(
    model: torch.nn.Module,
    batches: list,
    loss_fn,
    settings: OptimizerSettings,
    epochs: int,
    seed: int,
    val_batches: list | None = None,
    val_score_fn=None,
    tag: str = "train",
) -> list[dict]:
    """Fixed-epoch loop with seeded shuffling and per-epoch validation.

    The best-validation weights are restored into the model at the end
    (by `val_score_fn` -- (correct, total) per batch, higher is better --
    when given, otherwise by validation loss); zero epochs leaves the
    model untouched. Raises NumericalError on a non-finite loss.
    """
    _set_threads()
    history: list[dict] = []
    if epochs == 0 or not batches:
        return history
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay
    )
    total_steps = epochs * len(batches)
    warmup = max(1, int(settings.warmup_fraction * total_steps))

    def lr_lambda(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_lambda)
    rng = random.Random(seed)
    best_key = -math.inf
    best_state: dict | None = None
    for epoch in range(epochs):
        model.train()
        order = list(range(len(batches)))
        rng.shuffle(order)
        train_loss = 0.0
        for bi in order:
            loss = loss_fn(model, batches[bi])
            if not torch.isfinite(loss):
                raise NumericalError(f"{tag}: non-finite loss at epoch {epoch}, batch {bi}")
            optimizer.zero_grad()
            loss.backward()
            if settings.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), settings.grad_clip)
            optimizer.step()
            scheduler.step()
            train_loss += loss.item()
        train_loss /= len(batches)
        model.eval()
        val_loss = train_loss
        val_acc = None
        if val_batches:
            with torch.no_grad():
                val_loss = sum(loss_fn(model, b).item() for b in val_batches) / len(val_batches)
                if val_score_fn is not None:
                    correct = total = 0
                    for b in val_batches:
                        c, t = val_score_fn(model, b)
                        correct += c
                        total += t
                    val_acc = correct / max(1, total)
        key = val_acc if val_acc is not None else -val_loss
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_acc": val_acc}
        )
        logger.info(
            "%s epoch %d/%d train %.4f val %.4f%s",
            tag, epoch + 1, epochs, train_loss, val_loss,
            "" if val_acc is None else f" acc {val_acc:.4f}",
        )
        if key > best_key:
            best_key = key
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    return history


def sequence_accuracy(logits: torch.Tensor, target_out: torch.Tensor, target_mask: torch.Tensor) -> tuple[int, int]:
    """Count teacher-forced all-step-correct sequences in a batch."""
    pred = logits.argmax(dim=-1)
    ok = (pred == target_out) | ~target_mask
    seq_ok = ok.all(dim=1)
    return int(seq_ok.sum().item()), int(seq_ok.shape[0])


# ---------------------------------------------------------------------------
# Pipeline context: corpus, tracks, gathered texts
# ---------------------------------------------------------------------------


def split_samples(samples: list[VideoSample]) -> dict[str, list[VideoSample]]:
    """Deterministic 80/10/10 split by corpus position."""
    n = len(samples)
    n_test = max(1, n // 10)
    n_val = max(1, n // 10)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ConfigError(f"corpus of {n} samples is too small to split")
    return {
        "train": samples[:n_train],
        "val": samples[n_train : n_train + n_val],
        "test": samples[n_train + n_val :],
    }


def track_canonical(track: Track, id_to_text: dict[int, str]) -> str:
    """Supervision for a track: the canonical text of its majority instance."""
    counts: dict[int, int] = {}
    for obs in track.observations:
        counts[obs.instance_id_gt] = counts.get(obs.instance_id_gt, 0) + 1
    majority = min(counts, key=lambda i: (-counts[i], i))
    return id_to_text[majority]


class PipelineContext:
    """Shared state across pipeline stages and ablation rows.

    All caching is transparent with respect to determinism: a cached
    artifact is identical to the one a fresh run with the same config and
    seed would produce.
    """

    def __init__(self, config: RunConfig, samples: list[VideoSample] | None = None):
        config = config.normalized()
        config.validate()
        self.config = config
        t0 = time.perf_counter()
        self.samples = samples if samples is not None else corpus_mod.generate_corpus(
            config.corpus, config.num_videos
        )
        self.corpus_seconds = time.perf_counter() - t0
        self.splits = split_samples(self.samples)
        self.split_of = {}
        for name, part in self.splits.items():
            for sample in part:
                self.split_of[sample.id] = name

        t0 = time.perf_counter()
        self.tracks: dict[int, list[Track]] = {}
        self.canonicals: dict[int, list[str]] = {}
        reports = []
        for sample in self.samples:
            tracks = association.associate(sample.entities_by_frame(), config.association)
            ordered = corpus_mod.appearance_order(tracks)
            id_to_text = {inst.id: inst.canonical_text for inst in sample.instances}
            self.tracks[sample.id] = ordered
            self.canonicals[sample.id] = [track_canonical(t, id_to_text) for t in ordered]
            reports.append(association.score_tracking(tracks, sample.instances, config.association))
        self.tracking = association.aggregate_reports(reports)
        self.track_seconds = time.perf_counter() - t0

        self._gather_model: GatherModel | None = None
        self._gather_history: list[dict] = []
        self._texts: dict[str, dict[int, list[str]]] = {}
        self._exact: dict[str, float] = {}
        self.gather_seconds = 0.0

    # -- gathering -----------------------------------------------------

    def _gather_examples(self, split: str):
        gcfg = self.config.gather
        vocab = gcfg.build_vocab()
        sequences, targets, aux = [], [], []
        for sample in self.splits[split]:
            for track, canonical in zip(self.tracks[sample.id], self.canonicals[sample.id]):
                sequences.append(gather_mod.build_sequence(track, gcfg, vocab))
                targets.append(vocab.encode_text(canonical))
                kept = gather_mod.kept_observations(track, gcfg)
                aux.append(gather_mod.aux_targets_for(kept, canonical))
        return sequences, targets, aux

    def _gather_batches(self, split: str, vocab, shuffle_seed: int | None = None):
        sequences, targets, aux = self._gather_examples(split)
        order = list(range(len(sequences)))
        if shuffle_seed is not None:
            random.Random(shuffle_seed).shuffle(order)
        size = self.config.optimizer.batch_size
        batches = []
        for start in range(0, len(order), size):
            idx = order[start : start + size]
            batches.append(
                gather_mod.collate_sequences(
                    [sequences[i] for i in idx], [targets[i] for i in idx], [aux[i] for i in idx], vocab
                )
            )
        return batches

    def gather_model(self) -> GatherModel:
        if self._gather_model is not None:
            return self._gather_model
        t0 = time.perf_counter()
        config = self.config
        seed = derive_seed(config.seed, "gather")
        torch.manual_seed(seed)
        model = GatherModel(config.gather)
        vocab = model.vocab
        train_batches = self._gather_batches("train", vocab, shuffle_seed=seed + 1)
        val_batches = self._gather_batches("val", vocab)
        aux_weight = config.gather.aux_weight

        def loss_fn(m, batch):
            logits, aux_logits = m(batch)
            return gather_mod.batched_gather_loss(logits, aux_logits, batch, aux_weight, vocab)

        def val_score_fn(m, batch):
            logits, _ = m(batch)
            return sequence_accuracy(logits, batch.target_out, batch.target_mask)

        self._gather_history = fit(
            model,
            train_batches,
            loss_fn,
            config.optimizer,
            config.optimizer.gather_epochs,
            seed=seed + 2,
            val_batches=val_batches,
            val_score_fn=val_score_fn,
            tag="gather",
        )
        model.eval()
        self._gather_model = model
        self.gather_seconds = time.perf_counter() - t0
        return model

    def set_gather_model(self, model: GatherModel) -> None:
        self._gather_model = model.eval()

    def texts(self, source: str) -> dict[int, list[str]]:
        """Per-sample instance texts (track appearance order) for a source."""
        if source in self._texts:
            return self._texts[source]
        texts: dict[int, list[str]] = {}
        if source == "oracle":
            texts = {sid: list(canon) for sid, canon in self.canonicals.items()}
        elif source == "max":
            texts = {
                sid: [gather_mod.heuristic_max(t) for t in tracks]
                for sid, tracks in self.tracks.items()
            }
        elif source == "random":
            rng = random.Random(derive_seed(self.config.seed, "heuristic-random"))
            for sample in self.samples:
                texts[sample.id] = [
                    gather_mod.heuristic_random(t, rng) for t in self.tracks[sample.id]
                ]
        elif source == "learned":
            model = self.gather_model()
            flat: list[tuple[int, int]] = []
            all_tracks: list[Track] = []
            for sample in self.samples:
                for slot, track in enumerate(self.tracks[sample.id]):
                    flat.append((sample.id, slot))
                    all_tracks.append(track)
                texts[sample.id] = [""] * len(self.tracks[sample.id])
            chunk = 128
            for start in range(0, len(all_tracks), chunk):
                decoded = gather_mod.decode_canonical_batch(model, all_tracks[start : start + chunk])
                for (sid, slot), text in zip(flat[start : start + chunk], decoded):
                    texts[sid][slot] = text
        else:
            raise ConfigError(f"unknown gather source {source!r}")
        self._texts[source] = texts
        return texts

    def gather_exact_match(self, source: str) -> float:
        """Exact-match rate of the source's texts against the canonical
        transcriptions, over test-split tracks."""
        if source in self._exact:
            return self._exact[source]
        texts = self.texts(source)
        hits = total = 0
        for sample in self.splits["test"]:
            for slot, canonical in enumerate(self.canonicals[sample.id]):
                total += 1
                hits += int(texts[sample.id][slot] == canonical)
        rate = hits / total if total else 0.0
        self._exact[source] = rate
        return rate

    def trace_items(self, source: str, sample: VideoSample) -> list[tuple[str, list]]:
        """(text, trajectory) pairs presented to the tracing model."""
        texts = self.texts(source)
        items = []
        for slot, track in enumerate(self.tracks[sample.id]):
            text = texts[sample.id][slot] or UNREADABLE
            items.append((text.lower(), track.trajectory()))
        return items


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    accuracy: float
    anls: float
    per_template_accuracy: dict[str, float]
    per_template_counts: dict[str, int]
    spatial_accuracy: float
    gather_exact_match: float
    tracking: TrackingReport
    token_length: TokenLengthReport
    wall_clock: dict[str, float]
    config_hash: str
    gather_source: str
    trace_bias: str
    num_questions: int

    def to_kv(self) -> dict[str, object]:
        out: dict[str, object] = {
            "config_hash": self.config_hash,
            "gather_source": self.gather_source,
            "trace_bias": self.trace_bias,
            "num_questions": self.num_questions,
            "accuracy": f"{self.accuracy:.4f}",
            "anls": f"{self.anls:.4f}",
            "spatial_accuracy": f"{self.spatial_accuracy:.4f}",
            "gather_exact_match": f"{self.gather_exact_match:.4f}",
        }
        for name in sorted(self.per_template_accuracy):
            out[f"template_accuracy.{name}"] = f"{self.per_template_accuracy[name]:.4f}"
            out[f"template_count.{name}"] = self.per_template_counts[name]
        for key, value in self.tracking.to_dict().items():
            out[f"tracking.{key}"] = f"{value:.4f}" if isinstance(value, float) else value
        for key, value in self.token_length.to_dict().items():
            out[f"token_length.{key}"] = f"{value:.4f}"
        for phase, seconds in self.wall_clock.items():
            out[f"wall_clock.{phase}"] = f"{seconds:.3f}"
        return out

    def comparable_kv(self) -> dict[str, object]:
        return {k: v for k, v in self.to_kv().items() if not k.startswith("wall_clock.")}


def write_report(report_kv: dict[str, object], path: str | Path) -> None:
    write_kv_file(path, report_kv)


def read_report(path: str | Path) -> dict[str, str]:
    return read_kv_file(path)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _trace_batches(context: PipelineContext, source: str, split: str, config: RunConfig,
                   shuffle_seed: int | None = None):
    tcfg = config.trace
    vocab = tcfg.build_vocab()
    inputs, targets = [], []
    answer_rng = random.Random(derive_seed(config.seed, "answers", split))
    for sample in context.splits[split]:
        items = context.trace_items(source, sample)
        for qa in sample.qa:
            inputs.append(trace_mod.build_encoder_input(qa.question, items, tcfg, vocab))
            answers = sorted(qa.answers)
            answer = answers[answer_rng.randrange(len(answers))] if len(answers) > 1 else answers[0]
            targets.append(vocab.encode_text(answer[: tcfg.max_answer_len]))
    order = list(range(len(inputs)))
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(order)
    size = config.optimizer.batch_size
    batches = []
    for start in range(0, len(order), size):
        idx = order[start : start + size]
        batches.append(
            trace_mod.collate_encoder_inputs(
                [inputs[i] for i in idx], [targets[i] for i in idx], tcfg, vocab
            )
        )
    return batches


def train_trace_model(context: PipelineContext, config: RunConfig) -> tuple[TraceModel, list[dict]]:
    seed = derive_seed(config.seed, "trace", config.gather_source, config.trace_bias)
    torch.manual_seed(seed)
    model = TraceModel(config.trace)
    train_batches = _trace_batches(context, config.gather_source, "train", config, shuffle_seed=seed + 1)
    val_batches = _trace_batches(context, config.gather_source, "val", config)
    multi_label = config.trace.multi_label
    vocab = model.vocab

    if multi_label:
        def loss_fn(m, batch):
            logits = m(batch)
            losses = []
            for i in range(logits.shape[0]):
                steps = int(batch.target_mask[i].sum().item())
                answer = vocab.decode_text(batch.target_out[i, : steps - 1].tolist())
                losses.append(trace_mod.multilabel_step_bce(logits[i], [answer], vocab).mean())
            return torch.stack(losses).mean()
    else:
        def loss_fn(m, batch):
            return trace_mod.batched_answer_ce(m(batch), batch)

    def val_score_fn(m, batch):
        return sequence_accuracy(m(batch), batch.target_out, batch.target_mask)

    history = fit(
        model,
        train_batches,
        loss_fn,
        config.optimizer,
        config.optimizer.trace_epochs,
        seed=seed + 2,
        val_batches=val_batches,
        val_score_fn=val_score_fn,
        tag=f"trace[{config.gather_source}/{config.trace_bias}]",
    )
    model.eval()
    return model, history


def evaluate_trace(
    context: PipelineContext, model: TraceModel, config: RunConfig, split: str = "test"
) -> tuple[list[EvalRecord], dict[str, list[float]], list[dict]]:
    """Greedy predictions for every question; returns eval records,
    per-template accuracy lists, and raw prediction rows."""
    records: list[EvalRecord] = []
    per_template: dict[str, list[float]] = {}
    rows: list[dict] = []
    pending: list[tuple[str, str, list[str], str]] = []
    items_batch: list = []
    for sample in context.splits[split]:
        items = context.trace_items(config.gather_source, sample)
        for qi, qa in enumerate(sample.qa):
            pending.append((f"{sample.id}:{qi}", qa.template, list(qa.answers), qa.question))
            items_batch.append((qa.question, items))
    chunk = 64
    for start in range(0, len(items_batch), chunk):
        predictions = trace_mod.generate_answer_batch(model, items_batch[start : start + chunk])
        for (qid, template, answers, question), pred in zip(pending[start : start + chunk], predictions):
            record = EvalRecord(question_id=qid, prediction=pred, references=answers)
            records.append(record)
            score = metrics.vqa_accuracy(record.prediction, record.references)
            per_template.setdefault(template, []).append(score)
            rows.append(
                {"question_id": qid, "question": question, "template": template,
                 "prediction": pred, "references": answers}
            )
    return records, per_template, rows


def run_pipeline(config: RunConfig, context: PipelineContext | None = None) -> RunReport:
    """Execute track -> gather (or heuristic) -> trace-train -> evaluate."""
    _set_threads()
    config = config.normalized()
    config.validate()
    if context is None:
        context = PipelineContext(config)
    wall = {"corpus": context.corpus_seconds, "track": context.track_seconds}

    t0 = time.perf_counter()
    exact = context.gather_exact_match(config.gather_source)
    wall["gather"] = (context.gather_seconds if config.gather_source == "learned" else 0.0) + (
        time.perf_counter() - t0
    )

    t0 = time.perf_counter()
    model, _ = train_trace_model(context, config)
    wall["trace"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    records, per_template, _ = evaluate_trace(context, model, config)
    scores = metrics.score_records(records)
    template_acc = {k: sum(v) / len(v) for k, v in per_template.items()}
    template_counts = {k: len(v) for k, v in per_template.items()}
    spatial_scores = [s for k, v in per_template.items() if k.startswith("spatial_") for s in v]
    spatial_acc = sum(spatial_scores) / len(spatial_scores) if spatial_scores else 0.0

    gather_predictions = {}
    texts = context.texts(config.gather_source)
    for sample in context.splits["test"]:
        for slot, text in enumerate(texts[sample.id]):
            gather_predictions[(sample.id, slot)] = text
    vocab = config.trace.build_vocab()
    token_report = metrics.token_length_report(context.splits["test"], vocab, gather_predictions)
    wall["eval"] = time.perf_counter() - t0

    return RunReport(
        accuracy=scores["accuracy"],
        anls=scores["anls"],
        per_template_accuracy=template_acc,
        per_template_counts=template_counts,
        spatial_accuracy=spatial_acc,
        gather_exact_match=exact,
        tracking=context.tracking,
        token_length=token_report,
        wall_clock=wall,
        config_hash=config.config_hash(),
        gather_source=config.gather_source,
        trace_bias=config.trace_bias,
        num_questions=len(records),
    )


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    rows: list[tuple[str, RunReport]]

    def table(self) -> str:
        lines = [
            f"{'row':<4} {'gather':<8} {'trace':<13} {'acc':>8} {'anls':>8}",
            "-" * 45,
        ]
        for label, report in self.rows:
            lines.append(
                f"{label:<4} {report.gather_source:<8} {report.trace_bias:<13} "
                f"{report.accuracy:>8.4f} {report.anls:>8.4f}"
            )
        return "\n".join(lines)

    def metric_table(self) -> list[tuple[str, str, str, str, str]]:
        return [
            (label, r.gather_source, r.trace_bias, f"{r.accuracy:.4f}", f"{r.anls:.4f}")
            for label, r in self.rows
        ]

    def report(self, label: str) -> RunReport:
        for row_label, report in self.rows:
            if row_label == label:
                return report
        raise KeyError(label)


def ablate(config: RunConfig, context: PipelineContext | None = None) -> AblationResult:
    """Run the five-row ablation (heuristic gathers with full bias, learned
    gather with the three bias modes) over one shared corpus."""
    config = config.normalized()
    config.validate()
    if context is None:
        context = PipelineContext(config)
    rows = []
    for label, source, bias in ABLATION_ROWS:
        row_config = replace(config, gather_source=source, trace_bias=bias).normalized()
        logger.info("ablation row %s: gather=%s bias=%s", label, source, bias)
        rows.append((label, run_pipeline(row_config, context)))
    return AblationResult(rows=rows)


def sweep_gather_aux_weight(
    config: RunConfig, values: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
) -> dict[float, float]:
    """Train the gathering model per aux-loss weight; returns exact-match
    rates on the test split."""
    results = {}
    for value in values:
        cfg = replace(config, gather=replace(config.gather, aux_weight=value)).normalized()
        context = PipelineContext(cfg)
        results[value] = context.gather_exact_match("learned")
    return results


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, kind: str, config_dict: dict, model: torch.nn.Module,
                    extra: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(
        {"kind": kind, "config": config_dict, "state_dict": model.state_dict(), "extra": extra or {}},
        tmp,
    )
    tmp.replace(path)


def load_gather_checkpoint(path: str | Path) -> GatherModel:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "gather":
        raise ConfigError(f"{path} is not a gathering checkpoint")
    model = GatherModel(GatherModelConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model.eval()


def load_trace_checkpoint(path: str | Path) -> tuple[TraceModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "trace":
        raise ConfigError(f"{path} is not a tracing checkpoint")
    model = TraceModel(TraceModelConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model.eval(), payload.get("extra", {})
