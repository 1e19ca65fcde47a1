"""Grouping per-frame detections into tracks, and scoring the grouping.

The tracker is deliberately simple: greedy descending-IoU matching between
each incoming frame and the tails of open tracks. Scoring follows the
CLEAR-MOT convention (MOTA from misses, false positives and identity
switches) plus IDF1 from a global identity assignment.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .corpus import BBox, EntityObservation, TextInstance
from .kvconfig import ConfigError


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 1.0 iff the boxes coincide, 0.0 iff disjoint.

    Areas come from the same corner-derived extents as the intersection, so
    coinciding boxes score exactly 1.0.
    """
    ax0, ax1 = a.cx - a.w / 2, a.cx + a.w / 2
    ay0, ay1 = a.cy - a.h / 2, a.cy + a.h / 2
    bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
    by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
    ix = min(ax1, bx1) - max(ax0, bx0)
    iy = min(ay1, by1) - max(ay0, by0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


@dataclass
class AssociationConfig:
    iou_threshold: float = 0.5
    max_frame_gap: int = 1

    def validate(self) -> None:
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.max_frame_gap < 0:
            raise ConfigError(f"max_frame_gap must be >= 0, got {self.max_frame_gap}")


@dataclass
class Track:
    track_id: int
    observations: list[EntityObservation]

    def __post_init__(self):
        if not self.observations:
            raise ValueError("a track needs at least one observation")
        frames = [o.frame for o in self.observations]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("track frames must be strictly increasing")

    @property
    def first_frame(self) -> int:
        return self.observations[0].frame

    @property
    def last_frame(self) -> int:
        return self.observations[-1].frame

    def trajectory(self) -> list[tuple[int, float, float]]:
        return [(o.frame, o.box.cx, o.box.cy) for o in self.observations]


def associate(
    entities: Mapping[int, Sequence[EntityObservation]],
    config: AssociationConfig | None = None,
) -> list[Track]:
    """Greedy frame-to-frame association of detections into tracks.

    Within each frame, (track, detection) pairs with IoU >= threshold are
    taken in descending IoU order, ties broken by lower (track_id, index).
    Unmatched detections open new tracks. Every input observation lands in
    exactly one track.
    """
    config = config or AssociationConfig()
    config.validate()
    tracks: list[list[EntityObservation]] = []
    for frame in sorted(entities):
        detections = list(entities[frame])
        open_ids = [
            tid for tid, obs in enumerate(tracks)
            if 1 <= frame - obs[-1].frame <= 1 + config.max_frame_gap
        ]
        candidates = []
        for tid in open_ids:
            for d_idx, det in enumerate(detections):
                score = iou(tracks[tid][-1].box, det.box)
                if score >= config.iou_threshold:
                    candidates.append((-score, tid, d_idx))
        candidates.sort()
        used_tracks: set[int] = set()
        used_dets: set[int] = set()
        for _, tid, d_idx in candidates:
            if tid in used_tracks or d_idx in used_dets:
                continue
            tracks[tid].append(detections[d_idx])
            used_tracks.add(tid)
            used_dets.add(d_idx)
        for d_idx, det in enumerate(detections):
            if d_idx not in used_dets:
                tracks.append([det])
    return [Track(track_id=tid, observations=obs) for tid, obs in enumerate(tracks)]


@dataclass
class TrackingReport:
    mota: float
    idf1: float
    false_negatives: int
    false_positives: int
    id_switches: int
    gt_count: int

    def to_dict(self) -> dict:
        return {
            "mota": self.mota,
            "idf1": self.idf1,
            "false_negatives": self.false_negatives,
            "false_positives": self.false_positives,
            "id_switches": self.id_switches,
            "gt_count": self.gt_count,
        }


def _boxes_by_frame(groups: Sequence, id_attr: str) -> dict[int, dict[int, BBox]]:
    frames: dict[int, dict[int, BBox]] = defaultdict(dict)
    for group in groups:
        gid = getattr(group, id_attr)
        for obs in group.observations:
            frames[obs.frame][gid] = obs.box
    return frames


def score_tracking(
    pred: Sequence[Track],
    gt: Sequence[TextInstance],
    config: AssociationConfig | None = None,
) -> TrackingReport:
    """CLEAR-MOT scoring of predicted tracks against ground-truth instances.

    Matches persist across frames while they stay above the IoU threshold;
    remaining observations are matched greedily by descending IoU. An
    identity switch is counted whenever a ground-truth instance is matched
    to a different track than its most recent one.
    """
    config = config or AssociationConfig()
    config.validate()
    gt_frames = _boxes_by_frame(gt, "id")
    pred_frames = _boxes_by_frame(pred, "track_id")
    gt_total = sum(len(v) for v in gt_frames.values())
    pred_total = sum(len(v) for v in pred_frames.values())
    if gt_total == 0:
        raise ValueError("ground truth has no observations; MOTA is undefined")

    fn = fp = idsw = 0
    last_match: dict[int, int] = {}
    live: dict[int, int] = {}
    overlap: dict[tuple[int, int], int] = defaultdict(int)
    all_frames = sorted(set(gt_frames) | set(pred_frames))
    for frame in all_frames:
        gts = gt_frames.get(frame, {})
        preds = pred_frames.get(frame, {})
        for gid, gbox in gts.items():
            for pid, pbox in preds.items():
                if iou(gbox, pbox) >= config.iou_threshold:
                    overlap[(gid, pid)] += 1

        matched_gt: dict[int, int] = {}
        used_pred: set[int] = set()
        for gid, pid in list(live.items()):
            if gid in gts and pid in preds and iou(gts[gid], preds[pid]) >= config.iou_threshold:
                matched_gt[gid] = pid
                used_pred.add(pid)
        candidates = []
        for gid, gbox in gts.items():
            if gid in matched_gt:
                continue
            for pid, pbox in preds.items():
                if pid in used_pred:
                    continue
                score = iou(gbox, pbox)
                if score >= config.iou_threshold:
                    candidates.append((-score, gid, pid))
        candidates.sort()
        for _, gid, pid in candidates:
            if gid in matched_gt or pid in used_pred:
                continue
            matched_gt[gid] = pid
            used_pred.add(pid)

        for gid, pid in matched_gt.items():
            if gid in last_match and last_match[gid] != pid:
                idsw += 1
            last_match[gid] = pid
        live = {gid: pid for gid, pid in matched_gt.items()}
        fn += len(gts) - len(matched_gt)
        fp += len(preds) - len(used_pred)

    idtp = _identity_true_positives(overlap)
    denom = gt_total + pred_total
    idf1 = 2 * idtp / denom if denom else 0.0
    mota = 1.0 - (fn + fp + idsw) / gt_total
    return TrackingReport(
        mota=mota,
        idf1=idf1,
        false_negatives=fn,
        false_positives=fp,
        id_switches=idsw,
        gt_count=gt_total,
    )


def _identity_true_positives(overlap: Mapping[tuple[int, int], int]) -> int:
    """Best one-to-one identity assignment by total frame overlap."""
    if not overlap:
        return 0
    gt_ids = sorted({g for g, _ in overlap})
    pred_ids = sorted({p for _, p in overlap})
    cost = np.zeros((len(gt_ids), len(pred_ids)))
    for (g, p), count in overlap.items():
        cost[gt_ids.index(g), pred_ids.index(p)] = -count
    rows, cols = linear_sum_assignment(cost)
    return int(-cost[rows, cols].sum())


def aggregate_reports(reports: Sequence[TrackingReport]) -> TrackingReport:
    """Pool per-sample counts into one corpus-level report.

    IDF1 from pooled counts is not available (the assignment is per
    sample), so the pooled IDF1 is the observation-weighted mean.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    fn = sum(r.false_negatives for r in reports)
    fp = sum(r.false_positives for r in reports)
    idsw = sum(r.id_switches for r in reports)
    gt = sum(r.gt_count for r in reports)
    idf1 = sum(r.idf1 * r.gt_count for r in reports) / gt
    return TrackingReport(
        mota=1.0 - (fn + fp + idsw) / gt,
        idf1=idf1,
        false_negatives=fn,
        false_positives=fp,
        id_switches=idsw,
        gt_count=gt,
    )
