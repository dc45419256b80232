"""COCO-style average precision for the synthetic task."""

from __future__ import annotations

import numpy as np

from .boxes import batched_nms, decode_boxes, iou_matrix
from .config import DetectionConfig
from .model import ModelState, forward_image

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def detect(model: ModelState, scene, config: DetectionConfig, dpm_logits_hook=None):
    """Final detections ``(boxes, scores, classes)`` for one scene.

    Scores come from the ADM alone; the DPM only supplies the refined anchors.
    ``dpm_logits_hook`` lets tests tamper with the DPM logits to check they
    never reach the output.
    """
    out, _ = forward_image(model, scene.image, config)
    if dpm_logits_hook is not None:
        dpm_logits_hook(out["dpm_logits"])
    scores = 1.0 / (1.0 + np.exp(-out["adm_logits"]))  # (N, K)
    boxes = decode_boxes(out["refined"], out["adm_deltas"], config.image_size, 1.0)
    loc, cls = np.nonzero(scores > config.score_thresh)
    b, s = boxes[loc], scores[loc, cls]
    keep = batched_nms(b, s, cls, config.nms_iou)[:config.max_detections]
    return b[keep], s[keep], cls[keep]


def average_precision(scores, matched, num_gt: int) -> float:
    """101-point interpolated AP from per-detection TP flags."""
    if num_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(matched, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # monotone envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    return float(np.mean([precision[i] if i < len(precision) else 0.0 for i in idx]))


def _match(dets, gts, thr):
    """Greedy COCO matching inside one image and class; returns TP flags."""
    flags = np.zeros(len(dets), dtype=bool)
    if len(dets) == 0 or len(gts) == 0:
        return flags
    ious = iou_matrix(dets, gts)
    taken = np.zeros(len(gts), dtype=bool)
    for d in range(len(dets)):
        cand = np.where(taken, -1.0, ious[d])
        g = int(cand.argmax())
        if cand[g] >= thr:
            taken[g] = True
            flags[d] = True
    return flags


def evaluate_detections(detections, ground_truths, num_classes: int) -> dict:
    """AP metrics over scenes.

    ``detections[k]`` is ``(boxes, scores, classes)`` and ``ground_truths[k]``
    is ``(boxes, classes)`` for scene ``k``. Classes without any ground truth
    are left out of the mean.
    """
    if len(ground_truths) == 0:
        raise ValueError("no scenes to evaluate")
    ap = np.full((len(IOU_THRESHOLDS), num_classes), np.nan)
    for c in range(num_classes):
        num_gt = sum(int(np.sum(np.asarray(gc) == c)) for _, gc in ground_truths)
        if num_gt == 0:
            continue
        per_image = []
        for (db, ds, dc), (gb, gc) in zip(detections, ground_truths):
            sel = np.asarray(dc) == c
            o = np.argsort(-np.asarray(ds)[sel], kind="stable")
            per_image.append((np.asarray(db).reshape(-1, 4)[sel][o], np.asarray(ds)[sel][o],
                              np.asarray(gb).reshape(-1, 4)[np.asarray(gc) == c]))
        scores = np.concatenate([s for _, s, _ in per_image]) if per_image else np.zeros(0)
        for t, thr in enumerate(IOU_THRESHOLDS):
            flags = np.concatenate([_match(b, g, thr) for b, _, g in per_image])
            ap[t, c] = average_precision(scores, flags, num_gt)
    valid = ~np.isnan(ap[0])
    if not valid.any():
        return {"AP50": 0.0, "AP75": 0.0, "mAP": 0.0, "per_class": [None] * num_classes}
    t50 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.5)))
    t75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    return {
        "AP50": float(np.mean(ap[t50, valid])),
        "AP75": float(np.mean(ap[t75, valid])),
        "mAP": float(np.mean(ap[:, valid])),
        "per_class": [None if np.isnan(v) else float(v) for v in ap.mean(axis=0)],
    }


def evaluate(model: ModelState, scenes, config: DetectionConfig) -> dict:
    if len(scenes) == 0:
        raise ValueError("no scenes to evaluate")
    dets = [detect(model, s, config) for s in scenes]
    gts = [(s.boxes, s.classes) for s in scenes]
    return evaluate_detections(dets, gts, config.num_classes)
