"""mAP@0.5 evaluation and the AME-vs-focal weight analysis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .data import load_image
from .detection.boxes import iou_matrix
from .exceptions import InputError

REPORT_SCHEMA = "eval-report/v1"
WEIGHTS_CSV_SCHEMA = "weight-report/v1"
WEIGHT_COLUMNS = ("image_id", "annotation_id", "class", "degradation_proxy", "w_ame", "focal_w", "p_t")


@dataclass
class EvalReport:
    per_class_ap: dict
    map50: float
    counts: dict
    excluded_classes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}


def match_detections(detections, gts_by_image, iou_thresh: float = 0.5):
    """Greedy one-to-one matching in descending score order.

    ``detections`` is a list of ``(image_id, box_xywh, score)``; each is
    matched to the highest-IoU still-unmatched GT in its image with
    ``IoU >= iou_thresh``. Returns a boolean TP flag per detection, in
    the sorted order, plus that order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][2])
    used = {img: np.zeros(len(b), dtype=bool) for img, b in gts_by_image.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        img, box, _ = detections[i]
        gts = gts_by_image.get(img)
        if gts is None or len(gts) == 0:
            continue
        ious = iou_matrix([box], gts)[0]
        ious[used[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            used[img][j] = True
            tp[rank] = True
    return tp, order


def ap_from_tp(tp, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if n_gt == 0:
        raise InputError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(detections, gts, iou_thresh: float = 0.5) -> float:
    """AP for one class.

    ``detections`` is a list of ``(image_id, box, score)`` (or ``(box, score)``
    for a single image); ``gts`` maps image id to a list of boxes (or is a
    plain list of boxes for a single image).
    """
    if not isinstance(gts, dict):
        gts = {0: list(gts)}
        detections = [(0, d[0], d[1]) for d in detections]
    gts = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in gts.items()}
    n_gt = sum(len(v) for v in gts.values())
    tp, _ = match_detections(detections, gts, iou_thresh)
    return ap_from_tp(tp, n_gt)


def evaluate_detections(detections_by_image: dict, manifest, iou_thresh: float = 0.5) -> EvalReport:
    """``detections_by_image`` maps image id to a list of objects with ``box``, ``class_index``, ``score``."""
    if not manifest.entries:
        raise InputError("cannot evaluate an empty dataset")
    per_class_ap, excluded = {}, []
    n_gt_total = n_det_total = n_matched = 0
    for c, name in enumerate(manifest.class_names):
        gts = {e.image_id: [a.bbox for a in e.annotations if a.class_index == c] for e in manifest.entries}
        gts = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in gts.items()}
        # stable sort later: equal scores keep image order, then detection order
        dets = [(e.image_id, d.box, d.score)
                for e in manifest.entries for d in detections_by_image.get(e.image_id, []) if d.class_index == c]
        n_gt = sum(len(v) for v in gts.values())
        n_det_total += len(dets)
        n_gt_total += n_gt
        if n_gt == 0:
            excluded.append(name)
            continue
        tp, _ = match_detections(dets, gts, iou_thresh)
        n_matched += int(tp.sum())
        per_class_ap[name] = ap_from_tp(tp, n_gt)
    map50 = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalReport(per_class_ap, map50, {"gt": n_gt_total, "detections": n_det_total, "matched": n_matched},
                      excluded)


def evaluate(detector, manifest, iou_thresh: float = 0.5, score_threshold: float = 0.05,
             nms_iou: float = 0.5) -> EvalReport:
    """Run ``detector`` over ``manifest`` and score it.

    ``detector`` is either a trained :class:`TinyTwoStageDetector` or any
    object with ``predict_entry(manifest, entry) -> detections``.
    """
    from .detection.train import predict

    dets = {}
    for e in manifest.entries:
        if hasattr(detector, "predict_entry"):
            dets[e.image_id] = detector.predict_entry(manifest, e)
        else:
            dets[e.image_id] = predict(detector, load_image(manifest.image_path(e)), score_threshold, nms_iou)
    return evaluate_detections(dets, manifest, iou_thresh)


class ReplayDetector:
    """Emits the manifest's own ground truth at a fixed score."""

    def __init__(self, score: float = 1.0):
        self.score = score

    def predict_entry(self, manifest, entry):
        from .detection.train import Detection

        return [Detection(tuple(a.bbox), a.class_index, self.score) for a in entry.annotations]


def save_report(report: EvalReport, path, stamp: dict | None = None) -> None:
    doc = {**report.to_json(), **(stamp or {})}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


# -- weight analysis ---------------------------------------------------------

def load_object_log(path, epoch: int | None = None) -> dict:
    """Latest (or given-epoch) ``p_t`` per object from an ``object_log.jsonl``."""
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if epoch is not None and rec["epoch"] != epoch:
                continue
            key = (rec["image_id"], rec["annotation_id"])
            if key not in out or rec["epoch"] >= out[key]["epoch"]:
                out[key] = rec
    return out


def weight_analysis(manifest, cache, object_stats: dict, gamma: float = 2.0):
    """Join AME weights, focal weights and the degradation proxy per object.

    Returns ``(rows, summary)``. Rows lacking a ``p_t`` in ``object_stats``
    are skipped and counted. ``summary`` holds the Spearman correlation of
    each weight with the proxy over rows where the proxy is known.
    """
    rows, skipped = [], 0
    proxies = {}
    if manifest is not None:
        for e, a in manifest.objects():
            proxies[(e.image_id, a.annotation_id)] = a.degradation
    for key in sorted(cache.records, key=lambda k: (str(type(k[0])), k)):
        rec = cache.records[key]
        stats = object_stats.get(key)
        if stats is None or stats.get("p_t") is None:
            skipped += 1
            continue
        p_t = float(stats["p_t"])
        proxy = proxies.get(key, stats.get("degradation"))
        rows.append({
            "image_id": key[0],
            "annotation_id": key[1],
            "class": rec.get("class"),
            "degradation_proxy": proxy,
            "w_ame": rec["w_ame"],
            "focal_w": (1.0 - p_t) ** gamma,
            "p_t": p_t,
        })
    summary = {"n_rows": len(rows), "n_skipped": skipped,
               "spearman_w_ame": None, "spearman_focal_w": None}
    known = [r for r in rows if r["degradation_proxy"] is not None and not math.isnan(r["degradation_proxy"])]
    if len(known) >= 3:
        deg = [r["degradation_proxy"] for r in known]
        summary["spearman_w_ame"] = _spearman([r["w_ame"] for r in known], deg)
        summary["spearman_focal_w"] = _spearman([r["focal_w"] for r in known], deg)
    return rows, summary


def _spearman(a, b) -> float | None:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(spearmanr(a, b).statistic)


def write_weight_csv(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {WEIGHTS_CSV_SCHEMA}\n")
        w = csv.DictWriter(fh, fieldnames=WEIGHT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in WEIGHT_COLUMNS})


def read_weight_csv(path) -> list:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
