"""A deliberately small two-stage detector for desk-scale experiments.

Backbone (three conv layers, stride 4) -> RPN over square anchors ->
RoIAlign to a 4x4 grid -> a two-layer head whose hidden activations are the
per-proposal ROI features handed to the FAME adapter.

Label 0 is background; dataset class ``k`` is label ``k + 1``.
Boxes are ``xyxy`` tensors inside this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import batched_nms, box_iou, clip_boxes_to_image, nms, roi_align

BBOX_CLIP = 4.135  # log(1000 / 16), as in torchvision's box coder


@dataclass(frozen=True)
class DetectorDescriptor:
    backend_id: str
    num_classes: int
    roi_feature_dim: int


def encode_deltas(ref, target):
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    tw, th = target[:, 2] - target[:, 0], target[:, 3] - target[:, 1]
    tx, ty = target[:, 0] + 0.5 * tw, target[:, 1] + 0.5 * th
    return torch.stack([(tx - rx) / rw, (ty - ry) / rh, torch.log(tw / rw), torch.log(th / rh)], dim=1)


def decode_deltas(ref, deltas):
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    dw = deltas[:, 2].clamp(max=BBOX_CLIP)
    dh = deltas[:, 3].clamp(max=BBOX_CLIP)
    cx, cy = rx + deltas[:, 0] * rw, ry + deltas[:, 1] * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


class TinyTwoStageDetector(nn.Module):
    """Miniature Faster R-CNN analogue.

    Parameters
    ----------
    num_classes : int
        Foreground classes (background is added internally).
    image_size : int
        Square input side in pixels; callers resize to it.
    anchor_sizes : tuple of float
    roi_feature_dim : int
        Width of the head's hidden layer, i.e. the ROI feature dimension.
    """

    stride = 4
    pool = 4

    def __init__(self, num_classes: int, image_size: int = 64, anchor_sizes=(10.0, 18.0, 30.0),
                 channels: int = 32, roi_feature_dim: int = 128, rpn_pre_nms: int = 200,
                 rpn_post_nms: int = 40, rpn_nms_iou: float = 0.7, roi_samples: int = 32,
                 roi_pos_fraction: float = 0.25, rpn_samples: int = 64, roi_jitter: int = 3):
        super().__init__()
        self.num_classes = num_classes
        self.image_size = image_size
        self.anchor_sizes = tuple(float(s) for s in anchor_sizes)
        self.rpn_pre_nms = rpn_pre_nms
        self.rpn_post_nms = rpn_post_nms
        self.rpn_nms_iou = rpn_nms_iou
        self.roi_samples = roi_samples
        self.roi_pos_fraction = roi_pos_fraction
        self.rpn_samples = rpn_samples
        self.roi_jitter = roi_jitter

        self.backbone = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, channels, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
        )
        k = len(self.anchor_sizes)
        self.rpn_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.rpn_obj = nn.Conv2d(channels, k, 1)
        self.rpn_reg = nn.Conv2d(channels, 4 * k, 1)
        self.fc = nn.Linear(channels * self.pool * self.pool, roi_feature_dim)
        self.cls_head = nn.Linear(roi_feature_dim, num_classes + 1)
        self.box_head = nn.Linear(roi_feature_dim, 4)
        for layer in (self.rpn_obj, self.rpn_reg, self.box_head):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)
        self.register_buffer("anchors", self._make_anchors(), persistent=False)
        self.descriptor = DetectorDescriptor("tiny2stage", num_classes, roi_feature_dim)

    def _make_anchors(self):
        n = self.image_size // self.stride
        centers = (torch.arange(n, dtype=torch.float32) + 0.5) * self.stride
        cy, cx = torch.meshgrid(centers, centers, indexing="ij")
        out = []
        # layout matches conv output: (cell_y, cell_x, anchor)
        for s in self.anchor_sizes:
            out.append(torch.stack([cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2], dim=-1))
        return torch.stack(out, dim=2).reshape(-1, 4)

    @staticmethod
    def standardize(images):
        """Per-image, per-channel zero mean and unit variance; undoes much of a global haze veil."""
        mean = images.mean(dim=(2, 3), keepdim=True)
        std = images.std(dim=(2, 3), keepdim=True)
        return (images - mean) / (std + 1e-3)

    # -- stage one ----------------------------------------------------
    def _rpn(self, feats):
        h = F.relu(self.rpn_conv(feats))
        B = feats.shape[0]
        obj = self.rpn_obj(h).permute(0, 2, 3, 1).reshape(B, -1)
        reg = self.rpn_reg(h).permute(0, 2, 3, 1).reshape(B, -1, len(self.anchor_sizes), 4).reshape(B, -1, 4)
        return obj, reg

    def _proposals(self, obj, reg):
        size = (self.image_size, self.image_size)
        out = []
        for b in range(obj.shape[0]):
            scores = obj[b].detach()
            boxes = clip_boxes_to_image(decode_deltas(self.anchors, reg[b].detach()), size)
            keep = (boxes[:, 2] - boxes[:, 0] >= 1) & (boxes[:, 3] - boxes[:, 1] >= 1)
            boxes, scores = boxes[keep], scores[keep]
            top = torch.argsort(scores, descending=True, stable=True)[: self.rpn_pre_nms]
            boxes, scores = boxes[top], scores[top]
            keep = nms(boxes, scores, self.rpn_nms_iou)[: self.rpn_post_nms]
            out.append(boxes[keep])
        return out

    def _rpn_loss(self, obj, reg, gt_boxes, gen):
        cls_losses, reg_losses = [], []
        for b, gts in enumerate(gt_boxes):
            labels = torch.zeros(self.anchors.shape[0])
            if len(gts):
                ious = box_iou(self.anchors, gts)
                best, best_gt = ious.max(dim=1)
                labels[best < 0.3] = 0
                labels[(best >= 0.3) & (best < 0.6)] = -1
                labels[best >= 0.6] = 1
                labels[ious.argmax(dim=0)] = 1
            else:
                best_gt = torch.zeros(self.anchors.shape[0], dtype=torch.long)
            pos = torch.nonzero(labels == 1).squeeze(1)
            neg = torch.nonzero(labels == 0).squeeze(1)
            n_pos = min(len(pos), self.rpn_samples // 2)
            pos = pos[torch.randperm(len(pos), generator=gen)[:n_pos]]
            neg = neg[torch.randperm(len(neg), generator=gen)[: self.rpn_samples - n_pos]]
            idx = torch.cat([pos, neg])
            cls_losses.append(F.binary_cross_entropy_with_logits(obj[b, idx], labels[idx]))
            if n_pos:
                target = encode_deltas(self.anchors[pos], gts[best_gt[pos]])
                reg_losses.append(F.smooth_l1_loss(reg[b, pos], target, beta=1 / 9, reduction="sum") / len(idx))
        loss_reg = torch.stack(reg_losses).sum() / len(gt_boxes) if reg_losses else obj.sum() * 0
        return torch.stack(cls_losses).mean() + loss_reg

    # -- stage two ----------------------------------------------------
    def roi_features(self, feats, boxes_per_image):
        """ROI features for a list of ``xyxy`` box tensors, one per image."""
        pooled = roi_align(feats, [b.float() for b in boxes_per_image], output_size=self.pool,
                           spatial_scale=1.0 / self.stride, sampling_ratio=2, aligned=True)
        return F.relu(self.fc(pooled.flatten(1)))

    def _sample_rois(self, proposals, gts, labels, gen):
        """Positive (IoU > 0.5) and background ROIs; GT boxes are always included."""
        if len(gts):
            # jittered GT copies keep the positive fraction near roi_pos_fraction early in training
            wh = (gts[:, 2:] - gts[:, :2]).repeat(1, 2)
            jitter = gts.repeat(self.roi_jitter, 1) + 0.1 * wh.repeat(self.roi_jitter, 1) * torch.randn(
                len(gts) * self.roi_jitter, 4, generator=gen)
            jitter = clip_boxes_to_image(jitter, (self.image_size, self.image_size))
            boxes = torch.cat([gts, jitter, proposals])
        else:
            boxes = proposals
        if len(gts):
            ious = box_iou(boxes, gts)
            best, best_gt = ious.max(dim=1)
        else:
            best = torch.zeros(len(boxes))
            best_gt = torch.zeros(len(boxes), dtype=torch.long)
        pos = torch.nonzero(best > 0.5).squeeze(1)
        neg = torch.nonzero(best < 0.5).squeeze(1)
        n_pos_max = max(int(self.roi_samples * self.roi_pos_fraction), len(gts))
        # keep the GT boxes themselves, sample the remaining positives
        gt_rows, extra = pos[pos < len(gts)], pos[pos >= len(gts)]
        extra = extra[torch.randperm(len(extra), generator=gen)[: max(0, n_pos_max - len(gt_rows))]]
        pos = torch.cat([gt_rows, extra])
        neg = neg[torch.randperm(len(neg), generator=gen)[: max(0, self.roi_samples - len(pos))]]
        keep = torch.cat([pos, neg])
        roi_labels = torch.zeros(len(keep), dtype=torch.long)
        roi_labels[: len(pos)] = labels[best_gt[pos]] + 1
        matched = torch.full((len(keep),), -1, dtype=torch.long)
        matched[: len(pos)] = best_gt[pos]
        return boxes[keep], roi_labels, matched, best[keep]

    def forward_train(self, images, gt_boxes, gt_labels, gen):
        """Run both stages on a training batch.

        Returns a dict with the RPN loss, box-regression loss, and the
        per-ROI tensors the classification loss and FAME pathway need.
        """
        feats = self.backbone(self.standardize(images))
        obj, reg = self._rpn(feats)
        loss_rpn = self._rpn_loss(obj, reg, gt_boxes, gen)
        proposals = self._proposals(obj, reg)
        rois, labels, matched, ious, img_idx = [], [], [], [], []
        for b in range(len(gt_boxes)):
            r, l, m, i = self._sample_rois(proposals[b], gt_boxes[b], gt_labels[b], gen)
            rois.append(r)
            labels.append(l)
            matched.append(m)
            ious.append(i)
            img_idx.append(torch.full((len(r),), b, dtype=torch.long))
        roi_feats = self.roi_features(feats, rois)
        logits = self.cls_head(roi_feats)
        deltas = self.box_head(roi_feats)
        labels_cat = torch.cat(labels)
        matched_cat = torch.cat(matched)
        img_cat = torch.cat(img_idx)
        rois_cat = torch.cat(rois)
        pos = labels_cat > 0
        if pos.any():
            gt_for_pos = torch.stack([gt_boxes[int(b)][int(m)] for b, m in zip(img_cat[pos], matched_cat[pos])])
            target = encode_deltas(rois_cat[pos], gt_for_pos)
            loss_bbox = F.smooth_l1_loss(deltas[pos], target, beta=1 / 9, reduction="sum") / len(labels_cat)
        else:
            loss_bbox = deltas.sum() * 0
        return {
            "loss_rpn": loss_rpn,
            "loss_bbox": loss_bbox,
            "logits": logits,
            "labels": labels_cat,
            "matched_gt": matched_cat,
            "image_index": img_cat,
            "rois": rois_cat,
            "roi_iou": torch.cat(ious),
            "roi_features": roi_feats,
        }

    @torch.no_grad()
    def detect(self, images, score_threshold: float = 0.05, nms_iou: float = 0.5, max_detections: int = 100):
        """Per-image ``(boxes_xyxy, scores, labels)`` with class-wise NMS, sorted by score."""
        feats = self.backbone(self.standardize(images))
        obj, reg = self._rpn(feats)
        proposals = self._proposals(obj, reg)
        if sum(len(p) for p in proposals) == 0:
            return [(torch.zeros(0, 4), torch.zeros(0), torch.zeros(0, dtype=torch.long)) for _ in proposals]
        roi_feats = self.roi_features(feats, proposals)
        probs = torch.softmax(self.cls_head(roi_feats), dim=1)
        deltas = self.box_head(roi_feats)
        size = (self.image_size, self.image_size)
        out, start = [], 0
        for props in proposals:
            n = len(props)
            p, d = probs[start:start + n], deltas[start:start + n]
            start += n
            boxes = clip_boxes_to_image(decode_deltas(props, d), size)
            C = self.num_classes
            boxes = boxes[:, None].expand(n, C, 4).reshape(-1, 4)
            scores = p[:, 1:].reshape(-1)
            labels = torch.arange(C).repeat(n)
            keep = (scores > score_threshold) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
            boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
            keep = batched_nms(boxes, scores, labels, nms_iou)[:max_detections]
            order = torch.argsort(scores[keep], descending=True, stable=True)
            keep = keep[order]
            out.append((boxes[keep], scores[keep], labels[keep]))
        return out
