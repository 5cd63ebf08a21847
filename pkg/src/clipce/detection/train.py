"""Two-objective training loop, inference and the estimator wrapper.

Each step trains the detector on ``L_rpn + L_bbox + L_cls`` (``L_cls`` being
CE, focal or CLIP-CE) and, separately, the FAME adapter on its BCE loss. The
adapter only ever sees detached ROI features and probabilities, and CLIP-CE
only ever sees detached weights, so neither objective leaks into the other.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from ..ame import FocalParams, WeightRecord, load_or_compute_weights
from ..data import load_image
from ..embeddings import DEFAULT_TEMPLATE_NEG, DEFAULT_TEMPLATE_POS, CropPolicy, build_prompt_pair, crop_region
from ..exceptions import InputError, NumericError
from ..fame import Adapter, AdapterConfig, SoftLabelParams, adapter_step, fame_weight, offset_weight
from ..losses import AME_BRANCH, ClipCeSchedule, clipce_loss_torch, PROB_EPS
from .boxes import xywh_to_xyxy, xyxy_to_xywh
from .model import TinyTwoStageDetector

log = logging.getLogger(__name__)

TRAIN_LOG_SCHEMA = "train-log/v1"
OBJECT_LOG_SCHEMA = "object-log/v1"
LOSS_KINDS = ("ce", "focal", "clipce")


@dataclass
class TrainConfig:
    loss_kind: str = "clipce"
    alpha1: float = 0.5
    alpha2: float = 1.0
    gamma: float = 2.0
    pretrain_epochs: int = 15
    total_epochs: int = 20
    batch_size: int = 4
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    image_size: int = 64
    fame_hidden_dim: int = 512
    fame_lr: float = 0.01
    theta: float = 0.5
    template_pos: str = DEFAULT_TEMPLATE_POS
    template_neg: str = DEFAULT_TEMPLATE_NEG
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise InputError(f"loss kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    @property
    def schedule(self) -> ClipCeSchedule:
        return ClipCeSchedule(self.alpha1, self.alpha2, self.pretrain_epochs, self.total_epochs)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Detection:
    box: tuple  # (x, y, w, h)
    class_index: int
    score: float


@dataclass
class TrainResult:
    detector: TinyTwoStageDetector
    adapter: Adapter | None
    epoch_logs: list = field(default_factory=list)
    object_logs: list = field(default_factory=list)
    checkpoint_dir: Path | None = None


def _resize_tensor(image: np.ndarray, size: int) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))[None]
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t[0]


class _Sample:
    __slots__ = ("image_id", "image", "boxes", "labels", "object_ids")


def load_samples(manifest, size: int) -> list:
    samples = []
    for e in manifest.entries:
        img = load_image(manifest.image_path(e))
        H, W = img.shape[:2]
        s = _Sample()
        s.image_id = e.image_id
        s.image = _resize_tensor(img, size)
        sx, sy = size / W, size / H
        boxes = xywh_to_xyxy([a.bbox for a in e.annotations]) * np.array([sx, sy, sx, sy])
        s.boxes = torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4)
        s.labels = torch.tensor([a.class_index for a in e.annotations], dtype=torch.long)
        s.object_ids = [(e.image_id, a.annotation_id) for a in e.annotations]
        samples.append(s)
    return samples


class ObjectBank:
    """Frozen per-object quantities: visual embedding, prompt embeddings, AME weight."""

    def __init__(self, manifest, provider, cache, template_pos, template_neg, policy=None):
        policy = policy or CropPolicy()
        prompts = {n: build_prompt_pair(n, template_pos, template_neg) for n in manifest.class_names}
        text = {n: (provider.encode_text(p.positive_text), provider.encode_text(p.negative_text))
                for n, p in prompts.items()}
        self.visual, self.t_pos, self.t_neg, self.w_ame, self.degradation = {}, {}, {}, {}, {}
        for e in manifest.entries:
            image = None
            for a in e.annotations:
                key = (e.image_id, a.annotation_id)
                name = manifest.class_names[a.class_index]
                if image is None:
                    image = load_image(manifest.image_path(e))
                crop = crop_region(image, a.bbox, policy)
                self.visual[key] = provider.encode_image_crop(crop, policy, prompt=prompts[name],
                                                              degradation=a.degradation)
                self.t_pos[key], self.t_neg[key] = text[name]
                self.w_ame[key] = cache.w_ame(*key)
                self.degradation[key] = a.degradation


def _seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def build_detector(num_classes: int, cfg: TrainConfig, seed: int) -> TinyTwoStageDetector:
    torch.manual_seed(seed)
    return TinyTwoStageDetector(num_classes, image_size=cfg.image_size)


def save_checkpoint(path, detector, adapter, gen, np_rng, epoch, meta) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(detector.state_dict(), path / "detector.pt")
    if adapter is not None:
        adapter.save(path / "adapter.json")
    torch.save({"torch_generator": gen.get_state(), "numpy": np_rng.bit_generator.state, "epoch": epoch},
               path / "rngstate.pt")
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_detector(ckpt_dir) -> TinyTwoStageDetector:
    """Rebuild a detector from a ``ckpt/epoch_<e>`` directory."""
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / "meta.json").read_text())
    det = TinyTwoStageDetector(meta["num_classes"], image_size=meta["image_size"])
    det.load_state_dict(torch.load(ckpt_dir / "detector.pt", weights_only=True))
    det.eval()
    return det


def latest_checkpoint(ckpt_root) -> Path:
    dirs = sorted(Path(ckpt_root).glob("epoch_*"), key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise FileNotFoundError(f"no checkpoints under {ckpt_root}")
    return dirs[-1]


def _cls_loss(kind, logits, labels, multipliers, gamma):
    if kind == "focal":
        logp = torch.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
        nll = -torch.clamp(logp, min=math.log(PROB_EPS))
        return ((1.0 - logp.exp()) ** gamma * nll).mean()
    return clipce_loss_torch(logits, labels, multipliers)


def train(manifest, provider=None, cfg: TrainConfig = TrainConfig(), seed: int = 0, out_dir=None,
          weight_cache=None, weight_cache_path=None, adapter: Adapter | None = None,
          stamp: dict | None = None) -> TrainResult:
    """Train the reference detector (and adapter, for CLIP-CE) on ``manifest``.

    Weights come from ``weight_cache``; failing that from
    ``weight_cache_path`` or an on-the-fly computation with ``provider``.
    Writes ``train_log.jsonl``, ``object_log.jsonl`` and
    ``ckpt/epoch_<e>/`` under ``out_dir`` when given.
    """
    if not manifest.entries:
        raise InputError("training manifest is empty")
    sched = cfg.schedule
    out_dir = Path(out_dir) if out_dir is not None else None
    gen = _seed_everything(seed)
    np_rng = np.random.default_rng(seed)
    detector = build_detector(manifest.num_classes, cfg, seed)
    optim = torch.optim.SGD(detector.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    bank = None
    if provider is not None:
        if weight_cache is None:
            if weight_cache_path is None:
                log.warning("no AME weight cache given; computing weights on the fly")
            weight_cache = load_or_compute_weights(weight_cache_path, manifest, provider,
                                                   cfg.template_pos, cfg.template_neg)
        bank = ObjectBank(manifest, provider, weight_cache, cfg.template_pos, cfg.template_neg)
    if cfg.loss_kind == "clipce" and bank is None:
        raise InputError("CLIP-CE training needs an embedding provider")
    if cfg.loss_kind == "clipce" and adapter is None:
        adapter = Adapter(
            AdapterConfig(provider.dim + detector.descriptor.roi_feature_dim, provider.dim,
                          cfg.fame_hidden_dim, cfg.fame_lr),
            seed=seed,
        )
    soft = SoftLabelParams(cfg.theta)
    samples = load_samples(manifest, cfg.image_size)
    meta = {"num_classes": manifest.num_classes, "image_size": cfg.image_size, "class_names": manifest.class_names,
            "config": asdict(cfg), "config_hash": cfg.hash(), "seed": seed, **(stamp or {})}

    result = TrainResult(detector, adapter)
    train_log = object_log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        train_log = open(out_dir / "train_log.jsonl", "w")
        object_log = open(out_dir / "object_log.jsonl", "w")
    try:
        for epoch in range(1, sched.ep_j + 1):
            branch = sched.branch(epoch)
            detector.train()
            order = np_rng.permutation(len(samples))
            sums = Counter()
            branch_counts = Counter()
            n_steps = 0
            epoch_objects = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                step = _train_step(detector, optim, adapter, bank, batch, epoch, cfg, sched, soft, gen, branch_counts)
                if not all(math.isfinite(v) for v in step["losses"].values()):
                    if out_dir is not None:
                        save_checkpoint(out_dir / "ckpt" / f"failed_epoch_{epoch}", detector, adapter, gen, np_rng,
                                        epoch, meta)
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {n_steps}: {step['losses']}")
                sums.update(step["losses"])
                n_steps += 1
                epoch_objects.extend(step["objects"])
            weights = [o["active_weight"] for o in epoch_objects if o["active_weight"] is not None]
            rec = {
                "schema": TRAIN_LOG_SCHEMA,
                "epoch": epoch,
                "branch": branch,
                "loss_kind": cfg.loss_kind,
                "n_steps": n_steps,
                **{k: v / n_steps for k, v in sorted(sums.items())},
                "mean_active_weight": float(np.mean(weights)) if weights else None,
                "mean_multiplier": float(np.mean([o["multiplier"] for o in epoch_objects])) if epoch_objects else None,
                "branch_counts": dict(branch_counts),
                "config_hash": meta["config_hash"],
                "seed": seed,
            }
            result.epoch_logs.append(rec)
            for o in epoch_objects:
                o["epoch"] = epoch
            result.object_logs.extend(epoch_objects)
            if train_log is not None:
                train_log.write(json.dumps(rec, sort_keys=True) + "\n")
                for o in epoch_objects:
                    object_log.write(json.dumps(o, sort_keys=True) + "\n")
                if epoch % cfg.checkpoint_every == 0 or epoch == sched.ep_j:
                    save_checkpoint(out_dir / "ckpt" / f"epoch_{epoch}", detector, adapter, gen, np_rng, epoch, meta)
            log.info("epoch %d [%s] %s", epoch, branch, {k: round(v / n_steps, 4) for k, v in sums.items()})
    finally:
        if train_log is not None:
            train_log.close()
            object_log.close()
    result.checkpoint_dir = out_dir / "ckpt" if out_dir is not None else None
    detector.eval()
    return result


def _train_step(detector, optim, adapter, bank, batch, epoch, cfg, sched, soft, gen, branch_counts):
    images = torch.stack([s.image for s in batch])
    out = detector.forward_train(images, [s.boxes for s in batch], [s.labels for s in batch], gen)
    logits, labels = out["logits"], out["labels"]
    probs = torch.softmax(logits.detach(), dim=1).double().numpy()
    feats = out["roi_features"].detach().double().numpy()
    roi_iou = out["roi_iou"].numpy()
    img_idx = out["image_index"].numpy()
    matched = out["matched_gt"].numpy()
    labels_np = labels.numpy()

    # FAME pathway: one representative positive proposal per GT object
    objects, per_gt = [], {}
    adapter_batch = []
    for b, s in enumerate(batch):
        for g, key in enumerate(s.object_ids):
            rows = np.nonzero((img_idx == b) & (matched == g) & (labels_np > 0))[0]
            if len(rows) == 0:
                continue  # unmatched GT: no CLIP-CE term
            row = rows[np.argmax(roi_iou[rows])]
            p_t = float(probs[row, labels_np[row]])
            rec = {"image_id": key[0], "annotation_id": key[1], "p_t": p_t,
                   "w_ame": None, "w_offset": None, "w_fame": None, "active_weight": None,
                   "multiplier": 1.0, "degradation": None}
            if bank is not None:
                rec["w_ame"] = bank.w_ame[key]
                rec["degradation"] = bank.degradation[key]
            if adapter is not None:
                w_off = offset_weight(adapter(bank.visual[key], feats[row]), bank.t_pos[key], bank.t_neg[key])
                rec["w_offset"] = w_off
                rec["w_fame"] = fame_weight(rec["w_ame"], min(max(w_off, 1e-12), 1 - 1e-12))
                adapter_batch.append((bank.visual[key], feats[row], p_t, bank.t_pos[key], bank.t_neg[key]))
            if cfg.loss_kind == "clipce":
                wr = WeightRecord(key, rec["w_ame"], None, rec["w_offset"], rec["w_fame"])
                rec["active_weight"] = sched.active_weight(wr, epoch)
                rec["multiplier"] = sched.multiplier(wr, epoch)
            per_gt[(b, g)] = rec["multiplier"]
            objects.append(rec)

    multipliers = torch.ones(len(labels), dtype=torch.float32)
    for i in np.nonzero(labels_np > 0)[0]:
        m = per_gt.get((int(img_idx[i]), int(matched[i])))
        if m is not None:
            multipliers[i] = m
            if cfg.loss_kind == "clipce":
                branch_counts[sched.branch(epoch)] += 1
    loss_cls = _cls_loss(cfg.loss_kind, logits, labels, multipliers, cfg.gamma)
    total = out["loss_rpn"] + out["loss_bbox"] + loss_cls
    optim.zero_grad()
    total.backward()
    optim.step()

    losses = {"loss_rpn": out["loss_rpn"].item(), "loss_bbox": out["loss_bbox"].item(),
              "loss_cls": loss_cls.item(), "loss_total": total.item()}
    if adapter is not None and adapter_batch:
        _, loss_ad = adapter_step(adapter, adapter_batch, soft)
        losses["loss_adapter"] = loss_ad
    return {"losses": losses, "objects": objects}


def predict(detector: TinyTwoStageDetector, image: np.ndarray, score_threshold: float = 0.05,
            nms_iou: float = 0.5) -> list:
    """Detections for one HxWx3 image in its own pixel coordinates, highest score first."""
    detector.eval()
    H, W = image.shape[:2]
    size = detector.image_size
    boxes, scores, labels = detector.detect(_resize_tensor(image, size)[None], score_threshold, nms_iou)[0]
    scale = np.array([W / size, H / size, W / size, H / size])
    xywh = xyxy_to_xywh(boxes.double().numpy() * scale)
    return [Detection(tuple(float(c) for c in b), int(l), float(s))
            for b, s, l in zip(xywh, scores.tolist(), labels.tolist())]


class ClipCeDetector(BaseEstimator):
    """Estimator facade over :func:`train` and :func:`predict`.

    ``fit`` takes a :class:`~clipce.data.DatasetManifest`; ``predict`` takes
    a list of HxWx3 float images and returns a list of detection lists.
    """

    def __init__(self, loss_kind="clipce", alpha1=0.5, alpha2=1.0, gamma=2.0, pretrain_epochs=15,
                 total_epochs=20, batch_size=4, lr=0.02, image_size=64, fame_hidden_dim=512, fame_lr=0.01,
                 theta=0.5, embeddings_backend="stub:0", embedding_dim=64, score_threshold=0.05,
                 nms_iou=0.5, random_state=0):
        self.loss_kind = loss_kind
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.gamma = gamma
        self.pretrain_epochs = pretrain_epochs
        self.total_epochs = total_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.image_size = image_size
        self.fame_hidden_dim = fame_hidden_dim
        self.fame_lr = fame_lr
        self.theta = theta
        self.embeddings_backend = embeddings_backend
        self.embedding_dim = embedding_dim
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(loss_kind=self.loss_kind, alpha1=self.alpha1, alpha2=self.alpha2, gamma=self.gamma,
                           pretrain_epochs=self.pretrain_epochs, total_epochs=self.total_epochs,
                           batch_size=self.batch_size, lr=self.lr, image_size=self.image_size,
                           fame_hidden_dim=self.fame_hidden_dim, fame_lr=self.fame_lr, theta=self.theta)

    def fit(self, manifest, y=None, weight_cache=None, out_dir=None):
        from ..embeddings import make_provider

        provider = make_provider(self.embeddings_backend, self.embedding_dim)
        res = train(manifest, provider, self._train_config(), self.random_state, out_dir, weight_cache=weight_cache)
        self.detector_ = res.detector
        self.adapter_ = res.adapter
        self.history_ = res.epoch_logs
        self.object_log_ = res.object_logs
        self.classes_ = list(manifest.class_names)
        return self

    def predict(self, images):
        if not hasattr(self, "detector_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("ClipCeDetector is not fitted yet")
        return [predict(self.detector_, np.asarray(im, dtype=np.float64), self.score_threshold, self.nms_iou)
                for im in images]
