"""Dataset manifests, COCO ingestion and image/depth file I/O."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .embeddings import CropPolicy, crop_region
from .exceptions import InputError, ParseError

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "manifest/v1"
DEPTH_SIDECAR_SCHEMA = "depth-sidecar/v1"
DEPTH_MAGIC = b"DPTH"
DEPTH_HEADER = struct.Struct("<4sIII")  # magic, H, W, format version
MISSING_IMAGE_ABORT_FRACTION = 0.01


@dataclass
class Annotation:
    annotation_id: int
    class_index: int
    bbox: tuple  # (x, y, w, h) pixels
    degradation: float | None = None

    def to_json(self) -> dict:
        d = {"annotation_id": self.annotation_id, "class_index": self.class_index, "bbox": list(self.bbox)}
        if self.degradation is not None:
            d["degradation"] = self.degradation
        return d


@dataclass
class ManifestEntry:
    image_id: int
    image_path: str
    annotations: list = field(default_factory=list)
    depth_path: str | None = None
    width: int | None = None
    height: int | None = None


@dataclass
class DatasetManifest:
    entries: list
    class_names: list
    split: str = "train"
    root: Path | None = None  # directory relative paths resolve against

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen_img, seen_ann = set(), set()
        n_cls = len(self.class_names)
        for e in self.entries:
            if e.image_id in seen_img:
                raise InputError(f"duplicate image_id {e.image_id}")
            seen_img.add(e.image_id)
            for a in e.annotations:
                if a.annotation_id in seen_ann:
                    raise InputError(f"duplicate annotation_id {a.annotation_id}")
                seen_ann.add(a.annotation_id)
                if not 0 <= a.class_index < n_cls:
                    raise InputError(f"annotation {a.annotation_id}: class_index {a.class_index} out of range")
                if a.bbox[2] <= 0 or a.bbox[3] <= 0:
                    raise InputError(f"annotation {a.annotation_id}: non-positive box {a.bbox}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def entry(self, image_id) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)

    def to_json(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "split": self.split,
            "class_names": list(self.class_names),
            "entries": [
                {
                    "image_id": e.image_id,
                    "image_path": e.image_path,
                    "depth_path": e.depth_path,
                    "width": e.width,
                    "height": e.height,
                    "annotations": [a.to_json() for a in e.annotations],
                }
                for e in self.entries
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())

    @classmethod
    def from_json(cls, doc: dict, root=None) -> "DatasetManifest":
        if doc.get("schema") != MANIFEST_SCHEMA:
            raise ParseError(f"unsupported manifest schema {doc.get('schema')!r}")
        entries = [
            ManifestEntry(
                image_id=e["image_id"],
                image_path=e["image_path"],
                depth_path=e.get("depth_path"),
                width=e.get("width"),
                height=e.get("height"),
                annotations=[
                    Annotation(a["annotation_id"], a["class_index"], tuple(a["bbox"]), a.get("degradation"))
                    for a in e["annotations"]
                ],
            )
            for e in doc["entries"]
        ]
        return cls(entries, list(doc["class_names"]), doc.get("split", "train"), Path(root) if root else None)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        return cls.from_json(doc, root=path.parent)

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.resolve(entry.image_path)

    def objects(self):
        """Yield ``(entry, annotation)`` pairs in manifest order."""
        for e in self.entries:
            for a in e.annotations:
                yield e, a


def clip_box(bbox, width, height):
    """Clip an (x, y, w, h) box to image bounds; returns None if nothing remains."""
    x, y, w, h = (float(c) for c in bbox)
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(float(width), x + w), min(float(height), y + h)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def ingest_coco(annotation_json, image_root, depth_root=None, split: str = "train", check_images: bool = True):
    """Build a :class:`DatasetManifest` from a COCO-format annotation file.

    Category ids are mapped to a dense index in ascending id order. Images
    and annotations are ordered by id. Degenerate boxes are dropped and
    counted; the return value is ``(manifest, report)``.
    """
    annotation_json = Path(annotation_json)
    image_root = Path(image_root)
    try:
        doc = json.loads(annotation_json.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{annotation_json}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc

    cats = sorted(doc.get("categories", []), key=lambda c: c["id"])
    cat_index = {c["id"]: i for i, c in enumerate(cats)}
    class_names = [c["name"] for c in cats]

    by_image: dict = {}
    for ann in doc.get("annotations", []):
        if ann["category_id"] not in cat_index:
            raise InputError(
                f"annotation {ann.get('id')} references unknown category id {ann['category_id']}"
            )
        by_image.setdefault(ann["image_id"], []).append(ann)

    report = {"dropped_boxes": 0, "missing_images": []}
    entries = []
    images = sorted(doc.get("images", []), key=lambda im: im["id"])
    for im in images:
        path = image_root / im["file_name"]
        if check_images and not path.exists():
            report["missing_images"].append(im["id"])
            continue
        W, H = im.get("width"), im.get("height")
        if (W is None or H is None) and path.exists():
            with Image.open(path) as pil:
                W, H = pil.size
        anns = []
        for ann in sorted(by_image.get(im["id"], []), key=lambda a: a["id"]):
            box = clip_box(ann["bbox"], W, H) if W and H else tuple(ann["bbox"])
            if box is None or box[2] <= 0 or box[3] <= 0:
                report["dropped_boxes"] += 1
                continue
            anns.append(Annotation(ann["id"], cat_index[ann["category_id"]], tuple(box), ann.get("degradation")))
        entries.append(
            ManifestEntry(
                image_id=im["id"],
                image_path=str(path.resolve()),
                depth_path=_find_depth(depth_root, path.stem),
                width=W,
                height=H,
                annotations=anns,
            )
        )
    if images and len(report["missing_images"]) / len(images) >= MISSING_IMAGE_ABORT_FRACTION:
        raise InputError(
            f"{len(report['missing_images'])} of {len(images)} images missing: {report['missing_images'][:10]}"
        )
    if report["missing_images"]:
        log.warning("skipping %d missing images", len(report["missing_images"]))
    if report["dropped_boxes"]:
        log.info("dropped %d degenerate boxes", report["dropped_boxes"])
    return DatasetManifest(entries, class_names, split), report


def _find_depth(depth_root, stem) -> str | None:
    if depth_root is None:
        return None
    for ext in (".png", ".depth"):
        p = Path(depth_root) / f"{stem}{ext}"
        if p.exists():
            return str(p.resolve())
    return None


def load_image(path) -> np.ndarray:
    """Read an 8-bit image as an HxWx3 float64 array in [0, 1]."""
    with Image.open(path) as pil:
        arr = np.asarray(pil.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.uint8(np.round(np.clip(image, 0.0, 1.0) * 255.0))


def save_image(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def save_depth(path, depth: np.ndarray) -> None:
    """Write a depth map as ``.depth`` (raw float32) or ``.png`` (16-bit + JSON sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    depth = np.asarray(depth, dtype=np.float64)
    if path.suffix == ".png":
        lo, hi = float(depth.min()), float(depth.max())
        scale = (depth - lo) / (hi - lo) if hi > lo else np.zeros_like(depth)
        cv2.imwrite(str(path), np.uint16(np.round(scale * 65535.0)))
        path.with_suffix(".json").write_text(
            json.dumps({"schema": DEPTH_SIDECAR_SCHEMA, "min": lo, "max": hi}, sort_keys=True) + "\n"
        )
    else:
        H, W = depth.shape
        with open(path, "wb") as fh:
            fh.write(DEPTH_HEADER.pack(DEPTH_MAGIC, H, W, 1))
            fh.write(depth.astype("<f4").tobytes())


def load_depth(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".png":
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None or raw.dtype != np.uint16 or raw.ndim != 2:
            raise ParseError(f"{path}: expected a single-channel 16-bit PNG")
        side = path.with_suffix(".json")
        if not side.exists():
            raise ParseError(f"{path}: missing depth sidecar {side.name}")
        meta = json.loads(side.read_text())
        return meta["min"] + raw.astype(np.float64) / 65535.0 * (meta["max"] - meta["min"])
    blob = path.read_bytes()
    if len(blob) < DEPTH_HEADER.size:
        raise ParseError(f"{path}: truncated depth header")
    magic, H, W, _ = DEPTH_HEADER.unpack_from(blob)
    if magic != DEPTH_MAGIC:
        raise ParseError(f"{path}: bad depth magic {magic!r}")
    body = blob[DEPTH_HEADER.size:]
    if len(body) != 4 * H * W:
        raise ParseError(f"{path}: expected {H}x{W} float32 payload, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(H, W).astype(np.float64)


def crop_objects(manifest: DatasetManifest, image_id, policy: CropPolicy | None = None) -> list:
    """One encoder-ready crop per annotation of ``image_id``, in annotation order."""
    entry = manifest.entry(image_id)
    try:
        image = load_image(manifest.image_path(entry))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {image_id}: {exc}") from exc
    return [crop_region(image, a.bbox, policy) for a in entry.annotations]


def write_coco(path, manifest: DatasetManifest) -> None:
    """Export ``manifest`` annotations as COCO JSON (boxes and labels untouched)."""
    images, anns = [], []
    for e in manifest.entries:
        images.append({"id": e.image_id, "file_name": Path(e.image_path).name, "width": e.width, "height": e.height})
        for a in e.annotations:
            rec = {
                "id": a.annotation_id,
                "image_id": e.image_id,
                "category_id": a.class_index + 1,
                "bbox": list(a.bbox),
                "area": a.bbox[2] * a.bbox[3],
                "iscrowd": 0,
            }
            if a.degradation is not None:
                rec["degradation"] = a.degradation
            anns.append(rec)
    cats = [{"id": i + 1, "name": n} for i, n in enumerate(manifest.class_names)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"images": images, "annotations": anns, "categories": cats}, sort_keys=True, indent=1) + "\n")
