"""Labeled frames: sampling rules, synthetic scenes and the on-disk layout.

Layout::

    <root>/toad/<clip>_<frame>.png
    <root>/not_toad/<clip>_<frame>.png
    <root>/masks/<clip>_<frame>.png      # 8-bit, 255 inside boxes
    <root>/manifest.json                 # optional cache
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

TOAD = "toad"
NOT_TOAD = "not_toad"
LABELS = (TOAD, NOT_TOAD)

TRAIN_FIRST, TRAIN_STEP = 1, 41
TEST_FIRST, TEST_STEP = 10, 9

MASK_DIR = "masks"
MANIFEST_NAME = "manifest.json"
_NAME_RE = re.compile(r"^(?P<clip>.+)_(?P<frame>\d+)\.png$")


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class FrameRecord:
    clip_id: str
    frame_index: int
    image: np.ndarray
    label: str
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise DatasetError(f"unknown label {self.label!r}")
        if self.frame_index < 1:
            raise DatasetError(f"frame_index must be >= 1, got {self.frame_index}")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"{self.record_id}: image must be HxWx3, got {self.image.shape}")
        if self.label == TOAD:
            if self.mask is None:
                raise DatasetError(f"{self.record_id}: missing mask for toad record")
            if self.mask.shape != self.image.shape[:2]:
                raise DatasetError(f"{self.record_id}: mask shape {self.mask.shape} "
                                   f"!= image shape {self.image.shape[:2]}")
            if not self.mask.any():
                raise DatasetError(f"{self.record_id}: toad mask is empty")
        elif self.mask is not None and self.mask.any():
            raise DatasetError(f"{self.record_id}: not_toad record has a nonzero mask")

    @property
    def record_id(self) -> str:
        return f"{self.clip_id}_{self.frame_index}"

    def mask_or_zeros(self) -> np.ndarray:
        if self.mask is None:
            return np.zeros(self.image.shape[:2], dtype=np.uint8)
        return self.mask

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return (self.clip_id == other.clip_id and self.frame_index == other.frame_index
                and self.label == other.label
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.mask_or_zeros(), other.mask_or_zeros()))


@dataclass(frozen=True)
class RecordRef:
    """A frame on disk; ``load()`` reads it into a FrameRecord."""

    clip_id: str
    frame_index: int
    label: str
    image_path: Path
    mask_path: Path | None = None

    @property
    def record_id(self) -> str:
        return f"{self.clip_id}_{self.frame_index}"

    def load(self) -> FrameRecord:
        image = read_image(self.image_path)
        mask = None
        if self.mask_path is not None:
            mask = read_mask(self.mask_path)
        return FrameRecord(self.clip_id, self.frame_index, image, self.label, mask)


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    split_seed: int = 0
    root: Path | None = None

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(r.label for r in self.records)
        return {label: c.get(label, 0) for label in LABELS}

    def __len__(self):
        return len(self.records)

    def to_json(self) -> dict:
        root = self.root
        def rel(p):
            return str(Path(p).relative_to(root)) if root is not None else str(p)
        return {
            "split_seed": self.split_seed,
            "counts": self.counts,
            "records": [
                {"clip_id": r.clip_id, "frame_index": r.frame_index, "label": r.label,
                 "image": rel(r.image_path),
                 "mask": rel(r.mask_path) if r.mask_path is not None else None}
                for r in self.records
            ],
        }


# -- frame sampling ---------------------------------------------------------

def extract_training_indices(n_frames: int) -> list[int]:
    """1-based indices 1, 42, 83, ... up to ``n_frames``."""
    if n_frames < 0:
        raise ValueError("n_frames must be >= 0")
    return list(range(TRAIN_FIRST, n_frames + 1, TRAIN_STEP))


def extract_test_indices(n_frames: int) -> list[int]:
    """1-based indices 10, 19, 28, ... with training frames removed."""
    if n_frames < 0:
        raise ValueError("n_frames must be >= 0")
    train = set(extract_training_indices(n_frames))
    return [i for i in range(TEST_FIRST, n_frames + 1, TEST_STEP) if i not in train]


# -- synthetic scenes -------------------------------------------------------

# (aspect ratio range, texture) per species; toads are squat and warty,
# the frogs/lizard are either rounder or much more elongated and smooth/striped.
TOAD_STYLE = {"aspect": (1.3, 1.6), "texture": "warts"}
DISTRACTOR_STYLES = {
    "water_holding_frog": {"aspect": (1.0, 1.12), "texture": "smooth"},
    "green_tree_frog": {"aspect": (1.0, 1.15), "texture": "speckle_free_light"},
    "motorbike_frog": {"aspect": (2.2, 3.0), "texture": "stripe"},
    "blue_tongue_lizard": {"aspect": (2.6, 3.4), "texture": "bands"},
}
MIN_SYNTH_SIDE = 64
OPTICS_SIGMA = 0.8


def _smooth_noise(rng, shape, scale, amplitude):
    h, w = shape
    sh, sw = max(2, h // scale), max(2, w // scale)
    coarse = rng.normal(0.0, 1.0, (sh, sw)).astype(np.float32)
    return cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC) * amplitude


def _background(rng, shape, complex_bg):
    h, w = shape
    base = rng.uniform(70, 180)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float32)
    gr, gc = rng.uniform(-30, 30, 2)
    gray = base + gr * rr / h + gc * cc / w + _smooth_noise(rng, shape, 8, 10.0)
    tint = rng.uniform(0.85, 1.15, 3).astype(np.float32)
    img = gray[..., None] * tint[None, None, :]
    if complex_bg:
        # leaf-litter style clutter: straight twigs and blotches
        clutter = np.zeros((h, w), dtype=np.float32)
        side = min(h, w)
        for _ in range(rng.integers(8, 20)):
            p0 = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(0.1, 0.4) * side
            p1 = (int(p0[0] + length * np.cos(ang)), int(p0[1] + length * np.sin(ang)))
            cv2.line(clutter, p0, p1, float(rng.uniform(-60, 60)),
                     max(1, int(rng.uniform(0.005, 0.02) * side)), cv2.LINE_AA)
        for _ in range(rng.integers(3, 8)):
            center = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            axes = (int(rng.uniform(0.03, 0.12) * side), int(rng.uniform(0.03, 0.12) * side))
            cv2.ellipse(clutter, center, axes, float(rng.uniform(0, 180)), 0, 360,
                        float(rng.uniform(-40, 40)), -1, cv2.LINE_AA)
        img = img + cv2.GaussianBlur(clutter, (0, 0), 1.0)[..., None]
    return img


def _ellipse_frame(shape, center, semi_major, semi_minor, angle):
    """Rotated-ellipse local coordinates (u along major axis, v along minor), normalized."""
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float32)
    dy, dx = rr - center[0], cc - center[1]
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    u = (dx * cos_t + dy * sin_t) / semi_major
    v = (-dx * sin_t + dy * cos_t) / semi_minor
    return u, v


def _ellipse_half_extents(semi_major, semi_minor, angle):
    """Half height and half width of a rotated ellipse's bounding box."""
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    half_w = math.sqrt((semi_major * cos_t) ** 2 + (semi_minor * sin_t) ** 2)
    half_h = math.sqrt((semi_major * sin_t) ** 2 + (semi_minor * cos_t) ** 2)
    return half_h, half_w


def _draw_animal(img, rng, center, semi_major, semi_minor, angle, texture):
    h, w = img.shape[:2]
    half_h, half_w = _ellipse_half_extents(semi_major, semi_minor, angle)
    r0 = max(0, int(center[0] - half_h) - 2)
    r1 = min(h, int(center[0] + half_h) + 3)
    c0 = max(0, int(center[1] - half_w) - 2)
    c1 = min(w, int(center[1] + half_w) + 3)
    patch_shape = (r1 - r0, c1 - c0)
    u, v = _ellipse_frame(patch_shape, (center[0] - r0, center[1] - c0),
                          semi_major, semi_minor, angle)
    rho = np.sqrt(u ** 2 + v ** 2)
    alpha = np.clip((1.0 - rho) * semi_minor / 1.5, 0.0, 1.0)[..., None]

    local_bg = img[r0:r1, c0:c1].mean()
    contrast = rng.uniform(35, 70) * rng.choice([-1.0, 1.0])
    body = local_bg + contrast
    if body < 25 or body > 230:
        body = local_bg - contrast
    shading = body + 12.0 * v  # dorsal-to-flank gradient

    if texture == "warts":
        tex = np.zeros(patch_shape, dtype=np.float32)
        n_warts = int(rng.integers(25, 45))
        radius = max(1, int(round(0.09 * semi_minor)))
        for _ in range(n_warts):
            t = rng.uniform(0, 2 * np.pi)
            rad = math.sqrt(rng.uniform(0, 0.85))
            uu, vv = rad * np.cos(t) * semi_major, rad * np.sin(t) * semi_minor
            px = center[1] - c0 + uu * np.cos(angle) - vv * np.sin(angle)
            py = center[0] - r0 + uu * np.sin(angle) + vv * np.cos(angle)
            cv2.circle(tex, (int(px), int(py)), radius, float(rng.uniform(-70, -40)), -1, cv2.LINE_AA)
        shading = shading + tex
    elif texture == "stripe":
        shading = shading + 45.0 * np.exp(-(v / 0.18) ** 2) * np.sign(contrast)
    elif texture == "bands":
        shading = shading + 30.0 * np.sign(np.sin(u * 4.5 * np.pi))
    elif texture == "speckle_free_light":
        shading = shading + 10.0 * (1.0 - rho)
    # "smooth": shading only

    tint = rng.uniform(0.9, 1.1, 3).astype(np.float32)
    colored = shading[..., None] * tint[None, None, :]
    img[r0:r1, c0:c1] = img[r0:r1, c0:c1] * (1.0 - alpha) + colored * alpha
    return half_h, half_w


def _place(rng, shape, half_h, half_w, taken, margin):
    """Random center keeping the box inside the frame and clear of ``taken`` boxes."""
    h, w = shape
    for _ in range(50):
        cr = rng.uniform(half_h + 1, h - half_h - 2)
        cc = rng.uniform(half_w + 1, w - half_w - 2)
        box = (cr - half_h, cr + half_h, cc - half_w, cc + half_w)
        if all(box[1] + margin < t[0] or t[1] + margin < box[0]
               or box[3] + margin < t[2] or t[3] + margin < box[2] for t in taken):
            return (cr, cc), box
    return None, None


def synth_scene(seed: int, label: str, shape: tuple[int, int] = (720, 1280),
                clip_id: str | None = None, frame_index: int = 1) -> FrameRecord:
    """Render one synthetic frame; a pure function of (seed, label, shape)."""
    h, w = shape
    if h < MIN_SYNTH_SIDE or w < MIN_SYNTH_SIDE:
        raise ValueError(f"shape {shape} too small, need >= {MIN_SYNTH_SIDE} per side")
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}")
    rng = np.random.default_rng([seed, LABELS.index(label)])
    img = _background(rng, (h, w), complex_bg=rng.random() < 0.35)
    side = min(h, w)
    mask = np.zeros((h, w), dtype=np.uint8)
    taken = []
    if label == TOAD:
        styles = [TOAD_STYLE] * int(rng.integers(1, 4))
    else:
        species = list(DISTRACTOR_STYLES)[int(rng.integers(len(DISTRACTOR_STYLES)))]
        styles = [DISTRACTOR_STYLES[species]] * int(rng.integers(0, 4))
    for style in styles:
        aspect = rng.uniform(*style["aspect"])
        # toads and frogs share a similar body area, so size alone is no cue
        area = (rng.uniform(0.085, 0.13) * side) ** 2
        semi_minor = math.sqrt(area / aspect)
        semi_major = semi_minor * aspect
        angle = rng.uniform(0, np.pi)
        half_h, half_w = _ellipse_half_extents(semi_major, semi_minor, angle)
        center, box = _place(rng, (h, w), half_h, half_w, taken, margin=3)
        if center is None:
            if taken:
                continue
            center = (h / 2.0, w / 2.0)
            box = (h / 2.0 - half_h, h / 2.0 + half_h, w / 2.0 - half_w, w / 2.0 + half_w)
        taken.append(box)
        _draw_animal(img, rng, center, semi_major, semi_minor, angle, style["texture"])
        if label == TOAD:
            r0, r1 = max(0, int(math.floor(box[0]))), min(h - 1, int(math.ceil(box[1])))
            c0, c1 = max(0, int(math.floor(box[2]))), min(w - 1, int(math.ceil(box[3])))
            mask[r0:r1 + 1, c0:c1 + 1] = 255
    img = img + rng.normal(0.0, 3.0, img.shape).astype(np.float32)
    # lens/demosaic softening: without it the iid sensor noise is sharper than
    # anything seen after the training warps' bilinear resampling
    img = cv2.GaussianBlur(img, (0, 0), OPTICS_SIGMA)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    clip = clip_id if clip_id is not None else f"synth{seed}"
    return FrameRecord(clip, frame_index, image, label, mask if label == TOAD else None)


# -- disk I/O ---------------------------------------------------------------

def read_image(path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DatasetError(f"unreadable image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def read_mask(path) -> np.ndarray:
    mask = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise DatasetError(f"unreadable mask {path}")
    return mask


def frame_filename(clip_id: str, frame_index: int) -> str:
    return f"{clip_id}_{frame_index:06d}.png"


def write_record(root, record: FrameRecord) -> RecordRef:
    root = Path(root)
    name = frame_filename(record.clip_id, record.frame_index)
    image_path = root / record.label / name
    image_path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(image_path), cv2.cvtColor(record.image, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {image_path}")
    mask_path = None
    if record.label == TOAD:
        mask_path = root / MASK_DIR / name
        mask_path.parent.mkdir(parents=True, exist_ok=True)
        if not cv2.imwrite(str(mask_path), np.where(record.mask != 0, 255, 0).astype(np.uint8)):
            raise OSError(f"could not write {mask_path}")
    return RecordRef(record.clip_id, record.frame_index, record.label, image_path, mask_path)


def save_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path is not None else Path(manifest.root) / MANIFEST_NAME
    path.write_text(json.dumps(manifest.to_json(), indent=1))
    return path


def _scan(root: Path) -> list[RecordRef]:
    refs = []
    for label in LABELS:
        label_dir = root / label
        if not label_dir.is_dir():
            continue
        for image_path in sorted(label_dir.glob("*.png")):
            m = _NAME_RE.match(image_path.name)
            if m is None:
                raise DatasetError(f"cannot parse clip/frame from {image_path.name}")
            mask_path = root / MASK_DIR / image_path.name
            if label == TOAD and not mask_path.exists():
                raise DatasetError(f"missing mask for {image_path}")
            refs.append(RecordRef(m["clip"], int(m["frame"]), label, image_path,
                                  mask_path if label == TOAD else None))
    return refs


def load_manifest(path, split_seed: int = 0, validate: bool = True) -> DatasetManifest:
    """Build a manifest from a dataset root (or its ``manifest.json`` cache).

    With ``validate`` every image is decoded once to check shape and mask
    pairing.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if path.is_file():
        root = path.parent
        doc = json.loads(path.read_text())
        split_seed = doc.get("split_seed", split_seed)
        refs = []
        for item in doc["records"]:
            if item["label"] == TOAD and not item.get("mask"):
                raise DatasetError(f"missing mask for {item['image']}")
            refs.append(RecordRef(item["clip_id"], int(item["frame_index"]), item["label"],
                                  root / item["image"],
                                  root / item["mask"] if item.get("mask") else None))
    else:
        root = path
        refs = _scan(root)

    seen = set()
    for ref in refs:
        key = (ref.clip_id, ref.frame_index)
        if key in seen:
            raise DatasetError(f"duplicate record {ref.clip_id} frame {ref.frame_index}")
        seen.add(key)
    if validate:
        for ref in refs:
            ref.load()
    return DatasetManifest(refs, split_seed, root)


def clip_frames(count: int, frames_per_clip: int, split: str) -> list[tuple[int, int]]:
    """(clip number, frame index) slots filled clip by clip under a sampling rule."""
    if split == "train":
        indices = extract_training_indices(frames_per_clip)
    elif split == "test":
        indices = extract_test_indices(frames_per_clip)
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if count and not indices:
        raise ValueError(f"clips of {frames_per_clip} frames yield no {split} frames")
    return [(k // len(indices), indices[k % len(indices)]) for k in range(count)]


def frame_seed(seed: int, label: str, clip: int, frame_index: int) -> int:
    ss = np.random.SeedSequence([seed, LABELS.index(label), clip, frame_index])
    return int(ss.generate_state(1)[0])


def synth_records(counts: dict, seed: int, shape: tuple[int, int], split: str,
                  frames_per_clip: int = 300):
    """Yield synthetic FrameRecords named as if sampled from video clips.

    Clip ``k`` of each label is shared between splits; the train and test
    sampling rules pick disjoint frame indices, so no frame is reused.
    """
    for label in LABELS:
        for clip, frame in clip_frames(int(counts.get(label, 0)), frames_per_clip, split):
            clip_id = f"{label.replace('_', '')}{clip:03d}"
            yield synth_scene(frame_seed(seed, label, clip, frame), label, shape,
                              clip_id=clip_id, frame_index=frame)


def write_dataset(root, records, split_seed: int = 0) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    refs = [write_record(root, r) for r in records]
    manifest = DatasetManifest(refs, split_seed, root)
    save_manifest(manifest)
    return manifest
