"""Deterministic synthetic two-domain detection corpus.

Source images are clean colored shapes (disk / square / triangle) on a dark
background; target images are color-shifted, blurred, fogged and noised
variants of independently drawn scenes. A proposal generator stands in for a
region proposal network: redundant jittered copies of every ground-truth box
plus a few background boxes.

Everything is a pure function of (spec, seed). Target-domain ground truth is
carried for evaluation but fenced off from training code paths.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .grouping import BoundingBox, Proposal, ProposalSet
from .losses import rgb_to_grayscale

SHAPE_CLASS_IDS = {"disk": 1, "square": 2, "triangle": 3}
CLASS_NAMES = {0: "background", 1: "disk", 2: "square", 3: "triangle"}

_DEFAULT_PALETTE = (
    (0.85, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.25, 0.35, 0.90),
    (0.90, 0.80, 0.20),
    (0.80, 0.25, 0.80),
    (0.20, 0.80, 0.80),
)

# class id -> palette slots used when colors are class-correlated
_CLASS_PALETTE_SLOTS = {1: (0, 3), 2: (1, 5), 3: (2, 4)}


class PlacementError(RuntimeError):
    """Objects could not be placed without overlap within the retry budget."""


class LabelQuarantineError(RuntimeError):
    """Target-domain ground truth was touched through a training-path accessor."""


@dataclass
class SceneSpec:
    canvas: tuple = (64, 64)
    object_count_range: tuple = (2, 4)
    shapes: tuple = ("disk", "square", "triangle")
    palette: tuple = _DEFAULT_PALETTE
    background: tuple = (0.15, 0.16, 0.19)
    radius_range: tuple = (5.0, 9.0)
    # tie object colors to their class (plus brightness jitter) so the toy
    # detector has a learnable cue that the domain shift then attacks
    color_by_class: bool = True

    def validate(self):
        if self.canvas[0] < 32 or self.canvas[1] < 32:
            raise ValueError("canvas must be at least 32x32")
        if self.object_count_range[0] < 1:
            raise ValueError("minimum object count must be >= 1")
        if self.object_count_range[0] > self.object_count_range[1]:
            raise ValueError("object count range is inverted")
        unknown = set(self.shapes) - set(SHAPE_CLASS_IDS)
        if unknown or not self.shapes:
            raise ValueError(f"unsupported shapes: {sorted(unknown)}")


@dataclass
class DomainShiftSpec:
    color_shift: tuple = (-0.22, 0.05, 0.20)
    fog_alpha: float = 0.45
    blur_radius: float = 1.0
    noise_std: float = 0.02

    def validate(self):
        vals = (*self.color_shift, self.fog_alpha, self.blur_radius, self.noise_std)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("shift parameters must be finite")
        if not 0.0 <= self.fog_alpha <= 1.0:
            raise ValueError("fog_alpha must lie in [0, 1]")


@dataclass
class ProposalNoiseSpec:
    jitter_std: float = 2.0
    redundancy: int = 6
    background_count: int = 2
    background_margin: float = 12.0

    def validate(self):
        if self.redundancy < 1:
            raise ValueError("redundancy must be >= 1")
        if self.background_count < 0 or self.background_margin < 0:
            raise ValueError("background settings must be non-negative")


class Sample:
    """One image with ground truth; target-domain truth is evaluation-only.

    `boxes` / `labels` raise for target samples so the training loop cannot
    read them by accident; evaluation code uses `eval_boxes()` /
    `eval_labels()`.
    """

    def __init__(self, image_id, domain, rgb, gray, boxes, labels):
        if domain not in ("source", "target"):
            raise ValueError("domain must be 'source' or 'target'")
        self.image_id = image_id
        self.domain = domain
        self.rgb = np.asarray(rgb, dtype=np.float64)
        self.gray = np.asarray(gray, dtype=np.float64)
        self._boxes = list(boxes)
        self._labels = [int(v) for v in labels]

    @property
    def boxes(self):
        if self.domain == "target":
            raise LabelQuarantineError(
                "target ground truth is evaluation-only; use eval_boxes()"
            )
        return self._boxes

    @property
    def labels(self):
        if self.domain == "target":
            raise LabelQuarantineError(
                "target ground truth is evaluation-only; use eval_labels()"
            )
        return self._labels

    def eval_boxes(self):
        return list(self._boxes)

    def eval_labels(self):
        return list(self._labels)

    def image_hw(self):
        return self.rgb.shape[1], self.rgb.shape[2]


def _shape_mask(shape, cx, cy, r, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    x = xx + 0.5
    y = yy + 0.5
    if shape == "disk":
        return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    if shape == "square":
        return (np.abs(x - cx) <= r) & (np.abs(y - cy) <= r)
    # upward triangle with vertices (cx, cy-r), (cx-r, cy+r), (cx+r, cy+r)
    inside = y <= cy + r
    # left edge from apex to bottom-left, right edge mirrored
    inside &= (y - (cy - r)) >= 2.0 * (cx - x)
    inside &= (y - (cy - r)) >= 2.0 * (x - cx)
    return inside


def _boxes_overlap(a, b, gap=2.0):
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    return not (
        ax1 + gap <= bx0 or bx1 + gap <= ax0 or ay1 + gap <= by0 or by1 + gap <= ay0
    )


def generate_scene(spec=None, seed=0):
    """Build one source-domain scene: non-overlapping shapes, tight boxes."""
    spec = spec or SceneSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.canvas
    rgb = np.empty((3, h, w))
    for c in range(3):
        rgb[c] = spec.background[c]
    count = int(rng.integers(spec.object_count_range[0], spec.object_count_range[1] + 1))
    boxes, labels = [], []
    for _ in range(count):
        placed = False
        for _ in range(200):
            r = float(rng.uniform(*spec.radius_range))
            cx = float(rng.uniform(r + 2.0, w - r - 2.0))
            cy = float(rng.uniform(r + 2.0, h - r - 2.0))
            box = BoundingBox(bx=cx, by=cy, w=2 * r, h=2 * r)
            if all(not _boxes_overlap(box, b) for b in boxes):
                placed = True
                break
        if not placed:
            raise PlacementError("could not place objects without overlap")
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        class_id = SHAPE_CLASS_IDS[shape]
        if spec.color_by_class:
            slots = _CLASS_PALETTE_SLOTS[class_id]
            slot = slots[int(rng.integers(len(slots)))] % len(spec.palette)
            tint = float(rng.uniform(0.85, 1.15))
            color = np.clip(np.asarray(spec.palette[slot]) * tint, 0.0, 1.0)
        else:
            color = np.asarray(spec.palette[int(rng.integers(len(spec.palette)))])
        mask = _shape_mask(shape, cx, cy, r, h, w)
        for c in range(3):
            rgb[c][mask] = color[c]
        boxes.append(box)
        labels.append(SHAPE_CLASS_IDS[shape])
    return Sample(
        image_id=f"s{seed}",
        domain="source",
        rgb=rgb,
        gray=rgb_to_grayscale(rgb),
        boxes=boxes,
        labels=labels,
    )


def _gaussian_blur(img, sigma):
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(t * t) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        padded = np.pad(img[c], radius, mode="reflect")
        rows = np.apply_along_axis(
            lambda v: np.convolve(v, kernel, mode="valid"), 1, padded
        )
        out[c] = np.apply_along_axis(
            lambda v: np.convolve(v, kernel, mode="valid"), 0, rows
        )
    return out


def apply_domain_shift(sample, shift=None, seed=0):
    """Map a source sample into the target domain.

    Order: color offset, Gaussian blur, white fog alpha-blend, additive
    noise, clip to [0, 1]; grayscale is recomputed. Ground truth rides along
    but becomes evaluation-only.
    """
    shift = shift or DomainShiftSpec()
    shift.validate()
    if sample.domain != "source":
        raise ValueError("domain shift applies to source samples")
    rng = np.random.default_rng(seed)
    rgb = sample.rgb.copy()
    rgb += np.asarray(shift.color_shift, dtype=np.float64)[:, None, None]
    if shift.blur_radius > 0:
        rgb = _gaussian_blur(rgb, shift.blur_radius)
    if shift.fog_alpha > 0:
        rgb = (1.0 - shift.fog_alpha) * rgb + shift.fog_alpha
    if shift.noise_std > 0:
        rgb = rgb + rng.normal(0.0, shift.noise_std, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    return Sample(
        image_id=sample.image_id + "t",
        domain="target",
        rgb=rgb,
        gray=rgb_to_grayscale(rgb),
        boxes=sample.eval_boxes(),
        labels=sample.eval_labels(),
    )


def _box_feature(rgb, box):
    """Mean RGB inside the (clipped) box; generation-time stand-in feature."""
    _, h, w = rgb.shape
    x0, y0, x1, y1 = box.corners()
    j0, j1 = max(int(math.floor(x0)), 0), min(int(math.ceil(x1)), w)
    i0, i1 = max(int(math.floor(y0)), 0), min(int(math.ceil(y1)), h)
    if j1 <= j0 or i1 <= i0:
        return rgb.mean(axis=(1, 2))
    return rgb[:, i0:i1, j0:j1].mean(axis=(1, 2))


def generate_proposals(sample, noise=None, seed=0):
    """Redundant noisy proposals around the ground-truth boxes plus background.

    Each ground-truth box yields `redundancy` copies with Gaussian-jittered
    centers and sizes jittered within +-10% (jitter_std = 0 disables both, so
    proposals equal the ground truth exactly). `background_count` boxes land
    uniformly at least `background_margin` away from every object center.
    """
    noise = noise or ProposalNoiseSpec()
    noise.validate()
    rng = np.random.default_rng(seed)
    gt_boxes = sample.eval_boxes()
    if not gt_boxes:
        raise ValueError("sample has no ground-truth boxes")
    h, w = sample.image_hw()
    proposals = []
    for gt in gt_boxes:
        for _ in range(noise.redundancy):
            if noise.jitter_std > 0:
                dx, dy = rng.normal(0.0, noise.jitter_std, size=2)
                sw, sh = 1.0 + rng.uniform(-0.1, 0.1, size=2)
            else:
                dx = dy = 0.0
                sw = sh = 1.0
            box = BoundingBox(
                bx=min(max(gt.bx + dx, 1.0), w - 1.0),
                by=min(max(gt.by + dy, 1.0), h - 1.0),
                w=gt.w * sw,
                h=gt.h * sh,
            )
            proposals.append(
                Proposal(
                    box=box,
                    feature=_box_feature(sample.rgb, box),
                    objectness=float(rng.uniform(0.6, 1.0)),
                )
            )
    centers = np.array([[b.bx, b.by] for b in gt_boxes])
    for _ in range(noise.background_count):
        for _ in range(2000):
            bx = float(rng.uniform(4.0, w - 4.0))
            by = float(rng.uniform(4.0, h - 4.0))
            d = np.sqrt(((centers - [bx, by]) ** 2).sum(axis=1)).min()
            if d >= noise.background_margin:
                break
        else:
            raise PlacementError("background margin unsatisfiable")
        box = BoundingBox(
            bx=bx, by=by, w=float(rng.uniform(8.0, 14.0)), h=float(rng.uniform(8.0, 14.0))
        )
        proposals.append(
            Proposal(
                box=box,
                feature=_box_feature(sample.rgb, box),
                objectness=float(rng.uniform(0.2, 0.7)),
            )
        )
    return ProposalSet(proposals=proposals, image_id=sample.image_id)


# ---------------------------------------------------------------------------
# corpus on disk
# ---------------------------------------------------------------------------

def write_ppm(path, rgb):
    """8-bit binary PPM (P6)."""
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def sample_labels_dict(sample):
    return {
        "image_id": sample.image_id,
        "domain": sample.domain,
        "boxes": [[b.bx, b.by, b.w, b.h] for b in sample.eval_boxes()],
        "labels": sample.eval_labels(),
    }


def load_sample(image_path, labels_path):
    rgb = read_ppm(image_path)
    with open(labels_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return Sample(
        image_id=meta["image_id"],
        domain=meta["domain"],
        rgb=rgb,
        gray=rgb_to_grayscale(rgb),
        boxes=[BoundingBox(*b) for b in meta["boxes"]],
        labels=meta["labels"],
    )


def scene_seed(base_seed, domain, index):
    """Stable per-sample seed stream."""
    code = 0 if domain == "source" else 1
    return np.random.SeedSequence([int(base_seed), code, int(index)])


def build_pair_corpus(scene_spec, shift_spec, noise_spec, n, base_seed):
    """n source and n target samples (independent scenes) with proposals."""
    source, target = [], []
    for i in range(n):
        ss = scene_seed(base_seed, "source", i)
        scene_ss, prop_ss = ss.spawn(2)
        s = generate_scene(scene_spec, seed=scene_ss)
        s.image_id = f"src{i:05d}"
        source.append((s, generate_proposals(s, noise_spec, seed=prop_ss)))
    for i in range(n):
        ss = scene_seed(base_seed, "target", i)
        scene_ss, shift_ss, prop_ss = ss.spawn(3)
        base = generate_scene(scene_spec, seed=scene_ss)
        t = apply_domain_shift(base, shift_spec, seed=shift_ss)
        t.image_id = f"tgt{i:05d}"
        target.append((t, generate_proposals(t, noise_spec, seed=prop_ss)))
    return source, target
