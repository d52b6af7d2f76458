"""Procedural driving-scene benchmark.

Each sample is a short schematic clip on the unit square: a road band with a
brighter ego-lane strip down the middle, off-road margins in distinct tones,
and a handful of flat-shaded objects. Exactly one object (the risk object)
crosses or enters the ego lane during the clip; everything else stays clear
of it. The sample carries a low-resolution clip, a high-resolution last
frame, a templated caption, and the risk object's ground-truth box measured
from the rendered high-resolution mask.

Scenes flagged hr-critical draw the risk object small enough that the
low-resolution rasterizer culls it (objects thinner than two pixels are not
drawn), while it still spans at least six pixels in the high-resolution
frame. Such objects are genuinely invisible to a low-resolution-only model.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import SceneConfig
from .grammar import CLASS_COLORS, CLASSES, make_caption
from .rng import named_rng

ROAD_X = (0.15, 0.85)
BAND_X = (0.40, 0.60)

MIN_DRAW_PX = 2.0
HR_CRITICAL_MIN_HR_PX = 6.0

BG_LEFT = (92, 130, 92)
BG_ROAD = (70, 70, 75)
BG_BAND = (98, 98, 104)
BG_RIGHT = (132, 116, 88)

OBJECT_RGB = {
    "red": (200, 40, 40),
    "blue": (50, 80, 200),
    "green": (40, 170, 60),
    "yellow": (230, 210, 40),
    "orange": (240, 140, 30),
    "gray": (150, 150, 155),
    "white": (245, 245, 245),
}

# (shape, width multiplier, height multiplier) applied to the scalar size,
# which is always the smaller dimension
CLASS_SHAPE = {
    "car": ("rect", 1.5, 1.0),
    "truck": ("rect", 2.0, 1.0),
    "pedestrian": ("rect", 1.0, 2.0),
    "cone": ("tri", 1.0, 1.2),
    "light": ("circle", 1.0, 1.0),
}

SCENARIOS = ("end_in_band", "cross_right", "cross_left")
SCENARIO_PROBS = (0.5, 0.25, 0.25)

SCENARIO_MOTION = {
    "end_in_band": "into_band",
    "cross_right": "cross_right",
    "cross_left": "cross_left",
}
SCENARIO_POSITION = {
    "end_in_band": "in_band",
    "cross_right": "right",
    "cross_left": "left",
}


@dataclass
class SceneObject:
    obj_class: str
    color: str
    size: float
    centers: np.ndarray  # [L, 2] (cx, cy) per frame

    @property
    def wh(self) -> tuple[float, float]:
        _, mw, mh = CLASS_SHAPE[self.obj_class]
        return self.size * mw, self.size * mh

    def extent_x(self, t: int) -> tuple[float, float]:
        w, _ = self.wh
        cx = self.centers[t, 0]
        return cx - w / 2.0, cx + w / 2.0


@dataclass
class SceneSample:
    clip: np.ndarray  # uint8 [L, lr, lr, 3]
    hr: np.ndarray  # uint8 [hr, hr, 3]
    caption: str
    box: tuple  # normalized (x1, y1, x2, y2)
    risk_class: str
    color: str
    motion_key: str
    position_key: str
    suggestion_idx: int
    bucket: str
    distractor: bool
    hr_critical: bool
    scenario: str
    seed: int

    def meta(self) -> dict:
        return {
            "caption": self.caption,
            "box": [float(v) for v in self.box],
            "risk_class": self.risk_class,
            "color": self.color,
            "motion_key": self.motion_key,
            "position_key": self.position_key,
            "suggestion_idx": int(self.suggestion_idx),
            "bucket": self.bucket,
            "distractor": bool(self.distractor),
            "hr_critical": bool(self.hr_critical),
            "scenario": self.scenario,
            "seed": int(self.seed),
        }


# -- geometry ------------------------------------------------------------------


def overlaps_band(lo: float, hi: float) -> bool:
    return hi >= BAND_X[0] and lo <= BAND_X[1]


def risk_frames(obj: SceneObject, n_frames: int) -> list[int]:
    return [t for t in range(n_frames) if overlaps_band(*obj.extent_x(t))]


def size_bucket(box) -> str:
    area = max(box[2] - box[0], 0.0) * max(box[3] - box[1], 0.0)
    if area < 0.01:
        return "S"
    if area < 0.09:
        return "M"
    return "L"


# -- rasterizer ----------------------------------------------------------------


def _shape_mask(obj: SceneObject, t: int, size: int) -> np.ndarray:
    shape, _, _ = CLASS_SHAPE[obj.obj_class]
    w, h = obj.wh
    cx, cy = obj.centers[t]
    coords = (np.arange(size) + 0.5) / size
    xg = coords[None, :]
    yg = coords[:, None]
    if shape == "rect":
        return (np.abs(xg - cx) <= w / 2.0) & (np.abs(yg - cy) <= h / 2.0)
    if shape == "circle":
        return ((xg - cx) / (w / 2.0)) ** 2 + ((yg - cy) / (h / 2.0)) ** 2 <= 1.0
    if shape == "tri":
        inside_y = (yg >= cy - h / 2.0) & (yg <= cy + h / 2.0)
        halfw = (w / 2.0) * np.clip((yg - (cy - h / 2.0)) / h, 0.0, 1.0)
        return inside_y & (np.abs(xg - cx) <= halfw)
    raise ValueError(shape)


def render_frame(objects: list[SceneObject], t: int, size: int,
                 min_draw_px: float = MIN_DRAW_PX) -> np.ndarray:
    """Rasterize one frame; objects thinner than min_draw_px are culled."""
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    xg = (np.arange(size) + 0.5) / size
    canvas[:] = BG_LEFT
    canvas[:, xg >= ROAD_X[0]] = BG_ROAD
    canvas[:, xg >= BAND_X[0]] = BG_BAND
    canvas[:, xg > BAND_X[1]] = BG_ROAD
    canvas[:, xg > ROAD_X[1]] = BG_RIGHT
    for obj in objects:
        w, h = obj.wh
        if min(w, h) * size < min_draw_px:
            continue
        mask = _shape_mask(obj, t, size)
        canvas[mask] = OBJECT_RGB[obj.color]
    return canvas


def mask_box(obj: SceneObject, t: int, size: int) -> tuple:
    """Pixel-tight normalized box of the object's rendered mask."""
    mask = _shape_mask(obj, t, size)
    if not mask.any():
        raise RuntimeError("risk object rendered to an empty mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (
        cols[0] / size,
        rows[0] / size,
        (cols[-1] + 1) / size,
        (rows[-1] + 1) / size,
    )


# -- scene construction --------------------------------------------------------


def _linear_track(x0, y0, x1, y1, n):
    f = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - f) * np.array([x0, y0]) + f * np.array([x1, y1])


def _risk_size(rng, obj_class: str, hr_critical: bool, hr_size: int, lr_size: int) -> float:
    if hr_critical:
        lo = HR_CRITICAL_MIN_HR_PX / hr_size
        hi = MIN_DRAW_PX / lr_size
        return float(rng.uniform(lo, hi * 0.999))
    _, mw, mh = CLASS_SHAPE[obj_class]
    # cap so the crossing start/end regions beside the band stay non-empty
    cap = min(0.34 / mw, 0.34 / mh, 0.30)
    return float(rng.uniform(MIN_DRAW_PX / lr_size * 1.15, cap))


def _sample_risk_object(rng, scenario: str, hr_critical: bool, cfg: SceneConfig):
    obj_class = str(rng.choice(CLASSES))
    color = str(rng.choice(CLASS_COLORS[obj_class]))
    size = _risk_size(rng, obj_class, hr_critical, cfg.hr_size, cfg.lr_size)
    _, mw, mh = CLASS_SHAPE[obj_class]
    w, h = size * mw, size * mh
    hw, hh = w / 2.0, h / 2.0
    left_lo, left_hi = hw + 0.01, BAND_X[0] - hw - 0.005
    right_lo, right_hi = BAND_X[1] + hw + 0.005, 1.0 - hw - 0.01
    for _ in range(200):
        if scenario == "end_in_band":
            if rng.random() < 0.5:
                x0 = rng.uniform(left_lo, left_hi)
            else:
                x0 = rng.uniform(right_lo, right_hi)
            x1 = rng.uniform(BAND_X[0] + 0.015, BAND_X[1] - 0.015)
        elif scenario == "cross_right":
            x0 = rng.uniform(left_lo, left_hi)
            x1 = rng.uniform(right_lo, right_hi)
        else:  # cross_left
            x0 = rng.uniform(right_lo, right_hi)
            x1 = rng.uniform(left_lo, left_hi)
        y0 = rng.uniform(hh + 0.02, 1.0 - hh - 0.02)
        y1 = float(np.clip(y0 + rng.uniform(-0.08, 0.08), hh + 0.01, 1.0 - hh - 0.01))
        obj = SceneObject(obj_class, color, size, _linear_track(x0, y0, x1, y1, cfg.clip_len))
        if risk_frames(obj, cfg.clip_len):
            return obj
    raise RuntimeError(f"could not place a valid risk object for scenario {scenario}")


def _offband_position(rng, hw: float, hh: float):
    """A static spot whose x-extent stays clear of the ego band."""
    left_lo, left_hi = hw + 0.01, BAND_X[0] - hw - 0.02
    right_lo, right_hi = BAND_X[1] + hw + 0.02, 1.0 - hw - 0.01
    sides = []
    if left_lo < left_hi:
        sides.append((left_lo, left_hi))
    if right_lo < right_hi:
        sides.append((right_lo, right_hi))
    if not sides:
        return None
    lo, hi = sides[int(rng.integers(len(sides)))]
    x = rng.uniform(lo, hi)
    y = rng.uniform(hh + 0.02, 1.0 - hh - 0.02)
    return x, y


def _sample_distractor(rng, risk: SceneObject, n_frames: int):
    """A static, strictly larger, high-contrast object well off the ego band."""
    choices = [c for c in CLASSES if c != risk.obj_class]
    obj_class = str(rng.choice(choices))
    _, mw, mh = CLASS_SHAPE[obj_class]
    cap = min(0.36 / mw, 0.36 / mh)
    size = float(min(max(1.8 * risk.size, 0.09), cap))
    w, h = size * mw, size * mh
    pos = _offband_position(rng, w / 2.0, h / 2.0)
    if pos is None:
        return None
    centers = np.tile(np.array(pos), (n_frames, 1))
    return SceneObject(obj_class, "white", size, centers)


def _sample_clutter(rng, n_frames: int):
    obj_class = str(rng.choice(CLASSES))
    color = str(rng.choice(CLASS_COLORS[obj_class]))
    size = float(rng.uniform(0.03, 0.09))
    _, mw, mh = CLASS_SHAPE[obj_class]
    pos = _offband_position(rng, size * mw / 2.0, size * mh / 2.0)
    if pos is None:
        return None
    centers = np.tile(np.array(pos), (n_frames, 1))
    return SceneObject(obj_class, color, size, centers)


def generate_scene(seed: int, cfg: SceneConfig) -> SceneSample:
    rng = named_rng(seed, "scene")
    scenario = SCENARIOS[int(rng.choice(len(SCENARIOS), p=SCENARIO_PROBS))]
    hr_critical = bool(rng.random() < cfg.hr_critical_frac)
    risk = _sample_risk_object(rng, scenario, hr_critical, cfg)

    objects = []
    for _ in range(int(rng.integers(0, cfg.max_clutter + 1))):
        c = _sample_clutter(rng, cfg.clip_len)
        if c is not None:
            objects.append(c)
    has_distractor = bool(rng.random() < cfg.distractor_frac)
    if has_distractor:
        d = _sample_distractor(rng, risk, cfg.clip_len)
        if d is None:
            has_distractor = False
        else:
            objects.append(d)
    objects.append(risk)  # drawn last, never occluded

    clip = np.stack(
        [render_frame(objects, t, cfg.lr_size) for t in range(cfg.clip_len)]
    )
    hr = render_frame(objects, cfg.clip_len - 1, cfg.hr_size)
    box = mask_box(risk, cfg.clip_len - 1, cfg.hr_size)

    suggestion_idx = int(rng.integers(0, 20))
    motion_key = SCENARIO_MOTION[scenario]
    position_key = SCENARIO_POSITION[scenario]
    caption = make_caption(risk.color, risk.obj_class, motion_key, position_key, suggestion_idx)

    return SceneSample(
        clip=clip,
        hr=hr,
        caption=caption,
        box=box,
        risk_class=risk.obj_class,
        color=risk.color,
        motion_key=motion_key,
        position_key=position_key,
        suggestion_idx=suggestion_idx,
        bucket=size_bucket(box),
        distractor=has_distractor,
        hr_critical=hr_critical,
        scenario=scenario,
        seed=seed,
    )


# -- dataset -------------------------------------------------------------------


@dataclass
class SceneDataset:
    clips: np.ndarray  # uint8 [N, L, lr, lr, 3]
    hrs: np.ndarray  # uint8 [N, hr, hr, 3]
    meta: list[dict] = field(default_factory=list)

    def __len__(self):
        return self.clips.shape[0]

    @classmethod
    def generate(cls, cfg: SceneConfig, split: str) -> "SceneDataset":
        if split == "train":
            seeds = [cfg.seed + i for i in range(cfg.n_train)]
        elif split == "test":
            seeds = [cfg.seed + cfg.n_train + i for i in range(cfg.n_test)]
        else:
            raise ValueError(f"unknown split '{split}'")
        samples = [generate_scene(s, cfg) for s in seeds]
        return cls(
            clips=np.stack([s.clip for s in samples]),
            hrs=np.stack([s.hr for s in samples]),
            meta=[s.meta() for s in samples],
        )


# -- on-disk format ------------------------------------------------------------

MAGIC = b"HRSK"
_DTYPES = {0: np.uint8, 1: np.float32, 2: np.float64, 3: np.int64, 4: np.int32}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def write_array(fh, arr: np.ndarray) -> None:
    code = _DTYPE_CODES[arr.dtype]
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def read_array(fh) -> np.ndarray:
    code, ndim = struct.unpack("<BB", fh.read(2))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dtype = np.dtype(_DTYPES[code])
    n = int(np.prod(shape)) * dtype.itemsize
    return np.frombuffer(fh.read(n), dtype=dtype).reshape(shape).copy()


def save_dataset(ds: SceneDataset, cfg: SceneConfig, out_dir: str, split: str) -> None:
    split_dir = os.path.join(out_dir, split)
    os.makedirs(split_dir, exist_ok=True)
    files = []
    for i in range(len(ds)):
        name = f"sample_{i:05d}.bin"
        with open(os.path.join(split_dir, name), "wb") as fh:
            fh.write(MAGIC)
            write_array(fh, ds.clips[i])
            write_array(fh, ds.hrs[i])
        files.append(name)
    manifest = {
        "version": 1,
        "split": split,
        "config": {
            "n_train": cfg.n_train,
            "n_test": cfg.n_test,
            "seed": cfg.seed,
            "clip_len": cfg.clip_len,
            "lr_size": cfg.lr_size,
            "hr_size": cfg.hr_size,
            "hr_critical_frac": cfg.hr_critical_frac,
            "distractor_frac": cfg.distractor_frac,
            "max_clutter": cfg.max_clutter,
        },
        "samples": [dict(m, file=f) for m, f in zip(ds.meta, files)],
    }
    with open(os.path.join(out_dir, f"{split}_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(out_dir: str, split: str) -> SceneDataset:
    with open(os.path.join(out_dir, f"{split}_manifest.json")) as fh:
        manifest = json.load(fh)
    clips, hrs, meta = [], [], []
    for rec in manifest["samples"]:
        path = os.path.join(out_dir, split, rec["file"])
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise ValueError(f"bad magic in {path}")
            clips.append(read_array(fh))
            hrs.append(read_array(fh))
        meta.append({k: v for k, v in rec.items() if k != "file"})
    return SceneDataset(np.stack(clips), np.stack(hrs), meta)


# -- external annotation import ------------------------------------------------


def import_annotations(path: str) -> list[dict]:
    """Load an external JSON annotation list, normalizing pixel boxes.

    Each record needs `width`, `height`, a `caption`, and either
    `bbox_xyxy` ([x1, y1, x2, y2] in pixels) or `bbox_xywh`
    ([x, y, w, h], corner plus size). Output boxes are corner-form floats
    normalized by the image dimensions and clamped to [0, 1].
    """
    with open(path) as fh:
        records = json.load(fh)
    out = []
    for rec in records:
        w, h = float(rec["width"]), float(rec["height"])
        if w <= 0 or h <= 0:
            raise ValueError("image dimensions must be positive")
        if "bbox_xyxy" in rec:
            x1, y1, x2, y2 = (float(v) for v in rec["bbox_xyxy"])
        elif "bbox_xywh" in rec:
            x, y, bw, bh = (float(v) for v in rec["bbox_xywh"])
            x1, y1, x2, y2 = x, y, x + bw, y + bh
        else:
            raise KeyError("record has neither bbox_xyxy nor bbox_xywh")
        box = (
            min(max(x1 / w, 0.0), 1.0),
            min(max(y1 / h, 0.0), 1.0),
            min(max(x2 / w, 0.0), 1.0),
            min(max(y2 / h, 0.0), 1.0),
        )
        out.append({"caption": rec["caption"], "box": box})
    return out
