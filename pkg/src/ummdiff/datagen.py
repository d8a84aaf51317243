"""Synthetic subject/caption/image corpus.

Scenes are a flat-coloured background with one or two solid shapes. The
renderer knows every box exactly, so it plays the role of the object
detector; captions are templated and subject positions are recovered by
matching each box label against the caption tokens.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import imageio

MANIFEST_SCHEMA_VERSION = 1

SHAPE_COLORS = {
    "red": (0.9, -0.8, -0.8),
    "yellow": (0.95, 0.85, -0.85),
    "blue": (-0.85, -0.55, 0.95),
    "white": (0.9, 0.9, 0.9),
}
BACKGROUNDS = {
    "grass": (-0.45, 0.15, -0.55),
    "sand": (0.35, 0.15, -0.25),
    "night": (-0.75, -0.75, -0.45),
    "sky": (-0.25, 0.05, 0.55),
}
SHAPES = ("square", "circle", "triangle", "cross")


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` footprint of a shape filling its bounding box."""
    r = np.arange(size) + 0.5
    yy, xx = np.meshgrid(r, r, indexing="ij")
    half = size / 2.0
    if shape == "square":
        m = np.ones((size, size), bool)
    elif shape == "circle":
        m = (yy - half) ** 2 + (xx - half) ** 2 <= half * half + 0.25
    elif shape == "triangle":
        m = np.abs(xx - half) <= half * yy / size + 0.25
    elif shape == "cross":
        arm = max(size / 6.0, 0.75)
        m = (np.abs(yy - half) <= arm + 0.25) | (np.abs(xx - half) <= arm + 0.25)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


@dataclass
class GrammarConfig:
    shapes: tuple = SHAPES
    colors: tuple = tuple(SHAPE_COLORS)
    backgrounds: tuple = tuple(BACKGROUNDS)
    size: int = 16
    min_box: int = 5
    max_box: int = 11
    two_object_prob: float = 0.3
    color_prob: float = 0.5          # chance a caption names an object's colour
    mention_prob: float = 1.0        # chance a second object is named at all
    duplicate_prob: float = 0.04     # second object deliberately reuses the first shape
    low_res_prob: float = 0.04       # scene rendered at half resolution
    texture: float = 0.05

    def vocabulary_words(self) -> list[str]:
        words = ["a", "and", "on"]
        words += list(self.colors) + list(self.shapes) + list(self.backgrounds)
        return words

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GrammarConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class SceneObject:
    shape: str
    color: str
    box: tuple  # (y0, x0, y1, x1), half-open, in pixels

    @property
    def area(self) -> int:
        y0, x0, y1, x1 = self.box
        return (y1 - y0) * (x1 - x0)


@dataclass
class Scene:
    background: str
    objects: list
    resolution: int

    def to_dict(self) -> dict:
        return {"background": self.background, "resolution": self.resolution,
                "objects": [{"shape": o.shape, "color": o.color, "box": list(o.box)} for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(d["background"], [SceneObject(o["shape"], o["color"], tuple(o["box"]))
                                     for o in d["objects"]], d["resolution"])


def render(scene: Scene, rng: np.random.Generator | None = None, texture: float = 0.0) -> np.ndarray:
    n = scene.resolution
    img = np.empty((n, n, 3), np.float32)
    img[:] = BACKGROUNDS[scene.background]
    if rng is not None and texture > 0:
        img += rng.normal(0.0, texture, img.shape).astype(np.float32)
    for obj in scene.objects:
        y0, x0, y1, x1 = obj.box
        m = shape_mask(obj.shape, y1 - y0)
        patch = img[y0:y1, x0:x1]
        patch[m] = SHAPE_COLORS[obj.color]
    return np.clip(img, -1.0, 1.0)


def caption_for(scene: Scene, color_flags, mention) -> str:
    parts = []
    for obj, with_color, named in zip(scene.objects, color_flags, mention):
        if not named:
            continue
        parts.append("a " + (f"{obj.color} " if with_color else "") + obj.shape)
    return " and ".join(parts) + f" on {scene.background}"


def _place(rng, n, size, taken, tries=20):
    for _ in range(tries):
        y0, x0 = (int(v) for v in rng.integers(0, n - size + 1, 2))
        box = (y0, x0, y0 + size, x0 + size)
        if all(box[2] <= t[0] or t[2] <= box[0] or box[3] <= t[1] or t[3] <= box[1] for t in taken):
            return box
    return box


def generate_scene(seed, grammar: GrammarConfig | None = None):
    """Deterministically draw and render a scene; returns (scene, image, caption)."""
    g = grammar or GrammarConfig()
    rng = np.random.default_rng(seed)
    low_res = rng.random() < g.low_res_prob
    n = g.size // 2 if low_res else g.size
    scale = n / g.size
    count = 2 if rng.random() < g.two_object_prob else 1
    shapes = list(rng.choice(g.shapes, size=count, replace=False))
    if count == 2 and rng.random() < g.duplicate_prob:
        shapes[1] = shapes[0]
    objects, taken = [], []
    for shape in shapes:
        size = max(1, int(round(int(rng.integers(g.min_box, g.max_box + 1)) * scale)))
        box = _place(rng, n, size, taken)
        taken.append(box)
        objects.append(SceneObject(str(shape), str(rng.choice(g.colors)), box))
    scene = Scene(str(rng.choice(g.backgrounds)), objects, n)
    color_flags = [rng.random() < g.color_prob for _ in objects]
    mention = [True] + [rng.random() < g.mention_prob for _ in objects[1:]]
    image = render(scene, rng, g.texture)
    return scene, image, caption_for(scene, color_flags, mention)


# ---------------------------------------------------------------------------
# filtering

REASON_AREA = "area"
REASON_DUPLICATE = "duplicate_label"
REASON_RESOLUTION = "resolution"
REASONS = (REASON_AREA, REASON_DUPLICATE, REASON_RESOLUTION)


@dataclass
class FilterPolicy:
    min_area_fraction: float = 0.10
    unique_labels: bool = True
    min_resolution: int = 16   # native generator size; stands in for 512x512

    def __post_init__(self):
        if not 0.0 < self.min_area_fraction < 1.0:
            raise ValueError("min_area_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None


ACCEPT = Verdict(True)


def apply_filters(scene: Scene, policy: FilterPolicy | None = None) -> Verdict:
    """Discard rules in fixed order: box area, duplicate label, resolution."""
    policy = policy or FilterPolicy()
    image_area = scene.resolution * scene.resolution
    limit = Fraction(str(policy.min_area_fraction)) * image_area
    if any(obj.area < limit for obj in scene.objects):
        return Verdict(False, REASON_AREA)
    labels = [obj.shape for obj in scene.objects]
    if policy.unique_labels and len(set(labels)) != len(labels):
        return Verdict(False, REASON_DUPLICATE)
    if scene.resolution < policy.min_resolution:
        return Verdict(False, REASON_RESOLUTION)
    return ACCEPT


# ---------------------------------------------------------------------------
# training samples and manifest

@dataclass
class Subject:
    crop: np.ndarray
    position: int
    box: tuple
    label: str


@dataclass
class TrainingSample:
    image: np.ndarray
    caption: str
    subjects: list = field(default_factory=list)
    scene: Scene | None = None


def match_subjects(scene: Scene, image: np.ndarray, caption: str) -> list[Subject]:
    """Find each box label in the caption; unmatched labels are dropped.

    Positions are token indices with the BOS token at index 0.
    """
    words = caption.split()
    subjects, used = [], set()
    for obj in scene.objects:
        hits = [i for i, w in enumerate(words) if w == obj.shape and i not in used]
        if not hits:
            continue
        i = hits[0]
        used.add(i)
        y0, x0, y1, x1 = obj.box
        subjects.append(Subject(image[y0:y1, x0:x1].copy(), i + 1, tuple(obj.box), obj.shape))
    subjects.sort(key=lambda s: s.position)
    return subjects


def validate_sample(sample: TrainingSample) -> None:
    words = sample.caption.split()
    positions = [s.position for s in sample.subjects]
    if positions != sorted(set(positions)):
        raise ValueError("subject positions must be strictly increasing")
    for s in sample.subjects:
        if not 1 <= s.position <= len(words) or words[s.position - 1] != s.label:
            raise ValueError(f"position {s.position} does not point at label {s.label!r}")
        y0, x0, y1, x1 = s.box
        if not np.array_equal(s.crop, sample.image[y0:y1, x0:x1]):
            raise ValueError("crop differs from the image content of its box")


@dataclass
class Manifest:
    records: list
    stats: dict
    grammar: dict
    policy: dict
    seed: int
    root: Path | None = None

    def header(self) -> dict:
        return {"schema_version": MANIFEST_SCHEMA_VERSION, "seed": self.seed,
                "grammar": self.grammar, "policy": self.policy, "stats": self.stats}

    def write(self, path) -> Path:
        path = Path(path)
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"corpus manifest not found: {path}")
        lines = path.read_text().splitlines()
        head = json.loads(lines[0])
        if head.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema {head.get('schema_version')}")
        records = [json.loads(line) for line in lines[1:] if line.strip()]
        return cls(records, head["stats"], head["grammar"], head["policy"], head["seed"], path.parent)

    def load_sample(self, record: dict) -> TrainingSample:
        image = imageio.load_png(self.root / record["image"])
        subjects = [Subject(imageio.load_png(self.root / s["crop"]), s["position"], tuple(s["box"]), s["label"])
                    for s in record["subjects"]]
        return TrainingSample(image, record["caption"], subjects, Scene.from_dict(record["scene"]))


def build_corpus(n: int, out_dir, grammar: GrammarConfig | None = None,
                 policy: FilterPolicy | None = None, seed: int = 0) -> Manifest:
    """Generate ``n`` candidate scenes, filter them, and write images, crops and a manifest."""
    if n <= 0:
        raise ValueError("n must be positive")
    grammar = grammar or GrammarConfig()
    policy = policy or FilterPolicy()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "crops").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out}: {exc}") from exc
    counts = {r: 0 for r in REASONS}
    records = []
    for i in range(n):
        scene, image, caption = generate_scene([seed, i], grammar)
        verdict = apply_filters(scene, policy)
        if not verdict.accepted:
            counts[verdict.reason] += 1
            continue
        # round-trip through 8 bits first so crops equal the stored image content
        image = imageio.from_uint8(imageio.to_uint8(image))
        name = f"{i:06d}"
        imageio.save_png(out / "images" / f"{name}.png", image)
        subjects = []
        for k, s in enumerate(match_subjects(scene, image, caption)):
            crop_rel = f"crops/{name}_{k}.png"
            imageio.save_png(out / crop_rel, s.crop)
            subjects.append({"crop": crop_rel, "position": s.position, "box": list(s.box), "label": s.label})
        records.append({"id": i, "image": f"images/{name}.png", "caption": caption,
                        "subjects": subjects, "scene": scene.to_dict()})
    stats = {"candidates": n, "accepted": len(records), "rejected": counts,
             "acceptance_fraction": len(records) / n}
    manifest = Manifest(records, stats, grammar.to_dict(), asdict(policy), seed, out)
    manifest.write(out / "manifest.jsonl")
    (out / "vocab.txt").write_text("\n".join(_vocab_tokens(grammar)) + "\n")
    return manifest


def _vocab_tokens(grammar: GrammarConfig) -> list[str]:
    from .encoders import Vocabulary
    return Vocabulary.from_words(grammar.vocabulary_words()).tokens
