"""Synthetic scenes with known geometry and token prompts.

Each scene is a smooth seed-determined background with one anti-aliased
shape on top. Prompts are five attribute tokens padded to ``PROMPT_LENGTH``.
"""

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import UsageError

IMAGE_SIZE = 32
SUPERSAMPLE = 8
PROMPT_LENGTH = 8

SHAPES = ("disc", "square", "triangle")
X_POSITIONS = ("left", "center", "right")
Y_POSITIONS = ("top", "middle", "bottom")
SIZES = ("small", "large")
INTENSITIES = ("dark", "bright")
ATTRIBUTES = {
    "shape": SHAPES,
    "x_pos": X_POSITIONS,
    "y_pos": Y_POSITIONS,
    "size": SIZES,
    "intensity": INTENSITIES,
}

PAD_TOKEN = "<pad>"
_CONTENT_TOKENS = [v for values in ATTRIBUTES.values() for v in values]
VOCAB = [PAD_TOKEN] + _CONTENT_TOKENS + [f"<reserved{i}>" for i in range(32 - 1 - len(_CONTENT_TOKENS))]
TOKEN_IDS = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID = TOKEN_IDS[PAD_TOKEN]

# centers in pixel units, radius / half-side per size
_CENTERS = {"left": 8.0, "center": 16.0, "right": 24.0, "top": 8.0, "middle": 16.0, "bottom": 24.0}
RADIUS = {"small": 3.75, "large": 7.0}
_GRAY = {"dark": 0.08, "bright": 0.92}
BACKGROUND_SEEDS = 100_000


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    x_pos: str
    y_pos: str
    size: str
    intensity: str
    background_seed: int = 0

    def __post_init__(self):
        for name, values in ATTRIBUTES.items():
            if getattr(self, name) not in values:
                raise UsageError(f"{name}={getattr(self, name)!r} not in {values}")
        if not isinstance(self.background_seed, (int, np.integer)) or self.background_seed < 0:
            raise UsageError(f"background_seed must be a non-negative integer, got {self.background_seed!r}")

    def attributes(self):
        return tuple(getattr(self, name) for name in ATTRIBUTES)

    def replace(self, **changes):
        fields = asdict(self)
        fields.update(changes)
        return SceneSpec(**fields)

    @property
    def center(self):
        return _CENTERS[self.x_pos], _CENTERS[self.y_pos]


def _background(seed, size=IMAGE_SIZE):
    rng = np.random.default_rng(seed)
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    field = np.zeros((size, size))
    for _ in range(4):
        fx, fy = rng.integers(0, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
    field -= field.min()
    peak = field.max()
    if peak > 0:
        field /= peak
    base = rng.uniform(0.35, 0.65)
    return base + 0.3 * (field - 0.5)


def shape_indicator(spec, px, py):
    """Boolean membership of points ``(px, py)`` (pixel units) in the shape."""
    cx, cy = spec.center
    r = RADIUS[spec.size]
    dx, dy = px - cx, py - cy
    if spec.shape == "disc":
        return dx * dx + dy * dy <= r * r
    if spec.shape == "square":
        half = r * 0.9
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    # upward triangle inscribed in the circle of radius r
    top, bottom = -r, 0.5 * r
    half_base = r * np.sqrt(3.0) / 2.0
    frac = (dy - top) / (bottom - top)
    return (dy >= top) & (dy <= bottom) & (np.abs(dx) <= frac * half_base)


def shape_coverage(spec, size=IMAGE_SIZE, supersample=SUPERSAMPLE):
    """Fraction of each pixel covered by the shape, by supersampling."""
    offsets = (np.arange(supersample) + 0.5) / supersample
    fine = (np.arange(size)[:, None] + offsets[None, :]).reshape(-1)
    py, px = np.meshgrid(fine, fine, indexing="ij")
    inside = shape_indicator(spec, px, py).astype(np.float64)
    return inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def render_scene(spec):
    """Render ``spec`` to a (1, 32, 32) float32 image and its footprint.

    Pixel values are quantized to the 8-bit grid so PNG storage is lossless.
    The footprint marks pixels with at least 50% shape coverage.
    """
    coverage = shape_coverage(spec)
    image = _background(spec.background_seed) * (1.0 - coverage) + _GRAY[spec.intensity] * coverage
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return image.astype(np.float32)[None], coverage >= 0.5


def tokenize(text):
    """Map a whitespace-separated prompt to ``PROMPT_LENGTH`` token ids."""
    if isinstance(text, str):
        words = text.split()
    else:
        words = list(text)
    unknown = [w for w in words if w not in TOKEN_IDS]
    if unknown:
        raise UsageError(f"unknown prompt tokens: {unknown}")
    if len(words) > PROMPT_LENGTH:
        raise UsageError(f"prompt longer than {PROMPT_LENGTH} tokens")
    ids = [TOKEN_IDS[w] for w in words]
    return ids + [PAD_ID] * (PROMPT_LENGTH - len(ids))


def null_prompt():
    return [PAD_ID] * PROMPT_LENGTH


def scene_prompt(spec):
    return tokenize(list(spec.attributes()))


def prompt_text(ids):
    return " ".join(VOCAB[i] for i in ids if i != PAD_ID)


def parse_prompt(ids):
    """Inverse of :func:`scene_prompt`; the background seed comes back as 0."""
    words = [VOCAB[i] for i in ids if i != PAD_ID]
    if len(words) != len(ATTRIBUTES):
        raise UsageError(f"expected {len(ATTRIBUTES)} content tokens, got {words}")
    return SceneSpec(*words)


def all_attribute_combinations():
    return list(itertools.product(*ATTRIBUTES.values()))


@dataclass
class SceneDataset:
    train: list
    test: list

    def images(self, split="train"):
        specs = getattr(self, split)
        return np.stack([render_scene(s)[0] for s in specs])

    def prompts(self, split="train"):
        return np.array([scene_prompt(s) for s in getattr(self, split)], dtype=np.int64)


def make_split(seed=0, n_train=2000, n_test=24):
    """Disjoint train/test spec lists, reproducible from ``seed``.

    Test attributes are balanced: each attribute's values are cycled and
    shuffled independently, so every value appears at least
    ``n_test // len(values)`` times.
    """
    budget = len(all_attribute_combinations()) * BACKGROUND_SEEDS
    if n_train < 0 or n_test < 0 or n_train + n_test > budget:
        raise UsageError(f"n_train + n_test must be within the spec budget {budget}")
    rng = np.random.default_rng(seed)

    columns = {}
    for name, values in ATTRIBUTES.items():
        col = [values[i % len(values)] for i in range(n_test)]
        rng.shuffle(col)
        columns[name] = col
    test_seeds = rng.choice(BACKGROUND_SEEDS, size=n_test, replace=False) if n_test else []
    test = [
        SceneSpec(**{name: columns[name][i] for name in ATTRIBUTES}, background_seed=int(test_seeds[i]))
        for i in range(n_test)
    ]

    taken = set(test)
    train = []
    while len(train) < n_train:
        spec = SceneSpec(
            *(values[rng.integers(len(values))] for values in ATTRIBUTES.values()),
            background_seed=int(rng.integers(BACKGROUND_SEEDS)),
        )
        if spec in taken:
            continue
        taken.add(spec)
        train.append(spec)
    return SceneDataset(train, test)


def save_dataset(dataset, directory):
    """Write PNGs plus an ``index.json`` describing every spec and prompt."""
    from .latent_codec import save_png

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for split in ("train", "test"):
        entries = []
        for i, spec in enumerate(getattr(dataset, split)):
            name = f"{split}_{i:05d}.png"
            save_png(directory / name, render_scene(spec)[0])
            entries.append({"file": name, "spec": asdict(spec), "prompt": prompt_text(scene_prompt(spec))})
        index[split] = entries
    (directory / "index.json").write_text(json.dumps(index, indent=1))


def load_dataset_index(directory):
    index = json.loads((Path(directory) / "index.json").read_text())
    return SceneDataset(
        [SceneSpec(**e["spec"]) for e in index.get("train", [])],
        [SceneSpec(**e["spec"]) for e in index.get("test", [])],
    )
