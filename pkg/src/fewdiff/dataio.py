"""File formats, patch extraction, synthetic scenes, splits, vocab.

Binary formats are little-endian and fixed-layout:

  cube:   "MMRS" | ver u8=1 | dtype u8=1 (f32) | 2 reserved | u32 H W C
          | H*W*C float32, pixel-major with channel fastest
  labels: "MMLB" | ver u8=1 | 3 reserved | u32 H W | H*W int32 (-1 unlabeled)

Round-trips are bitwise lossless. Class catalogs are UTF-8 JSON.
"""

import colorsys
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .numerics import make_rng


class FormatError(Exception):
    """Malformed data file; message includes the byte offset when known."""


# ---------------------------------------------------------------------------
# cubes and labels
# ---------------------------------------------------------------------------

@dataclass
class Cube:
    """One modality's image: (H, W, C) float32, C >= 1, finite."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or v.shape[2] < 1:
            raise ValueError(f"cube must be (H, W, C>=1), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cube contains non-finite values")
        self.values = v

    @property
    def shape(self):
        return self.values.shape


@dataclass
class LabelMap:
    """(H, W) int32 per-pixel class ids; -1 marks unlabeled."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int32)
        if lab.ndim != 2:
            raise ValueError(f"labels must be (H, W), got {lab.shape}")
        if lab.min() < -1:
            raise ValueError("label ids below -1")
        self.labels = lab

    @property
    def shape(self):
        return self.labels.shape

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1


_CUBE_MAGIC = b"MMRS"
_LABEL_MAGIC = b"MMLB"


def save_cube(cube, path):
    h, w, c = cube.shape
    with open(path, "wb") as f:
        f.write(_CUBE_MAGIC)
        f.write(struct.pack("<BBBB", 1, 1, 0, 0))
        f.write(struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())


def load_cube(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20:
        raise FormatError(f"{path}: header truncated at offset {len(blob)}")
    if blob[:4] != _CUBE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at offset 0")
    ver, dtype = blob[4], blob[5]
    if ver != 1:
        raise FormatError(f"{path}: unsupported version {ver} at offset 4")
    if dtype != 1:
        raise FormatError(f"{path}: unsupported dtype code {dtype} at offset 5")
    h, w, c = struct.unpack_from("<III", blob, 8)
    need = 20 + h * w * c * 4
    if len(blob) < need:
        raise FormatError(
            f"{path}: payload truncated, need {need} bytes, have {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", count=h * w * c, offset=20)
    return Cube(values.reshape(h, w, c).copy())


def save_labels(labelmap, path):
    h, w = labelmap.shape
    with open(path, "wb") as f:
        f.write(_LABEL_MAGIC)
        f.write(struct.pack("<BBBB", 1, 0, 0, 0))
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(labelmap.labels, dtype="<i4").tobytes())


def load_labels(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise FormatError(f"{path}: header truncated at offset {len(blob)}")
    if blob[:4] != _LABEL_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at offset 0")
    if blob[4] != 1:
        raise FormatError(f"{path}: unsupported version {blob[4]} at offset 4")
    h, w = struct.unpack_from("<II", blob, 8)
    need = 16 + h * w * 4
    if len(blob) < need:
        raise FormatError(
            f"{path}: payload truncated, need {need} bytes, have {len(blob)}")
    labels = np.frombuffer(blob, dtype="<i4", count=h * w, offset=16)
    return LabelMap(labels.reshape(h, w).copy())


def save_ppm(rgb, path):
    """Binary PPM (P6), rgb is (H, W, 3) uint8."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


# ---------------------------------------------------------------------------
# class catalog
# ---------------------------------------------------------------------------

@dataclass
class ClassInfo:
    name: str
    prompts: list
    color: tuple


@dataclass
class ClassCatalog:
    classes: list

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("catalog needs at least 2 classes")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        for c in self.classes:
            if not c.prompts:
                raise ValueError(f"class {c.name!r} has no prompts")

    def __len__(self):
        return len(self.classes)

    @property
    def names(self):
        return [c.name for c in self.classes]

    @property
    def palette(self):
        return np.array([c.color for c in self.classes], dtype=np.uint8)


def save_catalog(catalog, path):
    doc = {"classes": [
        {"name": c.name, "prompts": list(c.prompts), "color": list(c.color)}
        for c in catalog.classes]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_catalog(path):
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None
    try:
        classes = [
            ClassInfo(name=c["name"], prompts=list(c["prompts"]),
                      color=tuple(int(v) for v in c["color"]))
            for c in doc["classes"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: catalog schema violation ({exc})") from None
    return ClassCatalog(classes)


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------

def _reflect(idx, n):
    """Mirror indices about the borders (border pixel is the axis)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def extract_patch_batch(cube, centers, size):
    """(B, S, S, C) windows centered at `centers` with mirror padding."""
    if size % 2 == 0 or size < 1:
        raise ValueError(f"patch size must be odd and positive, got {size}")
    v = cube.values if isinstance(cube, Cube) else np.asarray(cube)
    h, w, _ = v.shape
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    if centers.size and (
        centers[:, 0].min() < 0 or centers[:, 0].max() >= h
        or centers[:, 1].min() < 0 or centers[:, 1].max() >= w
    ):
        raise ValueError("patch center outside the image")
    half = size // 2
    offs = np.arange(-half, half + 1)
    rows = _reflect(centers[:, 0:1] + offs, h)
    cols = _reflect(centers[:, 1:2] + offs, w)
    return v[rows[:, :, None], cols[:, None, :]]


@dataclass
class PatchSample:
    """Co-located windows from both modalities around one center pixel."""

    patches: dict
    center: tuple
    class_id: int = None


def extract_patch(cubes, center, size):
    """One PatchSample from a dict of modality -> Cube at `center`."""
    patches = {
        m: extract_patch_batch(c, np.array([center]), size)[0]
        for m, c in cubes.items()}
    return PatchSample(patches=patches, center=tuple(center))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

_CLASS_NAMES = [
    "meadow", "asphalt", "water", "forest", "soil", "roof",
    "gravel", "crop", "sand", "brick", "marsh", "shadow",
]

# specific per-class descriptions backing the p5 prompt style
_CLASS_DESCRIPTIONS = {
    "meadow": "an open flat area densely covered with short green grass and scattered low vegetation.",
    "asphalt": "a smooth dark gray paved surface of a road or parking area with uniform texture.",
    "water": "a calm body of water with a dark flat surface and very low reflectance.",
    "forest": "a dense stand of tall trees with a rough textured canopy of dark green foliage.",
    "soil": "a patch of exposed bare earth with brown dry ground and no vegetation cover.",
    "roof": "the top surface of a building covered with tiles or metal sheets in regular patterns.",
    "gravel": "a coarse granular surface of small loose stones with mixed gray tones.",
    "crop": "a cultivated agricultural field with regular rows of young green plants.",
    "sand": "a bright dry sandy surface with fine uniform grain and high reflectance.",
    "brick": "a man made surface of red clay bricks laid in a repeating bonded pattern.",
    "marsh": "a low wetland area of water saturated ground mixed with reeds and aquatic grass.",
    "shadow": "a dark region cast by tall structures where little direct light reaches the ground.",
}

PROMPT_TEMPLATES = {
    "p1": "a patch of a {}.",
    "p2": "a nice patch of a {}.",
    "p3": "a fusion patch of a {}.",
    "p4": "a multimodal fusion patch of a {} with strong semantic information.",
    "p5": None,  # specific per-class descriptions from the catalog
}


def _default_color(i):
    r, g, b = colorsys.hsv_to_rgb((i * 0.618033988749895) % 1.0, 0.65, 0.95)
    return (int(r * 255), int(g * 255), int(b * 255))


def default_catalog(K):
    classes = []
    for i in range(K):
        name = _CLASS_NAMES[i] if i < len(_CLASS_NAMES) else f"region{i}"
        desc = _CLASS_DESCRIPTIONS.get(name, f"a distinct land cover region of type {name}.")
        classes.append(ClassInfo(
            name=name,
            prompts=[PROMPT_TEMPLATES["p1"].format(name), desc],
            color=_default_color(i)))
    return ClassCatalog(classes)


def synth_scene(K, H, W, C_A, C_B, noise_sigma, smooth_radius, seed):
    """Voronoi-partitioned two-modality scene.

    Labels come from nearest seed point; each pixel is its class
    prototype plus N(0, sigma^2) noise, box-filtered with the given
    radius. Fully determined by `seed`.
    """
    if K < 2:
        raise ValueError("need K >= 2 classes")
    if C_A < 1 or C_B < 1:
        raise ValueError("channel counts must be >= 1")
    if H * W < K:
        raise ValueError(f"{H}x{W} scene cannot hold {K} seed points")
    rng = make_rng(seed, "data")
    flat = rng.choice(H * W, size=K, replace=False)
    seeds = np.stack([flat // W, flat % W], axis=1)
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    d2 = (rr[..., None] - seeds[:, 0]) ** 2 + (cc[..., None] - seeds[:, 1]) ** 2
    labels = d2.argmin(axis=-1).astype(np.int32)

    cubes = []
    for C in (C_A, C_B):
        protos = rng.standard_normal((K, C))
        img = protos[labels].astype(np.float64)
        if noise_sigma > 0:
            img += noise_sigma * rng.standard_normal(img.shape)
        if smooth_radius > 0:
            k = 2 * smooth_radius + 1
            img = uniform_filter(img, size=(k, k, 1), mode="mirror")
        cubes.append(Cube(img.astype(np.float32)))

    return cubes[0], cubes[1], LabelMap(labels), default_catalog(K)


# ---------------------------------------------------------------------------
# few-shot splits
# ---------------------------------------------------------------------------

@dataclass
class FewShotSplit:
    """shots[k]: (n, 2) coords; eval_coords: rest of the labeled pixels;
    pool: (M, 2) coords drawn label-blind for pretraining."""

    shots: dict
    eval_coords: np.ndarray
    pool: np.ndarray
    n: int

    def shot_coords(self):
        return np.concatenate([self.shots[k] for k in sorted(self.shots)], axis=0)

    def shot_labels(self):
        return np.concatenate(
            [np.full(len(self.shots[k]), k) for k in sorted(self.shots)])


def sample_fewshot(labelmap, n, M, seed):
    """n labeled shots per class, eval on the remaining labeled pixels,
    and an M-pixel label-blind pretraining pool."""
    lab = labelmap.labels
    h, w = lab.shape
    if h * w < M:
        raise ValueError(f"scene has {h * w} pixels, pool needs {M}")
    rng = make_rng(seed, "split")
    classes = sorted(int(k) for k in np.unique(lab) if k >= 0)
    shots = {}
    eval_parts = []
    for k in classes:
        coords = np.argwhere(lab == k)
        if len(coords) < n:
            raise ValueError(
                f"class {k} has only {len(coords)} labeled pixels, need {n}")
        order = rng.permutation(len(coords))
        shots[k] = coords[order[:n]]
        eval_parts.append(coords[order[n:]])
    eval_coords = (np.concatenate(eval_parts, axis=0) if eval_parts
                   else np.empty((0, 2), dtype=np.int64))
    pool_flat = rng.choice(h * w, size=M, replace=False)
    pool = np.stack([pool_flat // w, pool_flat % w], axis=1)
    return FewShotSplit(shots=shots, eval_coords=eval_coords, pool=pool, n=n)


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def pool_stats(cube, pool_coords, size):
    """Per-channel mean/std over the pretraining-pool patches only."""
    patches = extract_patch_batch(cube, pool_coords, size)
    flat = patches.reshape(-1, patches.shape[-1]).astype(np.float64)
    return ChannelStats(mean=flat.mean(axis=0), std=flat.std(axis=0))


def standardize(values, stats):
    """(x - mean) / max(std, 1e-8), broadcast over the channel axis."""
    denom = np.maximum(stats.std, 1e-8)
    return ((values - stats.mean) / denom).astype(np.float32)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

PAD, SOS, EOS, UNK = 0, 1, 2, 3
_SPECIALS = ("<pad>", "<sos>", "<eos>", "<unk>")


def _words(text):
    out = []
    for raw in text.lower().split():
        w = "".join(ch for ch in raw if ch.isalnum())
        if w:
            out.append(w)
    return out


@dataclass
class Vocab:
    """Word-level closed vocabulary with 4 special ids prepended."""

    token_to_id: dict = field(repr=False)
    context_length: int = 32

    def __len__(self):
        return len(self.token_to_id)

    def encode(self, text):
        """[<sos>, words..., <eos>] right-padded to context_length."""
        words = _words(text)
        if len(words) > self.context_length - 2:
            raise ValueError(
                f"prompt has {len(words)} words, context length "
                f"{self.context_length} allows {self.context_length - 2}")
        ids = [SOS] + [self.token_to_id.get(w, UNK) for w in words] + [EOS]
        ids += [PAD] * (self.context_length - len(ids))
        return np.array(ids, dtype=np.int64)


def build_vocab(corpus, context_length=32):
    """Lowercased, punctuation-stripped, lexicographically sorted words."""
    if not corpus:
        raise ValueError("empty corpus")
    words = set()
    longest = 0
    for text in corpus:
        ws = _words(text)
        longest = max(longest, len(ws))
        words.update(ws)
    if longest > context_length - 2:
        raise ValueError(
            f"corpus prompt of {longest} words exceeds context length "
            f"{context_length}")
    table = {s: i for i, s in enumerate(_SPECIALS)}
    for i, w in enumerate(sorted(words)):
        table[w] = 4 + i
    return Vocab(token_to_id=table, context_length=context_length)


def catalog_corpus(catalog):
    """All prompt strings plus every template instantiated per class."""
    corpus = []
    for c in catalog.classes:
        corpus.extend(c.prompts)
        for key, tmpl in PROMPT_TEMPLATES.items():
            if tmpl is not None:
                corpus.append(tmpl.format(c.name))
    return corpus


def prompts_for(catalog, template):
    """One prompt string per class under the named template.

    p5 uses each class's own description: catalogs order prompts from
    generic to specific, so the last entry is taken.
    """
    if template not in PROMPT_TEMPLATES:
        raise ValueError(f"unknown prompt template {template!r}")
    tmpl = PROMPT_TEMPLATES[template]
    if tmpl is None:
        return [c.prompts[-1] for c in catalog.classes]
    return [tmpl.format(c.name) for c in catalog.classes]
