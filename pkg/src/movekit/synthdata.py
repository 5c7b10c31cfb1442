"""Procedural three-domain image/caption generator and its on-disk format.

Domains follow the router's class semantics:

0. general - smooth random colour field with 1-3 coloured blobs.
   Caption: ``blobs <n> <colour> ...`` with colours in palette order.
1. formula - dark 5x7 glyph strokes on a light page, one glyph per 8x8 cell
   in a horizontal band. Caption: ``tex <glyph> ...``.
2. chart   - axis-aligned bar or line chart with k series points.
   Caption: ``<bar|line> <k> max <argmax>``.

A sample is a pure function of ``(label, seed)``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError
from .vision import bilinear_resize_grid

GENERATOR_VERSION = 1
IMAGE_SIZE = 32
N_CLASSES = 3
SPLITS = ("train", "heldout", "prefit")

PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.85, 0.15, 0.8),
}
COLORS = tuple(PALETTE)

_FONT_ROWS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    "+": ("00000", "00100", "00100", "11111", "00100", "00100", "00000"),
    "-": ("00000", "00000", "00000", "11111", "00000", "00000", "00000"),
    "=": ("00000", "00000", "11111", "00000", "11111", "00000", "00000"),
    "x": ("00000", "00000", "10001", "01010", "00100", "01010", "10001"),
    "y": ("00000", "10001", "10001", "01111", "00001", "10001", "01110"),
    "(": ("00010", "00100", "01000", "01000", "01000", "00100", "00010"),
    ")": ("01000", "00100", "00010", "00010", "00010", "00100", "01000"),
}
GLYPHS = tuple(_FONT_ROWS)
FONT = {g: np.array([[c == "1" for c in row] for row in rows]) for g, rows in _FONT_ROWS.items()}

CHART_KINDS = ("bar", "line")
MIN_BARS, MAX_BARS = 2, 4

# every symbol a caption can contain, in a fixed order
CAPTION_SYMBOLS = (
    ("blobs", "tex", "max") + CHART_KINDS + COLORS
    + tuple(str(d) for d in range(10)) + tuple(g for g in GLYPHS if not g.isdigit())
)


@dataclass
class Sample:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    caption: str
    label: int
    seed: int

    @property
    def tokens(self) -> list[str]:
        return self.caption.split()


# ---------------------------------------------------------------------------
# Renderers
# ---------------------------------------------------------------------------


def _render_general(rng: np.random.Generator, size: int):
    img = bilinear_resize_grid(rng.uniform(0.15, 0.65, size=(4, 4, 3)), (size, size))
    n = int(rng.integers(1, 4))
    picks = sorted(rng.choice(len(COLORS), size=n, replace=False).tolist())
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    centers: list[np.ndarray] = []
    for ci in picks:
        while True:
            c = rng.uniform(5, size - 5, size=2)
            if all(np.hypot(*(c - o)) >= 9.0 for o in centers):
                break
        centers.append(c)
        cy, cx = c
        radius = rng.uniform(3.5, 6.0)
        alpha = np.clip(radius - np.hypot(yy - cy, xx - cx) + 0.5, 0.0, 1.0)[..., None]
        img = img * (1 - alpha) + np.array(PALETTE[COLORS[ci]]) * alpha
    names = [COLORS[ci] for ci in picks]
    return img, ["blobs", str(n), *names], {"count": n, "colors": names}


def _render_formula(rng: np.random.Generator, size: int):
    paper = rng.uniform(0.82, 0.97)
    img = np.full((size, size, 3), paper) + rng.normal(0.0, 0.02, size=(size, size, 3))
    n = int(rng.integers(2, size // 8 + 1))
    glyphs = [GLYPHS[i] for i in rng.integers(0, len(GLYPHS), size=n)]
    band = 8 * int(rng.integers(1, 3))
    ink = rng.uniform(0.0, 0.25)
    for j, g in enumerate(glyphs):
        y0 = band + int(rng.integers(0, 2))
        x0 = 8 * j + 1 + int(rng.integers(0, 2))
        bitmap = FONT[g]
        patch = img[y0:y0 + 7, x0:x0 + 5]
        patch[bitmap] = ink
    return img, ["tex", *glyphs], {"glyphs": glyphs}


def _draw_line(img, y0, x0, y1, x1, color):
    steps = int(max(abs(y1 - y0), abs(x1 - x0))) * 2 + 1
    for t in np.linspace(0.0, 1.0, steps):
        y = int(round(y0 + (y1 - y0) * t))
        x = int(round(x0 + (x1 - x0) * t))
        img[y, x] = color


def _render_chart(rng: np.random.Generator, size: int):
    bg = rng.uniform(0.9, 1.0)
    img = np.full((size, size, 3), bg)
    axis = rng.uniform(0.1, 0.3)
    base, left = size - 3, 2
    img[2:base + 1, left] = axis
    img[base, left:size - 1] = axis
    kind = CHART_KINDS[int(rng.integers(0, 2))]
    k = int(rng.integers(MIN_BARS, MAX_BARS + 1))
    heights = rng.choice(np.arange(4, base - 3, 4), size=k, replace=False)
    color = np.array(PALETTE[COLORS[int(rng.integers(0, len(COLORS)))]])
    x_start = left + 2
    slot = (size - 1 - x_start) // k
    width = max(2, slot - 2)
    centers = []
    for i, h in enumerate(heights):
        x0 = x_start + i * slot
        centers.append((base - 1 - int(h), x0 + width // 2))
        if kind == "bar":
            img[base - int(h):base, x0:x0 + width] = color
    if kind == "line":
        for (ya, xa), (yb, xb) in zip(centers, centers[1:]):
            _draw_line(img, ya, xa, yb, xb, color)
        for y, x in centers:
            img[max(y - 1, 0):y + 1, x - 1:x + 1] = color
    argmax = int(np.argmax(heights))
    params = {"kind": kind, "k": k, "argmax": argmax, "heights": [int(h) for h in heights]}
    return img, [kind, str(k), "max", str(argmax)], params


_RENDERERS = (_render_general, _render_formula, _render_chart)


def render(label: int, seed: int, size: int = IMAGE_SIZE):
    """Image, caption tokens and the generator parameters behind them."""
    if label not in range(N_CLASSES):
        raise ConfigurationError(f"label must be in 0..{N_CLASSES - 1}, got {label}")
    rng = np.random.default_rng(seed)
    img, tokens, params = _RENDERERS[label](rng, size)
    return np.clip(img, 0.0, 1.0).astype(np.float32), tokens, params


def gen_sample(label: int, seed: int, size: int = IMAGE_SIZE) -> Sample:
    img, tokens, _ = render(label, seed, size)
    return Sample(image=img, caption=" ".join(tokens), label=label, seed=int(seed))


def parse_caption(caption: str) -> dict:
    """Recover the generator parameters a caption encodes.

    Raises ``ValueError`` when the caption does not follow the grammar.
    """
    toks = caption.split()
    if not toks:
        raise ValueError("empty caption")
    head = toks[0]
    if head == "blobs":
        n = int(toks[1])
        colors = toks[2:]
        if len(colors) != n or any(c not in PALETTE for c in colors):
            raise ValueError(f"bad blob caption {caption!r}")
        return {"label": 0, "count": n, "colors": colors}
    if head == "tex":
        glyphs = toks[1:]
        if not glyphs or any(g not in FONT for g in glyphs):
            raise ValueError(f"bad formula caption {caption!r}")
        return {"label": 1, "glyphs": glyphs}
    if head in CHART_KINDS:
        if len(toks) != 4 or toks[2] != "max":
            raise ValueError(f"bad chart caption {caption!r}")
        return {"label": 2, "kind": head, "k": int(toks[1]), "argmax": int(toks[3])}
    raise ValueError(f"unknown caption head {head!r}")


# ---------------------------------------------------------------------------
# Manifest and dataset persistence
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    train_counts: tuple[int, ...] = (2000, 2000, 2000)
    heldout_counts: tuple[int, ...] = (500, 500, 500)
    seed: int = 0
    generator_version: int = GENERATOR_VERSION
    image_size: int = IMAGE_SIZE

    def __post_init__(self) -> None:
        for split, counts in (("train", self.train_counts), ("heldout", self.heldout_counts)):
            if len(counts) != N_CLASSES:
                raise ConfigurationError(f"{split}.counts needs {N_CLASSES} entries, got {len(counts)}")
            if min(counts) < 1:
                raise ConfigurationError(f"{split}.counts must be >= 1, got {counts}")
            if max(counts) - min(counts) > 1:
                raise ConfigurationError(f"{split}.counts must be balanced within 1, got {counts}")
        if self.generator_version != GENERATOR_VERSION:
            raise ConfigurationError(
                f"manifest generator_version {self.generator_version} != supported {GENERATOR_VERSION}"
            )

    def counts(self, split: str) -> tuple[int, ...]:
        return {"train": self.train_counts, "heldout": self.heldout_counts}[split]

    def to_text(self) -> str:
        lines = [
            f"generator_version = {self.generator_version}",
            f"seed = {self.seed}",
            f"image_size = {self.image_size}",
            "train.counts = " + ",".join(map(str, self.train_counts)),
            "heldout.counts = " + ",".join(map(str, self.heldout_counts)),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<manifest>") -> "DatasetManifest":
        kw = {}
        keys = {
            "generator_version": ("generator_version", int),
            "seed": ("seed", int),
            "image_size": ("image_size", int),
            "train.counts": ("train_counts", lambda v: tuple(int(x) for x in v.split(","))),
            "heldout.counts": ("heldout_counts", lambda v: tuple(int(x) for x in v.split(","))),
        }
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in keys:
                raise ConfigurationError(f"{source}:{lineno}: cannot parse manifest line {raw!r}")
            field_name, conv = keys[key]
            try:
                kw[field_name] = conv(value)
            except ValueError:
                raise ConfigurationError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
        try:
            return cls(**kw)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_text(text, source=str(path))


def sample_seed(global_seed: int, split: str, label: int, index: int) -> int:
    ss = np.random.SeedSequence(entropy=global_seed, spawn_key=(SPLITS.index(split), label, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def split_seeds(manifest: DatasetManifest, split: str) -> list[tuple[int, int]]:
    """``(label, seed)`` pairs of a split, classes interleaved round-robin."""
    counts = manifest.counts(split)
    out = []
    for i in range(max(counts)):
        for label, c in enumerate(counts):
            if i < c:
                out.append((label, sample_seed(manifest.seed, split, label, i)))
    return out


_MAGIC = b"MVS"
_HEADER = struct.Struct("<IQIIII")


def encode_record(s: Sample) -> bytes:
    h, w, c = s.image.shape
    cap = s.caption.encode("utf-8")
    return (
        _MAGIC + bytes([GENERATOR_VERSION])
        + _HEADER.pack(s.label, s.seed, h, w, c, len(cap))
        + cap
        + np.ascontiguousarray(s.image, dtype="<f4").tobytes()
    )


def decode_records(buf: bytes, source: str = "<records>") -> list[Sample]:
    out = []
    pos = 0
    while pos < len(buf):
        if buf[pos:pos + 3] != _MAGIC:
            raise DataError(f"{source}: bad record tag at byte {pos}")
        version = buf[pos + 3]
        if version != GENERATOR_VERSION:
            raise DataError(f"{source}: unsupported record version {version} at byte {pos}")
        pos += 4
        if pos + _HEADER.size > len(buf):
            raise DataError(f"{source}: truncated record header at byte {pos}")
        label, seed, h, w, c, n_cap = _HEADER.unpack_from(buf, pos)
        pos += _HEADER.size
        n_pix = h * w * c * 4
        if pos + n_cap + n_pix > len(buf):
            raise DataError(f"{source}: truncated record body at byte {pos}")
        caption = buf[pos:pos + n_cap].decode("utf-8")
        pos += n_cap
        img = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=pos).reshape(h, w, c).astype(np.float32)
        pos += n_pix
        out.append(Sample(image=img, caption=caption, label=label, seed=seed))
    return out


def write_samples(path: str | Path, samples: list[Sample]) -> None:
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            for s in samples:
                fh.write(encode_record(s))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_samples(path: str | Path) -> list[Sample]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return decode_records(buf, source=str(path))


@dataclass
class Split:
    """Array view of one split: stacked images plus per-sample metadata."""

    images: np.ndarray  # (N, H, W, C) float32
    labels: np.ndarray  # (N,) int64
    captions: list[str]
    seeds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> "Split":
        return cls(
            images=np.stack([s.image for s in samples]).astype(np.float32),
            labels=np.array([s.label for s in samples], dtype=np.int64),
            captions=[s.caption for s in samples],
            seeds=np.array([s.seed for s in samples], dtype=np.uint64),
        )

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.images[idx], self.labels[idx], [self.captions[i] for i in idx], self.seeds[idx])


@dataclass
class Dataset:
    manifest: DatasetManifest
    train: Split
    heldout: Split


def generate_split(manifest: DatasetManifest, split: str) -> list[Sample]:
    return [gen_sample(label, seed, manifest.image_size) for label, seed in split_seeds(manifest, split)]


def gen_dataset(manifest: DatasetManifest, out_dir: str | Path) -> Dataset:
    """Generate both splits and persist them under ``out_dir``."""
    out_dir = Path(out_dir)
    train_seeds = {s for _, s in split_seeds(manifest, "train")}
    held_seeds = {s for _, s in split_seeds(manifest, "heldout")}
    if train_seeds & held_seeds:
        raise ConfigurationError("train and held-out seeds collide")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    splits = {}
    for split in ("train", "heldout"):
        samples = generate_split(manifest, split)
        write_samples(out_dir / f"{split}.bin", samples)
        splits[split] = Split.from_samples(samples)
    try:
        (out_dir / "manifest.txt").write_text(manifest.to_text())
    except OSError as exc:
        raise DataError(f"cannot write manifest in {out_dir}: {exc}") from exc
    return Dataset(manifest, splits["train"], splits["heldout"])


def load_dataset(data_dir: str | Path) -> Dataset:
    data_dir = Path(data_dir)
    manifest = DatasetManifest.load(data_dir / "manifest.txt")
    splits = {}
    for split in ("train", "heldout"):
        samples = read_samples(data_dir / f"{split}.bin")
        counts = np.bincount([s.label for s in samples], minlength=N_CLASSES)
        if tuple(counts) != manifest.counts(split):
            raise DataError(f"{data_dir}/{split}.bin holds counts {tuple(counts)}, manifest says {manifest.counts(split)}")
        splits[split] = Split.from_samples(samples)
    return Dataset(manifest, splits["train"], splits["heldout"])


def dataset_hash(data_dir: str | Path) -> str:
    data_dir = Path(data_dir)
    h = hashlib.sha256()
    for name in ("manifest.txt", "train.bin", "heldout.bin"):
        try:
            h.update((data_dir / name).read_bytes())
        except OSError as exc:
            raise DataError(f"cannot hash {data_dir / name}: {exc}") from exc
    return h.hexdigest()


def domain_images(label: int, count: int, seed: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Images from the ``prefit`` seed namespace, disjoint from train/held-out."""
    return np.stack([render(label, sample_seed(seed, "prefit", label, i), size)[0] for i in range(count)])
