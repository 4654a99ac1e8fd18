"""Deterministic grid-world VQA task and its bit-exact file format.

Scenes are 4x4 grids of colored shapes rendered to 3x32x32 images; questions
come from four templates (color-of-shape, shape-of-color, count-of-color,
existence). Every sample is a pure function of (seed, index), so regenerating
a corpus, in any partition order, reproduces it bit for bit.

File format (QVD1, all integers little-endian):
  magic "QVD1" | u32 header length | header UTF-8 text | samples
  header lines: version, vocab, answers, count, image_shape, seed, crc32
  sample: image f32[3*32*32] | u8 token count | u16 per token | u16 answer
The crc32 line holds CRC-32 (polynomial 0xEDB88320, as in zlib) over the
header bytes that precede it plus all sample bytes, so corrupted payloads and
edited header lists are both detected.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import Rng

WORDS = ("<pad>", "what", "color", "is", "the", "shape", "thing", "how",
         "many", "things", "there", "a",
         "square", "disc", "triangle",
         "red", "green", "blue", "yellow")
SHAPES = ("square", "disc", "triangle")
COLORS = ("red", "green", "blue", "yellow")
ANSWERS = ("red", "green", "blue", "yellow",      # colors 0..3
           "square", "disc", "triangle",          # shapes 4..6
           "0", "1", "2", "3",                    # counts 7..10
           "yes", "no")                           # existence 11..12
FAMILIES = ("color", "shape", "count", "exist")

GRID = 4
PATCH = 8
IMAGE_SIZE = GRID * PATCH
MAX_TOKENS = 8
MAX_COUNT_ANSWER = 3
BACKGROUND = 0.1

_WORD_INDEX = {w: i for i, w in enumerate(WORDS)}
_DATA_DOMAIN = 1  # rng key namespace for per-sample streams


def _shape_masks() -> np.ndarray:
    """8x8 boolean rasters: filled 6x6 square, radius-3 disc about the patch
    center, and a legs-6 lower-left right triangle."""
    masks = np.zeros((3, PATCH, PATCH), dtype=bool)
    masks[0, 1:7, 1:7] = True
    rr, cc = np.mgrid[0:PATCH, 0:PATCH]
    masks[1] = (rr - 3.5) ** 2 + (cc - 3.5) ** 2 <= 9.0
    box_r, box_c = rr - 1, cc - 1
    masks[2] = (0 <= box_r) & (box_r < 6) & (0 <= box_c) & (box_c < 6) & (box_r >= box_c)
    return masks


MASKS = _shape_masks()


@dataclass(frozen=True)
class SceneObject:
    row: int
    col: int
    shape: int
    color: int


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]

    def count_shape(self, shape: int) -> int:
        return sum(1 for o in self.objects if o.shape == shape)

    def count_color(self, color: int) -> int:
        return sum(1 for o in self.objects if o.color == color)

    def has(self, color: int, shape: int) -> bool:
        return any(o.color == color and o.shape == shape for o in self.objects)

    def find_shape(self, shape: int) -> SceneObject:
        matches = [o for o in self.objects if o.shape == shape]
        if len(matches) != 1:
            raise ValueError(f"expected exactly one object of shape {shape}")
        return matches[0]


def generate_scene(rng: Rng) -> SceneSpec:
    """1..6 objects on distinct cells, uniform shape and color."""
    count = int(rng.integers(1, 7))
    cells = rng.choice(GRID * GRID, size=count, replace=False)
    shapes = rng.integers(0, len(SHAPES), count)
    colors = rng.integers(0, len(COLORS), count)
    objects = tuple(SceneObject(int(c) // GRID, int(c) % GRID, int(s), int(col))
                    for c, s, col in zip(cells, shapes, colors))
    return SceneSpec(objects)


def render_image(scene: SceneSpec) -> np.ndarray:
    """(3,32,32) float32 in [0,1]: background 0.1 on all channels; object
    pixels set their pure color channel to 1.0."""
    img = np.full((3, IMAGE_SIZE, IMAGE_SIZE), BACKGROUND, dtype=np.float32)
    rgb = {"red": 0, "green": 1, "blue": 2}
    for obj in scene.objects:
        mask = MASKS[obj.shape]
        r0, c0 = obj.row * PATCH, obj.col * PATCH
        color = COLORS[obj.color]
        if color == "yellow":
            channels = (rgb["red"], rgb["green"])
        else:
            channels = (rgb[color],)
        for ch in channels:
            patch = img[ch, r0:r0 + PATCH, c0:c0 + PATCH]
            patch[mask] = 1.0
    return img


def tokenize(words: list[str]) -> tuple[np.ndarray, int]:
    idx = [_WORD_INDEX[w] for w in words]
    if len(idx) > MAX_TOKENS:
        raise ValueError(f"question too long: {words}")
    padded = np.zeros(MAX_TOKENS, dtype=np.uint16)
    padded[:len(idx)] = idx
    return padded, len(idx)


def question_text(tokens: np.ndarray, length: int, words=WORDS) -> str:
    return " ".join(words[int(t)] for t in tokens[:length])


def question_family(tokens: np.ndarray) -> str:
    first, second = WORDS[int(tokens[0])], WORDS[int(tokens[1])]
    if first == "what":
        return "color" if second == "color" else "shape"
    if first == "how":
        return "count"
    if first == "is":
        return "exist"
    raise ValueError(f"unrecognized question start {(first, second)!r}")


class SceneRejected(Exception):
    """Scene cannot host the drawn template (e.g. count above the cap)."""


def generate_question(scene: SceneSpec, rng: Rng) -> tuple[np.ndarray, int, int]:
    """(padded tokens, length, answer index), uniform over applicable templates.

    Raises SceneRejected when a count question draws a color that appears
    more than MAX_COUNT_ANSWER times; the caller regenerates the scene, which
    keeps count answers within 0..3.
    """
    unique_shapes = [s for s in range(len(SHAPES)) if scene.count_shape(s) == 1]
    unique_colors = [c for c in range(len(COLORS)) if scene.count_color(c) == 1]
    applicable = []
    if unique_shapes:
        applicable.append("color")
    if unique_colors:
        applicable.append("shape")
    applicable += ["count", "exist"]

    family = applicable[int(rng.integers(0, len(applicable)))]
    if family == "color":
        shape = unique_shapes[int(rng.integers(0, len(unique_shapes)))]
        obj = scene.find_shape(shape)
        tokens, length = tokenize(["what", "color", "is", "the", SHAPES[shape]])
        return tokens, length, obj.color
    if family == "shape":
        color = unique_colors[int(rng.integers(0, len(unique_colors)))]
        obj = next(o for o in scene.objects if o.color == color)
        tokens, length = tokenize(["what", "shape", "is", "the", COLORS[color], "thing"])
        return tokens, length, len(COLORS) + obj.shape
    if family == "count":
        color = int(rng.integers(0, len(COLORS)))
        count = scene.count_color(color)
        if count > MAX_COUNT_ANSWER:
            raise SceneRejected(f"{COLORS[color]} appears {count} times")
        tokens, length = tokenize(["how", "many", COLORS[color], "things"])
        return tokens, length, 7 + count
    # existence: balanced yes/no by construction (coin, then a uniform
    # present or absent color-shape combination; both sets are never empty)
    want_yes = bool(rng.integers(0, 2))
    combos = [(c, s) for c in range(len(COLORS)) for s in range(len(SHAPES))
              if scene.has(c, s) == want_yes]
    color, shape = combos[int(rng.integers(0, len(combos)))]
    tokens, length = tokenize(["is", "there", "a", COLORS[color], SHAPES[shape]])
    return tokens, length, 11 if want_yes else 12


def generate_sample(seed: int, index: int):
    """Pure function of (seed, index): (scene, image, tokens, length, answer)."""
    rng = Rng(seed).derive(_DATA_DOMAIN, index)
    for _ in range(100):
        scene = generate_scene(rng)
        try:
            tokens, length, answer = generate_question(scene, rng)
        except SceneRejected:
            continue
        return scene, render_image(scene), tokens, length, answer
    raise RuntimeError(f"no admissible scene after 100 draws (seed={seed}, index={index})")


@dataclass
class Dataset:
    images: np.ndarray     # (N, 3, 32, 32) float32
    tokens: np.ndarray     # (N, MAX_TOKENS) uint16, zero padded
    lengths: np.ndarray    # (N,) uint8
    answers: np.ndarray    # (N,) uint16
    seed: int
    vocab: tuple[str, ...] = WORDS
    answer_list: tuple[str, ...] = ANSWERS

    def __len__(self) -> int:
        return len(self.answers)

    def family(self, i: int) -> str:
        return question_family(self.tokens[i])

    def text(self, i: int) -> str:
        return question_text(self.tokens[i], int(self.lengths[i]), self.vocab)


def generate_dataset(seed: int, count: int) -> Dataset:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    images = np.empty((count, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    tokens = np.zeros((count, MAX_TOKENS), dtype=np.uint16)
    lengths = np.zeros(count, dtype=np.uint8)
    answers = np.zeros(count, dtype=np.uint16)
    for i in range(count):
        _, images[i], tokens[i], lengths[i], answers[i] = generate_sample(seed, i)
    return Dataset(images, tokens, lengths, answers, seed)


# ---------------------------------------------------------------------------
# exact question-only baselines
# ---------------------------------------------------------------------------

def blind_optimal_accuracy(ds: Dataset) -> float:
    """Best possible accuracy of any question-only predictor: per distinct
    question string, count the majority answer (exact, no learning)."""
    buckets: dict[bytes, dict[int, int]] = {}
    for i in range(len(ds)):
        key = ds.tokens[i].tobytes()
        counts = buckets.setdefault(key, {})
        a = int(ds.answers[i])
        counts[a] = counts.get(a, 0) + 1
    hits = sum(max(counts.values()) for counts in buckets.values())
    return hits / len(ds)


def majority_class_accuracy(ds: Dataset) -> float:
    _, counts = np.unique(ds.answers, return_counts=True)
    return counts.max() / len(ds)


def answer_histogram(ds: Dataset) -> dict[str, int]:
    hist = {a: 0 for a in ds.answer_list}
    values, counts = np.unique(ds.answers, return_counts=True)
    for v, c in zip(values, counts):
        hist[ds.answer_list[int(v)]] = int(c)
    return hist


# ---------------------------------------------------------------------------
# QVD1 file format
# ---------------------------------------------------------------------------

MAGIC = b"QVD1"
FORMAT_VERSION = 1


class DatasetError(Exception):
    """Base for dataset load failures."""


class BadMagicError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class IndexOverflowError(DatasetError):
    pass


class HeaderError(DatasetError):
    pass


def _sample_bytes(ds: Dataset) -> bytes:
    parts = []
    for i in range(len(ds)):
        parts.append(ds.images[i].astype("<f4").tobytes())
        length = int(ds.lengths[i])
        parts.append(struct.pack("<B", length))
        parts.append(ds.tokens[i, :length].astype("<u2").tobytes())
        parts.append(struct.pack("<H", int(ds.answers[i])))
    return b"".join(parts)


def serialize_dataset(ds: Dataset, path) -> None:
    samples = _sample_bytes(ds)
    body = (f"version={FORMAT_VERSION}\n"
            f"vocab={','.join(ds.vocab)}\n"
            f"answers={','.join(ds.answer_list)}\n"
            f"count={len(ds)}\n"
            f"image_shape=3,{IMAGE_SIZE},{IMAGE_SIZE}\n"
            f"seed={ds.seed}\n")
    crc = zlib.crc32(body.encode("utf-8") + samples) & 0xFFFFFFFF
    header = (body + f"crc32={crc}\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(samples)


def _parse_header(header: bytes) -> dict[str, str]:
    fields = {}
    for line in header.decode("utf-8").splitlines():
        if not line:
            continue
        if "=" not in line:
            raise HeaderError(f"malformed header line {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value
    return fields


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 8:
        raise TruncatedError("file ends inside the header length field")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise TruncatedError("file ends inside the header")
    header = raw[8:8 + header_len]
    fields = _parse_header(header)
    for key in ("version", "vocab", "answers", "count", "image_shape", "seed", "crc32"):
        if key not in fields:
            raise HeaderError(f"missing header field {key!r}")
    if int(fields["version"]) != FORMAT_VERSION:
        raise HeaderError(f"unsupported version {fields['version']}")
    vocab = tuple(fields["vocab"].split(","))
    answer_list = tuple(fields["answers"].split(","))
    count = int(fields["count"])
    shape = tuple(int(x) for x in fields["image_shape"].split(","))
    if shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise HeaderError(f"unsupported image shape {shape}")

    samples = raw[8 + header_len:]
    crc_line = f"crc32={fields['crc32']}\n".encode("utf-8")
    if not header.endswith(crc_line):
        raise HeaderError("crc32 must be the last header line")
    body = header[:-len(crc_line)]
    actual = zlib.crc32(body + samples) & 0xFFFFFFFF
    if actual != int(fields["crc32"]):
        raise ChecksumError(f"crc mismatch: stored {fields['crc32']}, computed {actual}")

    image_bytes = int(np.prod(shape)) * 4
    images = np.empty((count,) + shape, dtype=np.float32)
    tokens = np.zeros((count, MAX_TOKENS), dtype=np.uint16)
    lengths = np.zeros(count, dtype=np.uint8)
    answers = np.zeros(count, dtype=np.uint16)
    pos = 0
    for i in range(count):
        end = pos + image_bytes
        if end + 1 > len(samples):
            raise TruncatedError(f"sample {i} image truncated")
        images[i] = np.frombuffer(samples[pos:end], dtype="<f4").reshape(shape)
        length = samples[end]
        if length < 1 or length > MAX_TOKENS:
            raise IndexOverflowError(f"sample {i} token count {length} outside [1, {MAX_TOKENS}]")
        tok_end = end + 1 + 2 * length
        if tok_end + 2 > len(samples):
            raise TruncatedError(f"sample {i} tokens truncated")
        toks = np.frombuffer(samples[end + 1:tok_end], dtype="<u2")
        if toks.max() >= len(vocab):
            raise IndexOverflowError(f"sample {i} token {toks.max()} >= vocab {len(vocab)}")
        (answer,) = struct.unpack("<H", samples[tok_end:tok_end + 2])
        if answer >= len(answer_list):
            raise IndexOverflowError(f"sample {i} answer {answer} >= {len(answer_list)}")
        tokens[i, :length] = toks
        lengths[i] = length
        answers[i] = answer
        pos = tok_end + 2
    if pos != len(samples):
        raise TruncatedError(f"{len(samples) - pos} trailing bytes after last sample")
    return Dataset(images, tokens, lengths, answers, int(fields["seed"]),
                   vocab, answer_list)
