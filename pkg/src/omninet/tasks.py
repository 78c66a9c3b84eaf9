"""Seeded synthetic tasks covering the four spatio-temporal input archetypes.

* tagging     - text in, one tag per word out         (t > 1, s = 1)
* captioning  - image in, caption out                 (t = 1, s > 1)
* vqa         - image + question in, one answer token (two inputs)
* video       - 6-frame clip in, one motion class     (t > 1, s > 1)

Every generator is a pure function of ``(seed, index)`` built on a
counter-based Philox stream and integer arithmetic only, so samples are
bit-identical across platforms. Each task ships a rule oracle that solves
100% of its samples.

Split membership is decided by a hash of the serialized sample, so two
identical samples can never land in different splits.
"""

from __future__ import annotations

import functools
import hashlib
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .errors import ContractError
from .peripherals import LANGUAGE, VISION, Vocabulary

IGNORE_INDEX = -100
SPLITS = ("train", "val", "test")
TASK_NAMES = ("tagging", "captioning", "vqa", "video")
TASK_IDS = {name: i for i, name in enumerate(TASK_NAMES)}
IMAGE_SIZE = 32
N_FRAMES = 6


class CounterRng:
    """Integer draws from Philox keyed by (seed, stream, index)."""

    def __init__(self, seed: int, stream: int, index: int):
        key = np.array([seed % 2**64, (stream << 48) | index], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)

    def below(self, n: int) -> int:
        return int(self._bits.random_raw()) % n

    def choice(self, seq: Sequence):
        return seq[self.below(len(seq))]

    def chance(self, num: int, den: int) -> bool:
        return self.below(den) < num


# ---------------------------------------------------------------------------
# Vocabularies

DET = ("the", "a", "every", "some", "this")
ADJ = ("big", "small", "old", "quick", "lazy", "happy", "tall", "young")
NOUN = ("dog", "cat", "bird", "man", "woman", "car", "tree", "house", "boy", "girl")
VERB = ("sees", "likes", "chases", "finds", "eats", "hears", "wants", "takes")
ADV = ("quickly", "slowly", "often", "never", "today")
AMBIGUOUS = ("run", "watch", "fly", "park")  # NOUN after DET/ADJ, VERB after a NOUN
TAGS = ("DET", "ADJ", "NOUN", "VERB", "ADV")
LEXICON = {**{w: "DET" for w in DET}, **{w: "ADJ" for w in ADJ}, **{w: "NOUN" for w in NOUN},
           **{w: "VERB" for w in VERB}, **{w: "ADV" for w in ADV}}

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
QUADRANTS = ("topleft", "topright", "bottomleft", "bottomright")
RGB = {"red": (255, 0, 0), "green": (0, 255, 0), "blue": (0, 0, 255), "yellow": (255, 255, 0)}
DIRECTIONS = {
    "up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1),
    "upleft": (-1, -1), "upright": (-1, 1), "downleft": (1, -1), "downright": (1, 1),
}
VIDEO_CLASSES = tuple(DIRECTIONS) + ("still", "blinking")
QUESTION_WORDS = ("what", "color", "is", "where", "how", "many", "shapes")

LANGUAGE_VOCAB = Vocabulary(
    ["<pad>"] + list(dict.fromkeys(DET + ADJ + NOUN + VERB + ADV + AMBIGUOUS + QUESTION_WORDS + SHAPES))
)
EOS = "<eos>"
TAG_VOCAB = Vocabulary((EOS,) + TAGS)
CAPTION_VOCAB = Vocabulary((EOS, "and") + COLORS + SHAPES + QUADRANTS)
ANSWER_VOCAB = Vocabulary(COLORS + QUADRANTS + ("one", "two"))
VIDEO_VOCAB = Vocabulary(VIDEO_CLASSES)


# ---------------------------------------------------------------------------
# Tagging

def _noun_phrase(rng: CounterRng) -> list[str]:
    words = [rng.choice(DET)] + [rng.choice(ADJ) for _ in range(rng.below(3))]
    words.append(rng.choice(AMBIGUOUS) if rng.chance(3, 10) else rng.choice(NOUN))
    return words


def oracle_tags(words: Sequence[str]) -> list[str]:
    """Lexicon lookup; ambiguous words are nouns right after a determiner or adjective."""
    tags: list[str] = []
    for w in words:
        if w in AMBIGUOUS:
            tags.append("NOUN" if tags and tags[-1] in ("DET", "ADJ") else "VERB")
        else:
            tags.append(LEXICON[w])
    return tags


def gen_tagging(seed: int, index: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Sentence ``NP VERB NP [ADV]`` as language ids, and its tag ids (no end token)."""
    rng = CounterRng(seed, TASK_IDS["tagging"], index)
    words = _noun_phrase(rng)
    words.append(rng.choice(AMBIGUOUS) if rng.chance(3, 10) else rng.choice(VERB))
    words += _noun_phrase(rng)
    if rng.chance(1, 2):
        words.append(rng.choice(ADV))
    tags = oracle_tags(words)
    return tuple(LANGUAGE_VOCAB.index[w] for w in words), tuple(TAG_VOCAB.index[t] for t in tags)


# ---------------------------------------------------------------------------
# Images

_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]


def shape_mask(shape: str, cy: int, cx: int, r: int) -> np.ndarray:
    dy, dx = _YY - cy, _XX - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "triangle":
        return (np.abs(dy) <= r) & (2 * np.abs(dx) <= dy + r)
    raise ValueError(shape)


def draw(img: np.ndarray, shape: str, color: str, cy: int, cx: int, r: int) -> None:
    img[shape_mask(shape, cy, cx, r)] = RGB[color]


@dataclass(frozen=True)
class Placed:
    shape: str
    color: str
    quadrant: str


def _place(rng: CounterRng, img: np.ndarray, shape: str, color: str, quadrant: str) -> None:
    r = 5 + rng.below(2)
    qi = QUADRANTS.index(quadrant)
    oy, ox = (qi // 2) * 16, (qi % 2) * 16
    span = 16 - 2 * r  # keeps the whole shape inside its quadrant
    draw(img, shape, color, oy + r + rng.below(span), ox + r + rng.below(span), r)


def _scene(rng: CounterRng, distinct_shapes: bool) -> tuple[np.ndarray, list[Placed]]:
    n = 1 + rng.below(2)
    quads = list(QUADRANTS)
    shapes = list(SHAPES)
    placed = []
    for _ in range(n):
        q = quads.pop(rng.below(len(quads)))
        s = shapes.pop(rng.below(len(shapes))) if distinct_shapes else rng.choice(SHAPES)
        placed.append(Placed(s, rng.choice(COLORS), q))
    placed.sort(key=lambda p: QUADRANTS.index(p.quadrant))
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    for p in placed:
        _place(rng, img, p.shape, p.color, p.quadrant)
    return img, placed


def caption_words(placed: Sequence[Placed]) -> list[str]:
    words: list[str] = []
    for i, p in enumerate(placed):
        if i:
            words.append("and")
        words += [p.color, p.shape, p.quadrant]
    return words


def _classify_blob(mask: np.ndarray) -> str:
    rows = np.flatnonzero(mask.any(1))
    top = int(mask[rows[0]].sum())
    bottom = int(mask[rows[-1]].sum())
    width = int(np.flatnonzero(mask.any(0)).size)
    if top < bottom:
        return "triangle"
    return "square" if top == width else "circle"


def _color_of(pixel: np.ndarray) -> str:
    return next(c for c, rgb in RGB.items() if tuple(int(v) for v in pixel) == rgb)


def read_scene(img: np.ndarray) -> list[Placed]:
    """Pixel-rule oracle: recover (shape, color, quadrant) of each drawn shape."""
    found = []
    for qi, q in enumerate(QUADRANTS):
        oy, ox = (qi // 2) * 16, (qi % 2) * 16
        patch = img[oy : oy + 16, ox : ox + 16]
        mask = patch.any(-1)
        if mask.any():
            ys, xs = np.nonzero(mask)
            found.append(Placed(_classify_blob(mask), _color_of(patch[ys[0], xs[0]]), q))
    return found


def gen_captioning(seed: int, index: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Image with 1-2 shapes and its caption ids, end token included."""
    rng = CounterRng(seed, TASK_IDS["captioning"], index)
    img, placed = _scene(rng, distinct_shapes=False)
    words = caption_words(placed) + [EOS]
    return img, tuple(CAPTION_VOCAB.index[w] for w in words)


def gen_vqa(seed: int, index: int) -> tuple[tuple[np.ndarray, tuple[int, ...]], int]:
    """(image, question ids) and the answer id. Shapes in one image are distinct."""
    rng = CounterRng(seed, TASK_IDS["vqa"], index)
    img, placed = _scene(rng, distinct_shapes=True)
    kind = rng.below(3)
    if kind == 2:
        question, answer = "how many shapes", ("one", "two")[len(placed) - 1]
    else:
        target = rng.choice(placed)
        if kind == 0:
            question, answer = f"what color is the {target.shape}", target.color
        else:
            question, answer = f"where is the {target.shape}", target.quadrant
    return (img, tuple(LANGUAGE_VOCAB.encode(question))), ANSWER_VOCAB.index[answer]


def answer_question(img: np.ndarray, question: Sequence[int]) -> int:
    """Template-inversion oracle for the VQA task."""
    words = LANGUAGE_VOCAB.decode(question).split()
    scene = read_scene(img)
    if words[0] == "how":
        return ANSWER_VOCAB.index[("one", "two")[len(scene) - 1]]
    target = next(p for p in scene if p.shape == words[-1])
    return ANSWER_VOCAB.index[target.color if words[0] == "what" else target.quadrant]


# ---------------------------------------------------------------------------
# Video

def render_video(shape: str, color: str, r: int, positions: Sequence[tuple[int, int] | None]) -> np.ndarray:
    frames = np.zeros((len(positions), IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    for f, pos in enumerate(positions):
        if pos is not None:
            draw(frames[f], shape, color, pos[0], pos[1], r)
    return frames


def video_positions(label: str, start: tuple[int, int], speed: int, phase: int = 0) -> list[tuple[int, int] | None]:
    if label == "still":
        return [start] * N_FRAMES
    if label == "blinking":
        return [start if (f + phase) % 2 == 0 else None for f in range(N_FRAMES)]
    dy, dx = DIRECTIONS[label]
    return [(start[0] + f * speed * dy, start[1] + f * speed * dx) for f in range(N_FRAMES)]


@dataclass(frozen=True)
class VideoScript:
    label: str
    shape: str
    color: str
    r: int
    positions: tuple


def video_script(seed: int, index: int) -> VideoScript:
    """Everything drawn for video sample ``index``: class, shape, color, size, path."""
    rng = CounterRng(seed, TASK_IDS["video"], index)
    label = rng.choice(VIDEO_CLASSES)
    shape, color = rng.choice(SHAPES), rng.choice(COLORS)
    r = 4 + rng.below(2)
    speed = 2 + rng.below(3)
    travel = (N_FRAMES - 1) * speed
    lo, hi = r, IMAGE_SIZE - 1 - r

    def coord(step: int) -> int:
        if step > 0:
            return lo + rng.below(hi - lo - travel + 1)
        if step < 0:
            return lo + travel + rng.below(hi - lo - travel + 1)
        return lo + rng.below(hi - lo + 1)

    dy, dx = DIRECTIONS.get(label, (0, 0))
    start = (coord(dy), coord(dx))
    return VideoScript(label, shape, color, r, tuple(video_positions(label, start, speed, rng.below(2))))


def gen_video(seed: int, index: int) -> tuple[np.ndarray, int]:
    """Six frames of one shape moving in one of 8 directions, still, or blinking."""
    script = video_script(seed, index)
    frames = render_video(script.shape, script.color, script.r, script.positions)
    return frames, VIDEO_VOCAB.index[script.label]


def classify_video(frames: np.ndarray) -> int:
    """Frame-difference oracle: displacement of the shape centroid, or blinking."""
    centroids = []
    for frame in frames:
        ys, xs = np.nonzero(frame.any(-1))
        if ys.size == 0:
            return VIDEO_VOCAB.index["blinking"]
        centroids.append((ys.mean(), xs.mean()))
    dy = np.sign(round(centroids[-1][0] - centroids[0][0]))
    dx = np.sign(round(centroids[-1][1] - centroids[0][1]))
    if dy == 0 and dx == 0:
        return VIDEO_VOCAB.index["still"]
    return VIDEO_VOCAB.index[next(k for k, v in DIRECTIONS.items() if v == (dy, dx))]


# ---------------------------------------------------------------------------
# Task specs and datasets

@dataclass(frozen=True)
class Sample:
    inputs: tuple  # np.uint8 pixels for vision inputs, tuple of ids for text
    target: tuple[int, ...]  # output ids; sequence tasks end with the end token

    def serialize(self, domains: Sequence[int]) -> bytes:
        """Byte layout of one record (all integers little-endian):

        u8 n_inputs; per input: u8 domain, u8 ndim, u32 dims[ndim], payload
        (u8 pixels for vision, u32 ids for language); then u16 n_target and
        u32 target ids.
        """
        out = [struct.pack("<B", len(self.inputs))]
        for domain, x in zip(domains, self.inputs):
            arr = np.asarray(x, dtype=np.uint8 if domain == VISION else "<u4")
            out.append(struct.pack(f"<BB{arr.ndim}I", domain, arr.ndim, *arr.shape))
            out.append(arr.tobytes())
        out.append(struct.pack(f"<H{len(self.target)}I", len(self.target), *self.target))
        return b"".join(out)

    @classmethod
    def deserialize(cls, raw: bytes) -> tuple["Sample", tuple[int, ...]]:
        (n,), pos = struct.unpack_from("<B", raw), 1
        inputs, domains = [], []
        for _ in range(n):
            domain, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            dtype = np.uint8 if domain == VISION else np.dtype("<u4")
            count = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(shape)
            pos += count * np.dtype(dtype).itemsize
            inputs.append(arr.copy() if domain == VISION else tuple(int(v) for v in arr))
            domains.append(domain)
        (m,) = struct.unpack_from("<H", raw, pos)
        target = struct.unpack_from(f"<{m}I", raw, pos + 2)
        return cls(tuple(inputs), tuple(target)), tuple(domains)


def _tagging_sample(seed, index):
    words, tags = gen_tagging(seed, index)
    return Sample((words,), tags + (TAG_VOCAB.index[EOS],))


def _captioning_sample(seed, index):
    img, caption = gen_captioning(seed, index)
    return Sample((img,), caption)


def _vqa_sample(seed, index):
    (img, question), answer = gen_vqa(seed, index)
    return Sample((img, question), (answer,))


def _video_sample(seed, index):
    frames, label = gen_video(seed, index)
    return Sample((frames,), (label,))


@dataclass(frozen=True)
class TaskSpec:
    name: str
    task_id: int
    domains: tuple[int, ...]
    vocab: Vocabulary
    max_len: int
    kind: str  # "sequence" or "class"
    seed: int = 0
    split_sizes: tuple[int, int, int] = (8000, 1000, 1000)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def end_token(self) -> int | None:
        return self.vocab.index[EOS] if self.kind == "sequence" else None

    def generate(self, index: int) -> Sample:
        return _GENERATORS[self.name](self.seed, index)

    def split(self, split: str) -> list[Sample]:
        return build_dataset(self)[split]


_GENERATORS: dict[str, Callable[[int, int], Sample]] = {
    "tagging": _tagging_sample,
    "captioning": _captioning_sample,
    "vqa": _vqa_sample,
    "video": _video_sample,
}


def make_task(name: str, seed: int = 0, split_sizes: tuple[int, int, int] = (8000, 1000, 1000)) -> TaskSpec:
    table = {
        "tagging": ((LANGUAGE,), TAG_VOCAB, 13, "sequence"),
        "captioning": ((VISION,), CAPTION_VOCAB, 8, "sequence"),
        "vqa": ((VISION, LANGUAGE), ANSWER_VOCAB, 1, "class"),
        "video": ((VISION,), VIDEO_VOCAB, 1, "class"),
    }
    domains, vocab, max_len, kind = table[name]
    return TaskSpec(name, TASK_IDS[name], domains, vocab, max_len, kind, seed, tuple(split_sizes))


def split_of(digest_value: int, sizes: Sequence[int]) -> str:
    bucket = digest_value % sum(sizes)
    if bucket < sizes[0]:
        return "train"
    return "val" if bucket < sizes[0] + sizes[1] else "test"


def content_hash(sample: Sample, domains: Sequence[int]) -> int:
    return int.from_bytes(hashlib.blake2b(sample.serialize(domains), digest_size=8).digest(), "little")


@functools.lru_cache(maxsize=16)
def _build(name: str, seed: int, sizes: tuple[int, int, int]) -> dict[str, list[Sample]]:
    task = make_task(name, seed, sizes)
    out: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    want = dict(zip(SPLITS, sizes))
    index = 0
    while any(len(out[s]) < want[s] for s in SPLITS):
        sample = task.generate(index)
        split = split_of(content_hash(sample, task.domains), sizes)
        if len(out[split]) < want[split]:
            out[split].append(sample)
        index += 1
    return out


def build_dataset(task: TaskSpec) -> dict[str, list[Sample]]:
    """Scan generator indices 0, 1, 2, ... and route each sample to the split
    picked by its content hash until every split is full."""
    return _build(task.name, task.seed, task.split_sizes)


def oracle_predict(task: TaskSpec, sample: Sample) -> tuple[int, ...]:
    """Rule-oracle output for a sample, in the same id space as ``sample.target``."""
    if task.name == "tagging":
        words = LANGUAGE_VOCAB.decode(sample.inputs[0]).split()
        return tuple(TAG_VOCAB.index[t] for t in oracle_tags(words)) + (TAG_VOCAB.index[EOS],)
    if task.name == "captioning":
        words = caption_words(read_scene(sample.inputs[0])) + [EOS]
        return tuple(CAPTION_VOCAB.index[w] for w in words)
    if task.name == "vqa":
        return (answer_question(*sample.inputs),)
    return (classify_video(sample.inputs[0]),)


def chance_level(task: TaskSpec, split: str = "val") -> float:
    """Primary metric (percent) of the best input-independent constant prediction."""
    train = Counter(s.target for s in task.split("train"))
    best = train.most_common(1)[0][0]
    samples = task.split(split)
    if task.name == "tagging":
        tag = Counter(t for s in task.split("train") for t in s.target[:-1]).most_common(1)[0][0]
        total = sum(len(s.target) - 1 for s in samples)
        return 100.0 * sum(t == tag for s in samples for t in s.target[:-1]) / total
    return 100.0 * sum(s.target == best for s in samples) / len(samples)


# ---------------------------------------------------------------------------
# Batching

@dataclass
class BatchInput:
    domain: int
    data: torch.Tensor  # vision: [B, F, h, w, c] floats in [0, 1]; language: [B, t] ids
    mask: torch.Tensor | None = None  # language: [B, t], True on real tokens


@dataclass
class Batch:
    task: str
    inputs: list[BatchInput]
    y_shifted: torch.Tensor  # [B, N-1]
    targets: torch.Tensor  # [B, N], IGNORE_INDEX on padding
    samples: list[Sample]

    def __len__(self) -> int:
        return self.targets.shape[0]


def collate(task: TaskSpec, samples: Sequence[Sample], dtype=torch.float32) -> Batch:
    if not samples:
        raise ContractError("make_batch needs at least one sample")
    inputs = []
    for k, domain in enumerate(task.domains):
        column = [s.inputs[k] for s in samples]
        if domain == VISION:
            arr = np.stack([c if c.ndim == 4 else c[None] for c in column])
            inputs.append(BatchInput(domain, torch.from_numpy(arr).to(dtype) / 255.0))
        else:
            t = max(len(c) for c in column)
            ids = torch.zeros(len(column), t, dtype=torch.long)
            mask = torch.zeros(len(column), t, dtype=torch.bool)
            for i, c in enumerate(column):
                ids[i, : len(c)] = torch.tensor(c)
                mask[i, : len(c)] = True
            inputs.append(BatchInput(domain, ids, None if bool(mask.all()) else mask))
    n = max(len(s.target) for s in samples)
    targets = torch.full((len(samples), n), IGNORE_INDEX, dtype=torch.long)
    for i, s in enumerate(samples):
        targets[i, : len(s.target)] = torch.tensor(s.target)
    y_shifted = targets[:, :-1].clamp(min=0)
    return Batch(task.name, inputs, y_shifted, targets, list(samples))


def make_batch(task: TaskSpec, indices: Sequence[int], split: str = "train", dtype=torch.float32) -> Batch:
    """Padded batch of ``task.split(split)[i]`` for i in ``indices``."""
    if len(indices) == 0:
        raise ContractError("make_batch needs at least one index")
    data = task.split(split)
    return collate(task, [data[i] for i in indices], dtype)


def iter_batches(task: TaskSpec, split: str, batch_size: int, limit: int | None = None) -> Iterator[Batch]:
    n = len(task.split(split)) if limit is None else min(limit, len(task.split(split)))
    for start in range(0, n, batch_size):
        yield make_batch(task, range(start, min(start + batch_size, n)), split)


# ---------------------------------------------------------------------------
# Export

EXPORT_MAGIC = b"OMNINET-DATASET 1\n"


def export_split(task: TaskSpec, split: str, path: str | Path) -> int:
    """Write a split as: magic line, then per record ``u32 length`` + record bytes."""
    samples = task.split(split)
    with open(path, "wb") as fh:
        fh.write(EXPORT_MAGIC)
        for s in samples:
            rec = s.serialize(task.domains)
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)
    return len(samples)


def read_export(path: str | Path) -> list[Sample]:
    raw = Path(path).read_bytes()
    if not raw.startswith(EXPORT_MAGIC):
        raise ValueError(f"{path}: not an exported dataset")
    pos, out = len(EXPORT_MAGIC), []
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        out.append(Sample.deserialize(raw[pos + 4 : pos + 4 + n])[0])
        pos += 4 + n
    return out


# ---------------------------------------------------------------------------
# Metrics

def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence[Sequence[int]], references: Sequence[Sequence[int]], max_n: int = 4) -> float:
    """Corpus BLEU-4 with one reference per candidate and no smoothing."""
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matched[n - 1] += sum(min(v, r[g]) for g, v in c.items())
            total[n - 1] += sum(c.values())
    if cand_len == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(np.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if cand_len > ref_len else float(np.exp(1 - ref_len / cand_len))
    return float(bp * np.exp(log_p))
