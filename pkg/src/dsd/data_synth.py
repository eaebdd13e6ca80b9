"""Two-object compositional scenes, their captions, and matching instances.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence(seed, spawn_key=(stream,))``; each purpose (attributes,
layout, mutation, dataset assembly) uses its own stream so that changing
one never perturbs another.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import FormatError, ParameterError, VocabularyError

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
PREDICATES = ("left_of", "right_of", "above", "below")
SLOTS = ("subject", "object", "predicate")

RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}

PAD, BOS = "<pad>", "<bos>"
VOCAB: tuple[str, ...] = (PAD, BOS) + COLORS + SHAPES + PREDICATES
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
CAPTION_LEN = 6

IMAGE_SIZE = 32
_MIN_SIZE, _MAX_SIZE = 8, 11
_GAP = 2
_MAX_OFFSET = 4

# SeedSequence spawn keys; one per independent use of a seed.
STREAM_ATTRIBUTES = 1
STREAM_LAYOUT = 2
STREAM_MUTATION = 3
STREAM_DATASET = 4


def rng_for(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(stream, *extra))))


class Thing(NamedTuple):
    color: str
    shape: str


ALL_THINGS = tuple(Thing(c, s) for c in COLORS for s in SHAPES)


class Box(NamedTuple):
    x0: int
    y0: int
    size: int

    @property
    def center(self) -> tuple[float, float]:
        return self.x0 + self.size / 2, self.y0 + self.size / 2


@dataclass(frozen=True)
class Scene:
    subject: Thing
    object: Thing
    predicate: str
    seed: int = 0

    def __post_init__(self):
        for thing in (self.subject, self.object):
            if thing.color not in COLORS or thing.shape not in SHAPES:
                raise VocabularyError(f"unknown object {thing}")
        if self.predicate not in PREDICATES:
            raise VocabularyError(f"unknown predicate {self.predicate!r}")

    @cached_property
    def jitter(self) -> tuple[Box, Box]:
        """Subject and object boxes, a pure function of (seed, predicate)."""
        return _layout(self.seed, self.predicate)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "subject": {"color": self.subject.color, "shape": self.subject.shape},
            "object": {"color": self.object.color, "shape": self.object.shape},
            "predicate": self.predicate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            subject=Thing(d["subject"]["color"], d["subject"]["shape"]),
            object=Thing(d["object"]["color"], d["object"]["shape"]),
            predicate=d["predicate"],
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class Caption:
    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != CAPTION_LEN:
            raise VocabularyError(f"caption must have {CAPTION_LEN} tokens, got {len(self.ids)}")
        for i in self.ids:
            if not 0 <= i < len(VOCAB):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(VOCAB)}")

    @property
    def text(self) -> str:
        return detokenize(self)


def generate_scene(seed: int) -> Scene:
    rng = rng_for(seed, STREAM_ATTRIBUTES)
    c1, s1, p, c2, s2 = rng.integers(0, [4, 3, 4, 4, 3])
    return Scene(Thing(COLORS[c1], SHAPES[s1]), Thing(COLORS[c2], SHAPES[s2]), PREDICATES[p], int(seed))


def _layout(seed: int, predicate: str) -> tuple[Box, Box]:
    rng = rng_for(seed, STREAM_LAYOUT, PREDICATES.index(predicate))
    while True:
        s1, s2 = (int(v) for v in rng.integers(_MIN_SIZE, _MAX_SIZE + 1, size=2))
        x1, y1 = (int(v) for v in rng.integers(0, IMAGE_SIZE - s1 + 1, size=2))
        x2, y2 = (int(v) for v in rng.integers(0, IMAGE_SIZE - s2 + 1, size=2))
        a, b = Box(x1, y1, s1), Box(x2, y2, s2)
        if _satisfies(a, b, predicate):
            return a, b


def _satisfies(a: Box, b: Box, predicate: str) -> bool:
    (ax, ay), (bx, by) = a.center, b.center
    if predicate in ("left_of", "right_of"):
        first, second = (a, b) if predicate == "left_of" else (b, a)
        return first.x0 + first.size + _GAP <= second.x0 and abs(ay - by) <= _MAX_OFFSET
    first, second = (a, b) if predicate == "above" else (b, a)
    return first.y0 + first.size + _GAP <= second.y0 and abs(ax - bx) <= _MAX_OFFSET


def shape_mask(shape: str, box: Box, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean pixel mask of a hard-edged shape inside ``box``."""
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = xs + 0.5, ys + 0.5
    inside_box = (xs >= box.x0) & (xs < box.x0 + box.size) & (ys >= box.y0) & (ys < box.y0 + box.size)
    cx, cy = box.center
    half = box.size / 2
    if shape == "square":
        return inside_box
    if shape == "circle":
        return inside_box & ((px - cx) ** 2 + (py - cy) ** 2 <= half * half)
    if shape == "triangle":
        # Apex at the top centre, base along the bottom edge.
        depth = (py - box.y0) / box.size
        return inside_box & (np.abs(px - cx) <= depth * half)
    raise VocabularyError(f"unknown shape {shape!r}")


def render(scene: Scene) -> np.ndarray:
    """32x32x3 float image in [0, 1]: white background, two flat-coloured shapes."""
    img = np.ones((IMAGE_SIZE, IMAGE_SIZE, 3))
    for thing, box in zip((scene.subject, scene.object), scene.jitter):
        img[shape_mask(thing.shape, box)] = RGB[thing.color]
    return img


def mutate(scene: Scene, slot: str, seed: int) -> Scene:
    """Replace the value in one slot by a uniformly drawn different value."""
    rng = rng_for(seed, STREAM_MUTATION)
    if slot == "predicate":
        choices = [p for p in PREDICATES if p != scene.predicate]
        return Scene(scene.subject, scene.object, choices[rng.integers(len(choices))], scene.seed)
    if slot not in ("subject", "object"):
        raise ParameterError(f"unknown slot {slot!r}; expected one of {SLOTS}")
    old = getattr(scene, slot)
    choices = [t for t in ALL_THINGS if t != old]
    new = choices[rng.integers(len(choices))]
    if slot == "subject":
        return Scene(new, scene.object, scene.predicate, scene.seed)
    return Scene(scene.subject, new, scene.predicate, scene.seed)


def tokenize(scene: Scene) -> Caption:
    words = (BOS, scene.subject.color, scene.subject.shape, scene.predicate, scene.object.color, scene.object.shape)
    return Caption(tuple(WORD_TO_ID[w] for w in words))


def detokenize(caption: Caption) -> str:
    return " ".join(VOCAB[i] for i in caption.ids[1:])


def parse_caption(text: str) -> Caption:
    """Inverse of :func:`detokenize`, e.g. ``"red circle left_of blue square"``."""
    words = text.split()
    if len(words) != CAPTION_LEN - 1:
        raise VocabularyError(f"caption needs {CAPTION_LEN - 1} words, got {len(words)}: {text!r}")
    unknown = [w for w in words if w not in WORD_TO_ID or w in (PAD, BOS)]
    if unknown:
        raise VocabularyError(f"unknown word(s) {unknown} in caption {text!r}")
    ids = (WORD_TO_ID[BOS],) + tuple(WORD_TO_ID[w] for w in words)
    expected = (COLORS, SHAPES, PREDICATES, COLORS, SHAPES)
    for w, domain in zip(words, expected):
        if w not in domain:
            raise VocabularyError(f"word {w!r} in the wrong position of caption {text!r}")
    return Caption(ids)


def caption_slots_differing(a: Caption, b: Caption) -> tuple[str, ...]:
    """Slots (subject/object/predicate) in which two captions differ."""
    out = []
    if a.ids[1:3] != b.ids[1:3]:
        out.append("subject")
    if a.ids[4:6] != b.ids[4:6]:
        out.append("object")
    if a.ids[3] != b.ids[3]:
        out.append("predicate")
    return tuple(out)


@dataclass(frozen=True)
class MatchInstance:
    scene: Scene
    candidates: tuple[Caption, ...]
    true_index: int

    @property
    def image(self) -> np.ndarray:
        return render(self.scene)

    @property
    def positive(self) -> Caption:
        return self.candidates[self.true_index]

    def negative_slots(self) -> dict[int, str]:
        """Candidate index -> mutated slot, for every negative."""
        pos = self.positive
        out = {}
        for i, c in enumerate(self.candidates):
            if i == self.true_index:
                continue
            diff = caption_slots_differing(pos, c)
            out[i] = diff[0] if len(diff) == 1 else "+".join(diff)
        return out

    def to_record(self) -> dict:
        rec = self.scene.to_dict()
        rec["candidates"] = [list(c.ids) for c in self.candidates]
        rec["true_index"] = int(self.true_index)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "MatchInstance":
        try:
            scene = Scene.from_dict(rec)
            cands = tuple(Caption(tuple(int(i) for i in c)) for c in rec["candidates"])
            true_index = int(rec["true_index"])
        except (KeyError, TypeError, VocabularyError) as exc:
            raise FormatError(f"bad dataset record: {exc}") from None
        if not 0 <= true_index < len(cands):
            raise FormatError(f"true_index {true_index} out of range for {len(cands)} candidates")
        return cls(scene, cands, true_index)


def make_instance(scene: Scene, n_candidates: int, rng: np.random.Generator) -> MatchInstance:
    """One positive plus ``n_candidates - 1`` distinct single-slot negatives."""
    if n_candidates < 2:
        raise ParameterError(f"need at least 2 candidates, got {n_candidates}")
    # 11 + 11 + 3 distinct single-slot mutations exist.
    if n_candidates > 26:
        raise ParameterError(f"at most 26 distinct candidates exist, got {n_candidates}")
    positive = tokenize(scene)
    seen = {positive}
    negatives: list[Caption] = []
    while len(negatives) < n_candidates - 1:
        slot = SLOTS[rng.integers(3)]
        cap = tokenize(mutate(scene, slot, int(rng.integers(2**63))))
        if cap not in seen:
            seen.add(cap)
            negatives.append(cap)
    true_index = int(rng.integers(n_candidates))
    negatives.insert(true_index, positive)
    return MatchInstance(scene, tuple(negatives), true_index)


def build_dataset(
    n_train: int, n_eval: int, candidates_per_instance: int, seed: int
) -> tuple[list[MatchInstance], list[MatchInstance]]:
    """Train/eval splits of matching instances; scene seeds never repeat across splits."""
    if candidates_per_instance < 2:
        raise ParameterError(f"candidates_per_instance must be >= 2, got {candidates_per_instance}")
    rng = rng_for(seed, STREAM_DATASET)
    total = n_train + n_eval
    seeds: list[int] = []
    seen: set[int] = set()
    while len(seeds) < total:
        s = int(rng.integers(2**63))
        if s not in seen:
            seen.add(s)
            seeds.append(s)
    instances = [make_instance(generate_scene(s), candidates_per_instance, rng) for s in seeds]
    return instances[:n_train], instances[n_train:]


def all_captions() -> Iterable[Caption]:
    for s in ALL_THINGS:
        for p in PREDICATES:
            for o in ALL_THINGS:
                yield tokenize(Scene(s, o, p))


# -- dataset files ----------------------------------------------------------


def write_jsonl(instances: Sequence[MatchInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[MatchInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            out.append(MatchInstance.from_record(rec))
    return out


def save_splits(out_dir: str | Path, train: Sequence[MatchInstance], eval_: Sequence[MatchInstance]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(train, out / "train.jsonl")
    write_jsonl(eval_, out / "eval.jsonl")


def load_split(data: str | Path, split: str) -> list[MatchInstance]:
    """Load ``split`` ('train' or 'eval') from a directory, or a file directly."""
    p = Path(data)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.exists():
        raise FormatError(f"dataset file not found: {p}")
    return read_jsonl(p)
