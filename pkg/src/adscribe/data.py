"""Feature and annotation files, the synthetic movie generator, and window sampling."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .text import Vocabulary

log = logging.getLogger(__name__)

MAGIC = b"ADF1"
_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    pass


@dataclass
class AdEvent:
    """Inclusive frame interval in movie time, with an optional script and score."""

    start: int
    end: int
    script: str | None = None
    score: float = 1.0

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid interval [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    @property
    def center(self) -> float:
        return (self.start + self.end) / 2


@dataclass
class MovieRecord:
    movie_id: str
    features: np.ndarray
    annotations: list[AdEvent] = field(default_factory=list)
    fps: float = 1.0

    def __post_init__(self):
        n = self.n_frames
        prev_end = -1
        for ev in self.annotations:
            if ev.end >= n:
                raise ValueError(f"{self.movie_id}: event [{ev.start}, {ev.end}] beyond {n} frames")
            if ev.start <= prev_end:
                raise ValueError(f"{self.movie_id}: annotations must be sorted and non-overlapping")
            prev_end = ev.end

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def frame_labels(self) -> np.ndarray:
        y = np.zeros(self.n_frames, dtype=np.int8)
        for ev in self.annotations:
            y[ev.start: ev.end + 1] = 1
        return y


# --- feature files -------------------------------------------------------------

def save_features(path, features) -> None:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    t, d = arr.shape
    if t >= 2**32 or d >= 2**32:
        raise FormatError("dimension does not fit in 32 bits")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, t, d))
        fh.write(payload.tobytes())


def load_features(path) -> np.ndarray:
    """Read an ADF1 file into a (T, D) float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, t, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * t * d
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, d).astype(np.float32)


# --- annotations ---------------------------------------------------------------

def load_annotations(path) -> dict[str, list[AdEvent]]:
    """JSON-lines {movie_id, start_frame, end_frame, script}; overlapping events are merged."""
    per_movie: dict[str, list[AdEvent]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                movie_id = str(rec["movie_id"])
                start, end = int(rec["start_frame"]), int(rec["end_frame"])
                script = rec.get("script")
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed annotation ({exc})") from exc
            if start < 0 or end < 0:
                raise FormatError(f"{path}:{lineno}: negative frame index")
            if start > end:
                raise FormatError(f"{path}:{lineno}: start_frame {start} > end_frame {end}")
            per_movie.setdefault(movie_id, []).append(AdEvent(start, end, script))
    return {mid: _merge_overlaps(mid, evs) for mid, evs in per_movie.items()}


def _merge_overlaps(movie_id: str, events: list[AdEvent]) -> list[AdEvent]:
    events = sorted(events, key=lambda e: (e.start, e.end))
    merged: list[AdEvent] = []
    for ev in events:
        if merged and ev.start <= merged[-1].end:
            last = merged[-1]
            log.warning("%s: merging overlapping events [%d, %d] and [%d, %d]",
                        movie_id, last.start, last.end, ev.start, ev.end)
            scripts = [s for s in (last.script, ev.script) if s]
            merged[-1] = AdEvent(last.start, max(last.end, ev.end), " ".join(scripts) or None)
        else:
            merged.append(AdEvent(ev.start, ev.end, ev.script))
    return merged


def save_annotations(path, movies) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for movie in movies:
            for ev in movie.annotations:
                fh.write(json.dumps({"movie_id": movie.movie_id, "start_frame": ev.start,
                                     "end_frame": ev.end, "script": ev.script}) + "\n")


# --- synthetic movies ----------------------------------------------------------

CONCEPT_TEMPLATES = (
    ("someone opens the front door .", "someone slowly opens the front door ."),
    ("a car drives down the road .", "a red car drives down the road ."),
    ("she looks out of the window .", "she quietly looks out of the window ."),
    ("he runs across the field .", "he runs across the green field ."),
    ("the dog barks at the stranger .", "the old dog barks at the stranger ."),
    ("rain falls on the city .", "heavy rain falls on the city ."),
    ("they sit down at the table .", "they sit down at the kitchen table ."),
    ("a woman smiles at him .", "a young woman smiles at him ."),
    ("the boat drifts across the lake .", "the small boat drifts across the lake ."),
    ("snow covers the mountain .", "fresh snow covers the mountain ."),
    ("the crowd cheers loudly .", "the whole crowd cheers loudly ."),
    ("a bird flies over the house .", "a black bird flies over the house ."),
)


@dataclass
class SynthConfig:
    seed: int = 0
    n_train: int = 200
    n_val: int = 20
    n_test: int = 20
    frames: int = 256
    dim: int = 16
    n_concepts: int = 8
    sigma: float = 0.3
    signature_scale: float = 1.0
    min_event: int = 4
    max_event: int = 16
    min_gap: int = 32
    max_gap: int = 64
    fps: float = 1.0

    def __post_init__(self):
        if self.n_concepts > self.dim:
            raise ValueError("more concepts than feature dimensions: signatures cannot be orthogonal")
        if self.n_concepts > len(CONCEPT_TEMPLATES):
            raise ValueError(f"at most {len(CONCEPT_TEMPLATES)} concepts have script templates")
        if not 1 <= self.min_event <= self.max_event:
            raise ValueError("need 1 <= min_event <= max_event")
        if self.min_gap < 0 or self.max_gap < self.min_gap:
            raise ValueError("need 0 <= min_gap <= max_gap")

    def grammar(self) -> dict[int, tuple[str, ...]]:
        return {c: CONCEPT_TEMPLATES[c] for c in range(self.n_concepts)}

    def vocabulary(self) -> Vocabulary:
        words = []
        for templates in self.grammar().values():
            for t in templates:
                words.extend(t.split())
        return Vocabulary(words)


@dataclass
class SynthDataset:
    config: SynthConfig
    signatures: np.ndarray
    train: list[MovieRecord]
    val: list[MovieRecord]
    test: list[MovieRecord]
    concepts: dict[str, list[int]] = field(default_factory=dict)

    @property
    def vocab(self) -> Vocabulary:
        return self.config.vocabulary()

    def split(self, name: str) -> list[MovieRecord]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def make_signatures(n: int, dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return scale * q[:, :n].T


def synth_dataset(cfg: SynthConfig) -> SynthDataset:
    """Noise background with orthogonal concept signatures painted over each event."""
    rng = np.random.default_rng(cfg.seed)
    signatures = make_signatures(cfg.n_concepts, cfg.dim, cfg.signature_scale, rng)
    grammar = cfg.grammar()
    splits = {"train": [], "val": [], "test": []}
    concepts: dict[str, list[int]] = {}
    counts = (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test))
    for split, count in counts:
        for i in range(count):
            movie_id = f"{split}_{i:04d}"
            feats = rng.normal(0.0, cfg.sigma, (cfg.frames, cfg.dim))
            events, ids = [], []
            pos = int(rng.integers(0, cfg.max_gap + 1))
            while True:
                length = int(rng.integers(cfg.min_event, cfg.max_event + 1))
                if pos + length > cfg.frames:
                    break
                concept = int(rng.integers(cfg.n_concepts))
                script = grammar[concept][int(rng.integers(len(grammar[concept])))]
                feats[pos: pos + length] += signatures[concept]
                events.append(AdEvent(pos, pos + length - 1, script))
                ids.append(concept)
                pos += length + int(rng.integers(cfg.min_gap, cfg.max_gap + 1))
            splits[split].append(MovieRecord(movie_id, feats.astype(np.float32), events, cfg.fps))
            concepts[movie_id] = ids
    return SynthDataset(cfg, signatures, splits["train"], splits["val"], splits["test"], concepts)


# --- dataset directories -------------------------------------------------------

def write_dataset(ds: SynthDataset, root) -> None:
    """Write {features/*.adf1, annotations.jsonl, vocab.txt, config.json}."""
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    movies = ds.train + ds.val + ds.test
    for movie in movies:
        save_features(root / "features" / f"{movie.movie_id}.adf1", movie.features)
    save_annotations(root / "annotations.jsonl", movies)
    ds.vocab.save(root / "vocab.txt")
    meta = {
        "synth_config": asdict(ds.config),
        "splits": {name: [m.movie_id for m in ds.split(name)] for name in ("train", "val", "test")},
    }
    (root / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_dataset(root) -> tuple[dict[str, list[MovieRecord]], Vocabulary, dict]:
    """Load a dataset directory; returns movies per split, the vocabulary and the metadata."""
    root = Path(root)
    meta = json.loads((root / "config.json").read_text(encoding="utf-8"))
    annotations = load_annotations(root / "annotations.jsonl")
    vocab = Vocabulary.load(root / "vocab.txt")
    fps = float(meta.get("synth_config", {}).get("fps", 1.0))
    splits = {}
    for name, ids in meta["splits"].items():
        splits[name] = [MovieRecord(mid, load_features(root / "features" / f"{mid}.adf1"),
                                    annotations.get(mid, []), fps) for mid in ids]
    return splits, vocab, meta


def seconds_to_frames(start_s: float, end_s: float, fps: float) -> tuple[int, int]:
    """Convert a timestamped annotation to an inclusive frame interval."""
    return int(np.floor(start_s * fps)), max(int(np.ceil(end_s * fps)) - 1, int(np.floor(start_s * fps)))


# --- training windows ----------------------------------------------------------

@dataclass
class Window:
    """One training example: context, clip, frame labels of the fully visible event, script."""

    context: np.ndarray
    clip: np.ndarray
    labels: np.ndarray
    script: str | None


def cut_window(movie: MovieRecord, start: int, clip_len: int, context_len: int):
    """Zero-padded (context, clip) feature blocks for a clip starting at ``start``."""
    dim = movie.features.shape[1]
    padded = np.zeros((context_len + movie.n_frames + clip_len, dim))
    padded[context_len: context_len + movie.n_frames] = movie.features
    lo = start  # offset by context_len in padded coordinates
    return padded[lo: lo + context_len], padded[lo + context_len: lo + context_len + clip_len]


def window_at(movie: MovieRecord, start: int, clip_len: int, context_len: int) -> Window:
    """Label only events fully inside the clip; the script is that of the most-overlapping event."""
    context, clip = cut_window(movie, start, clip_len, context_len)
    end = start + clip_len - 1
    labels = np.zeros(clip_len, dtype=np.int8)
    best, best_overlap = None, 0
    for ev in movie.annotations:
        overlap = min(ev.end, end) - max(ev.start, start) + 1
        if overlap <= 0:
            continue
        if ev.start >= start and ev.end <= end:
            labels[ev.start - start: ev.end - start + 1] = 1
        if overlap > best_overlap:
            best, best_overlap = ev, overlap
    return Window(context, clip, labels, best.script if best else None)


def sample_windows(movies, clip_len: int, context_len: int, rng: np.random.Generator,
                   cut_per_event: int = 2, random_per_movie: int = 6) -> list[Window]:
    """Event-centred windows with jitter, windows that cut an event, and random windows."""
    out = []
    for movie in movies:
        last = max(movie.n_frames - clip_len, 0)
        for ev in movie.annotations:
            lo = max(ev.end - clip_len + 1, 0)
            hi = min(ev.start, last)
            if lo <= hi:
                out.append(window_at(movie, int(rng.integers(lo, hi + 1)), clip_len, context_len))
            for _ in range(cut_per_event):
                # clip boundary falls strictly inside the event
                if ev.length < 2:
                    break
                cut = int(rng.integers(ev.start + 1, ev.end + 1))
                if rng.random() < 0.5:
                    start = cut
                else:
                    start = cut - clip_len
                start = min(max(start, 0), last)
                out.append(window_at(movie, start, clip_len, context_len))
        for _ in range(random_per_movie):
            out.append(window_at(movie, int(rng.integers(0, last + 1)), clip_len, context_len))
    return out
