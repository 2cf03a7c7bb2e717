"""Annotation parsing, instant relabeling, static-set sampling, and the
file formats clips travel in.

Annotation files carry one ASCII digit per frame, one file per track
(drowsiness, eyes, head, mouth). The instant relabeling procedure
derives a drowsiness track from part evidence (sustained eye closure,
yawning, nodding), bounding the onset lag to half a second, then cuts
the track into alternating normal/drowsy clips with up to ten normal
frames duplicated onto each side of every drowsy clip.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataValidationError, TrackParseError

TRACK_NAMES = ("drowsiness", "eyes", "head", "mouth")
LABEL_DOMAINS = {
    "drowsiness": (0, 1),
    "eyes": (0, 1),
    "head": (0, 1, 2),
    "mouth": (0, 1, 2),
}
PAD_FRAMES = 10

# Which part patterns count as drowsiness evidence. Sustained eye
# closure must hold for the full latency window; yawning (mouth=1) and
# nodding (head=1) count immediately.
DEFAULT_EVIDENCE_RULE = {"eyes_sustained": True, "mouth_yawn": True, "head_nod": True}


def latency_frames(fps: int = 30) -> int:
    """The instant-principle bound: half a second of frames."""
    if fps < 1:
        raise DataValidationError(f"fps must be >= 1, got {fps}")
    return max(1, round(0.5 * fps))


@dataclass
class AnnotationTrack:
    """Per-frame states for the four annotated tracks."""

    drowsiness: np.ndarray
    eyes: np.ndarray
    head: np.ndarray
    mouth: np.ndarray

    def __post_init__(self):
        lengths = set()
        for name in TRACK_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.uint8)
            setattr(self, name, arr)
            lengths.add(arr.shape[0])
            domain = LABEL_DOMAINS[name]
            bad = ~np.isin(arr, domain)
            if bad.any():
                idx = int(np.flatnonzero(bad)[0])
                raise TrackParseError(
                    f"{name} label {arr[idx]} outside domain {domain}", frame_index=idx)
        if len(lengths) != 1:
            raise TrackParseError(
                f"annotation tracks disagree on length: "
                + ", ".join(f"{n}={getattr(self, n).shape[0]}" for n in TRACK_NAMES))

    @property
    def length(self) -> int:
        return self.drowsiness.shape[0]


def _read_digit_file(path: Path, name: str) -> np.ndarray:
    if not path.exists():
        raise TrackParseError(f"annotation file missing: {path}")
    text = path.read_text().strip()
    out = np.empty(len(text), dtype=np.uint8)
    for i, ch in enumerate(text):
        if not ch.isdigit():
            raise TrackParseError(f"non-digit {ch!r} in {name} track", frame_index=i)
        out[i] = int(ch)
    return out


def parse_annotations(prefix) -> AnnotationTrack:
    """Read the four digit-per-frame files `<prefix>.<track>`."""
    prefix = Path(prefix)
    tracks = {name: _read_digit_file(prefix.with_suffix(f".{name}"), name)
              for name in TRACK_NAMES}
    return AnnotationTrack(**tracks)


def write_annotations(prefix, track: AnnotationTrack) -> None:
    prefix = Path(prefix)
    for name in TRACK_NAMES:
        arr = getattr(track, name)
        prefix.with_suffix(f".{name}").write_text("".join(str(int(v)) for v in arr))


def sustained_runs(flags: np.ndarray, threshold: int) -> np.ndarray:
    """True where `flags` has held for at least `threshold` consecutive frames."""
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return flags.copy()
    idx = np.arange(flags.shape[0])
    last_false = np.maximum.accumulate(np.where(~flags, idx, -1))
    run_len = np.where(flags, idx - last_false, 0)
    return run_len >= threshold


def evidence_labels(track: AnnotationTrack, fps: int = 30,
                    rule: dict | None = None) -> np.ndarray:
    """Per-frame drowsiness derived from part evidence under the rule table."""
    rule = DEFAULT_EVIDENCE_RULE if rule is None else rule
    out = np.zeros(track.length, dtype=np.uint8)
    if rule.get("eyes_sustained", False):
        out |= sustained_runs(track.eyes == 1, latency_frames(fps)).astype(np.uint8)
    if rule.get("mouth_yawn", False):
        out |= (track.mouth == 1).astype(np.uint8)
    if rule.get("head_nod", False):
        out |= (track.head == 1).astype(np.uint8)
    return out


@dataclass
class ClipManifest:
    """One clip cut from a track: padded range plus per-frame labels."""

    clip_id: str
    start: int
    end: int
    labels: np.ndarray
    scenario: str = ""
    source: str = ""
    kind: str = "normal"  # "normal" | "drowsy"
    pad_head: int = 0
    pad_tail: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.end <= self.start:
            raise DataValidationError(f"clip {self.clip_id}: empty range {self.start}..{self.end}")
        if self.labels.shape[0] != self.end - self.start:
            raise DataValidationError(
                f"clip {self.clip_id}: {self.labels.shape[0]} labels for range "
                f"[{self.start}, {self.end})")

    @property
    def core_start(self) -> int:
        return self.start + self.pad_head

    @property
    def core_end(self) -> int:
        return self.end - self.pad_tail


def _runs(values: np.ndarray):
    """Maximal constant runs as (value, start, end) triples."""
    edges = np.flatnonzero(np.diff(values)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [values.shape[0]]])
    return [(int(values[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def instant_relabel(track: AnnotationTrack, fps: int = 30, rule: dict | None = None,
                    scenario: str = "", source: str = "") -> list[ClipManifest]:
    """Relabel a track under the instant principle and cut it into clips.

    The drowsy label turns on within latency_frames(fps) of evidence
    onset (sustained eye closure reaches the bound exactly; yawns and
    nods count immediately). Alternating normal/drowsy clips partition
    the track; every drowsy clip duplicates up to PAD_FRAMES adjacent
    normal frames at its head and tail, truncated to what is available.
    """
    labels = evidence_labels(track, fps=fps, rule=rule)
    runs = _runs(labels)
    clips: list[ClipManifest] = []
    n = labels.shape[0]
    for i, (value, s, e) in enumerate(runs):
        clip_id = f"{source}_c{i:03d}" if source else f"c{i:03d}"
        if value == 0:
            clips.append(ClipManifest(clip_id, s, e, labels[s:e], scenario=scenario,
                                      source=source, kind="normal"))
            continue
        prev_normal = runs[i - 1][2] - runs[i - 1][1] if i > 0 else 0
        next_normal = runs[i + 1][2] - runs[i + 1][1] if i + 1 < len(runs) else 0
        pad_head = min(PAD_FRAMES, prev_normal, s)
        pad_tail = min(PAD_FRAMES, next_normal, n - e)
        padded = labels[s - pad_head:e + pad_tail]
        clips.append(ClipManifest(clip_id, s - pad_head, e + pad_tail, padded,
                                  scenario=scenario, source=source, kind="drowsy",
                                  pad_head=pad_head, pad_tail=pad_tail))
    return clips


def flatten_relabeled(clips: list[ClipManifest]) -> np.ndarray:
    """Reassemble the per-frame drowsiness track from clip cores."""
    if not clips:
        return np.zeros(0, dtype=np.uint8)
    total = max(c.core_end for c in clips)
    out = np.zeros(total, dtype=np.uint8)
    for c in clips:
        core = c.labels[c.pad_head:c.labels.shape[0] - c.pad_tail]
        out[c.core_start:c.core_end] = core
    return out


# ---------------------------------------------------------------------------
# In-memory clips and the static image set
# ---------------------------------------------------------------------------

@dataclass
class Clip:
    """A clip materialized in memory: frames, landmarks, and labels."""

    clip_id: str
    scenario: str
    frames: np.ndarray   # (T, H, W) or (T, H, W, 3) uint8
    shapes: np.ndarray   # (T, 51, 2) float
    labels: np.ndarray   # (T,) uint8 drowsiness
    annotations: AnnotationTrack | None = None
    gt_centers: np.ndarray | None = None  # (T, 5, 2): eye_l, eye_r, nose, mouth, face

    def __post_init__(self):
        t = self.frames.shape[0]
        if self.shapes.shape != (t, 51, 2) or self.labels.shape != (t,):
            raise DataValidationError(
                f"clip {self.clip_id}: frames/shapes/labels lengths disagree "
                f"({self.frames.shape}, {self.shapes.shape}, {self.labels.shape})")

    @property
    def persona(self) -> str:
        return persona_of(self.clip_id)

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def persona_of(clip_id: str) -> str:
    """Clip ids follow 'p<NN>_c<MM>'; the persona is the prefix."""
    return clip_id.split("_")[0]


@dataclass(frozen=True)
class StaticSample:
    clip_id: str
    frame: int
    label: int
    persona: str


def sample_static_set(clips: list[Clip], interval: int, seed=None) -> list[StaticSample]:
    """Every interval-th frame of every clip, with a seeded per-clip phase."""
    if interval < 1:
        raise DataValidationError(f"interval must be >= 1, got {interval}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    samples: list[StaticSample] = []
    for clip in clips:
        phase = int(rng.integers(0, interval))
        for t in range(phase, clip.length, interval):
            samples.append(StaticSample(clip.clip_id, t, int(clip.labels[t]), clip.persona))
    return samples


def split_personas(personas, test_fraction: float, seed=0) -> tuple[set, set]:
    """Persona-disjoint train/test split (never by frame)."""
    uniq = sorted(set(personas))
    if len(uniq) < 2:
        raise DataValidationError("need at least two personas to split")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(uniq))
    n_test = max(1, int(round(test_fraction * len(uniq))))
    n_test = min(n_test, len(uniq) - 1)
    return set(order[n_test:]), set(order[:n_test])


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_frame_stream(path, frames: np.ndarray) -> None:
    """Raw frame stream: width u32, height u32, channels u8, then frames."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        t, h, w = frames.shape
        c = 1
    elif frames.ndim == 4:
        t, h, w, c = frames.shape
    else:
        raise DataValidationError(f"frames must be (T, H, W[, C]), got {frames.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack("<IIB", w, h, c))
        f.write(np.ascontiguousarray(frames, dtype=np.uint8).tobytes())


def read_frame_stream_header(path) -> tuple[int, int, int, int]:
    """Returns (width, height, channels, frame_count)."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        w, h, c = struct.unpack("<IIB", f.read(9))
    frame_bytes = w * h * c
    if frame_bytes == 0 or (size - 9) % frame_bytes:
        raise DataValidationError(f"frame stream {path} has a partial trailing frame")
    return w, h, c, (size - 9) // frame_bytes


def read_frame_stream(path) -> np.ndarray:
    w, h, c, t = read_frame_stream_header(path)
    data = np.fromfile(path, dtype=np.uint8, offset=9)
    shape = (t, h, w) if c == 1 else (t, h, w, c)
    return data.reshape(shape)


def iter_frame_stream(path):
    """Yield frames one at a time without loading the whole stream."""
    w, h, c, t = read_frame_stream_header(path)
    frame_bytes = w * h * c
    with open(path, "rb") as f:
        f.read(9)
        for _ in range(t):
            buf = f.read(frame_bytes)
            arr = np.frombuffer(buf, dtype=np.uint8)
            yield arr.reshape((h, w) if c == 1 else (h, w, c))


def write_landmark_track(path, shapes: np.ndarray) -> None:
    """Text track: `frame_index x1 y1 ... x51 y51`, all-zero = no face."""
    shapes = np.asarray(shapes)
    with open(path, "w") as f:
        for t in range(shapes.shape[0]):
            coords = " ".join(f"{v:.4f}" for v in shapes[t].reshape(-1))
            f.write(f"{t} {coords}\n")


def read_landmark_track(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise TrackParseError(f"landmark track missing: {path}")
    rows = []
    for line_no, line in enumerate(path.read_text().splitlines()):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 1 + 51 * 2:
            raise TrackParseError(
                f"landmark record has {len(fields)} fields, expected {1 + 102}",
                frame_index=line_no)
        try:
            rows.append([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise TrackParseError(f"bad landmark value: {exc}", frame_index=line_no)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 51, 2)


def rle_encode(labels: np.ndarray) -> str:
    return ",".join(f"{v}*{e - s}" for v, s, e in _runs(np.asarray(labels)))


def rle_decode(text: str) -> np.ndarray:
    parts = []
    for chunk in text.split(","):
        value, _, count = chunk.partition("*")
        parts.append(np.full(int(count), int(value), dtype=np.uint8))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)


def write_clip_manifests(path, manifests: list[ClipManifest]) -> None:
    """Line-delimited records: `clip_id start end scenario rle`."""
    with open(path, "w") as f:
        for m in manifests:
            scenario = m.scenario or "-"
            f.write(f"{m.clip_id} {m.start} {m.end} {scenario} {rle_encode(m.labels)}\n")


def read_clip_manifests(path) -> list[ClipManifest]:
    out = []
    for line_no, line in enumerate(Path(path).read_text().splitlines()):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise TrackParseError(f"clip record has {len(fields)} fields, expected 5",
                                  frame_index=line_no)
        clip_id, start, end, scenario, rle = fields
        labels = rle_decode(rle)
        kind = "drowsy" if labels.max(initial=0) else "normal"
        out.append(ClipManifest(clip_id, int(start), int(end), labels,
                                scenario="" if scenario == "-" else scenario,
                                kind=kind))
    return out


# ---------------------------------------------------------------------------
# Corpus directories
# ---------------------------------------------------------------------------

def write_corpus(directory, clips: list[Clip]) -> None:
    """Write clips as frame streams + landmark tracks + annotations."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifests = []
    for clip in clips:
        write_frame_stream(directory / f"{clip.clip_id}.frames", clip.frames)
        write_landmark_track(directory / f"{clip.clip_id}.landmarks", clip.shapes)
        if clip.annotations is not None:
            write_annotations(directory / clip.clip_id, clip.annotations)
        manifests.append(ClipManifest(clip.clip_id, 0, clip.length, clip.labels,
                                      scenario=clip.scenario,
                                      kind="drowsy" if clip.labels.max(initial=0) else "normal"))
    write_clip_manifests(directory / "clips.txt", manifests)


def load_corpus(directory) -> list[Clip]:
    directory = Path(directory)
    manifest_path = directory / "clips.txt"
    if not manifest_path.exists():
        raise DataValidationError(f"no clips.txt in corpus directory {directory}")
    clips = []
    for m in read_clip_manifests(manifest_path):
        frames = read_frame_stream(directory / f"{m.clip_id}.frames")
        shapes = read_landmark_track(directory / f"{m.clip_id}.landmarks")
        annotations = None
        if (directory / f"{m.clip_id}.drowsiness").exists():
            annotations = parse_annotations(directory / m.clip_id)
        if frames.shape[0] != shapes.shape[0] or frames.shape[0] != m.labels.shape[0]:
            raise DataValidationError(
                f"clip {m.clip_id}: stream/landmark/label lengths disagree")
        clips.append(Clip(m.clip_id, m.scenario, frames, shapes, m.labels,
                          annotations=annotations))
    return clips


def content_hash(clips: list[Clip]) -> str:
    """Order-independent content hash of a clip corpus."""
    digests = []
    for clip in clips:
        h = hashlib.sha1()
        h.update(clip.clip_id.encode())
        h.update(np.ascontiguousarray(clip.frames).tobytes())
        h.update(np.ascontiguousarray(clip.shapes).tobytes())
        h.update(np.ascontiguousarray(clip.labels).tobytes())
        digests.append(h.hexdigest())
    outer = hashlib.sha1()
    for d in sorted(digests):
        outer.update(d.encode())
    return outer.hexdigest()
