"""Synthetic face-sequence generator for desk-scale experiments.

Personas are flat-shaded geometric faces whose eyes, mouth, and head
pose deform over scripted events (blink, sustained closure, yawn,
talking, nodding, looking aside). Each clip comes with rendered frames,
51-point landmark tracks consistent with the rendering, per-frame part
annotations, and drowsiness labels derived from the same evidence rule
the relabeling pipeline uses. Everything is seeded: identical configs
give bit-identical corpora.

The eye events are built to need temporal context: a blink and the
first frames of a sustained closure look identical, only the closure
crosses the latency threshold and becomes drowsy. Talking and yawning
overlap the same way through the mouth aperture.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import AnnotationTrack, Clip, evidence_labels, latency_frames
from .errors import DataValidationError

EVENT_KINDS = ("blink", "close", "yawn", "talk", "nod", "aside")

# gt_centers column order
GT_COLUMNS = ("eye_l", "eye_r", "nose", "mouth", "face")


@dataclass
class SyntheticConfig:
    personas: int = 12
    clips_per_persona: int = 3
    frames_per_clip: int = 90
    frame_size: int = 192
    scenario: str = "day"
    fps: int = 30
    noise_level: float = 3.0
    landmark_jitter: float = 0.0
    blink_frames: tuple = (2, 4)
    close_frames: tuple = (22, 40)
    yawn_frames: tuple = (18, 30)
    talk_frames: tuple = (12, 24)
    nod_frames: tuple = (12, 20)
    aside_frames: tuple = (12, 20)
    gap_frames: tuple = (6, 16)
    event_weights: dict = field(default_factory=lambda: {
        "blink": 3.0, "close": 2.0, "yawn": 1.5, "talk": 2.0,
        "nod": 0.5, "aside": 0.5,
    })
    seed: int = 0

    def validate(self) -> None:
        if self.personas < 1 or self.clips_per_persona < 1 or self.frames_per_clip < 1:
            raise DataValidationError("persona/clip/frame counts must be positive")
        if self.frame_size < 160:
            raise DataValidationError(f"frame size must be >= 160, got {self.frame_size}")
        if self.noise_level < 0 or self.landmark_jitter < 0:
            raise DataValidationError("noise levels must be >= 0")
        for kind in EVENT_KINDS:
            lo, hi = getattr(self, f"{kind}_frames")
            if not (1 <= lo <= hi):
                raise DataValidationError(f"bad duration range for {kind}: {(lo, hi)}")
        if any(w < 0 for w in self.event_weights.values()):
            raise DataValidationError("event weights must be >= 0")
        threshold = latency_frames(self.fps)
        if self.event_weights.get("blink", 0) > 0 and self.event_weights.get("close", 0) > 0:
            if not self.blink_frames[1] < threshold <= self.close_frames[0]:
                raise DataValidationError(
                    f"blink durations {self.blink_frames} must stay below the "
                    f"sustained-closure threshold {threshold} and closures "
                    f"{self.close_frames} must reach it")


@dataclass
class Persona:
    """Sampled face geometry; all coordinates in frame pixels."""

    cx: float
    cy: float
    face_rx: float
    face_ry: float
    skin: float
    feature: float
    background: float
    eye_dx: float
    eye_dy: float
    eye_rx: float
    eye_ry: float
    brow_dy: float
    nose_dy: float
    nose_w: float
    nose_h: float
    mouth_dy: float
    mouth_rx: float
    mouth_ry_closed: float
    mouth_ry_open: float


def _sample_persona(rng: np.random.Generator, config: SyntheticConfig) -> Persona:
    s = config.frame_size
    night = config.scenario == "night"
    return Persona(
        cx=s / 2 + rng.uniform(-6, 6),
        cy=s / 2 + rng.uniform(-6, 6),
        face_rx=rng.uniform(50, 60),
        face_ry=rng.uniform(62, 74),
        skin=rng.uniform(95, 135) if night else rng.uniform(150, 200),
        feature=rng.uniform(20, 55),
        background=rng.uniform(5, 20) if night else rng.uniform(10, 35),
        eye_dx=rng.uniform(0.38, 0.46),
        eye_dy=rng.uniform(-0.38, -0.28),
        eye_rx=rng.uniform(9, 12),
        eye_ry=rng.uniform(5, 7),
        brow_dy=rng.uniform(-0.58, -0.50),
        nose_dy=rng.uniform(0.02, 0.12),
        nose_w=rng.uniform(7, 10),
        nose_h=rng.uniform(10, 14),
        mouth_dy=rng.uniform(0.45, 0.55),
        mouth_rx=rng.uniform(13, 17),
        mouth_ry_closed=rng.uniform(1.8, 2.6),
        mouth_ry_open=rng.uniform(10, 14),
    )


def _script_events(rng: np.random.Generator, config: SyntheticConfig) -> list[tuple[str, int]]:
    """Alternating normal gaps and drawn events filling one clip."""
    kinds = [k for k in EVENT_KINDS if config.event_weights.get(k, 0) > 0]
    weights = np.array([config.event_weights[k] for k in kinds], dtype=np.float64)
    total = config.frames_per_clip
    script: list[tuple[str, int]] = []
    t = 0
    while t < total:
        gap = int(rng.integers(config.gap_frames[0], config.gap_frames[1] + 1))
        gap = min(gap, total - t)
        script.append(("normal", gap))
        t += gap
        if t >= total or not kinds:
            break
        kind = str(rng.choice(kinds, p=weights / weights.sum()))
        lo, hi = getattr(config, f"{kind}_frames")
        dur = int(rng.integers(lo, hi + 1))
        dur = min(dur, total - t)
        if kind == "close" and dur < latency_frames(config.fps):
            kind = "blink"  # not enough frames left to cross the threshold
            dur = min(dur, config.blink_frames[1])
        script.append((kind, dur))
        t += dur
    return script


def _event_tracks(rng: np.random.Generator, config: SyntheticConfig,
                  script: list[tuple[str, int]], persona: Persona):
    """Per-frame aperture/pose curves and part annotations from a script."""
    total = config.frames_per_clip
    eye_open = np.ones(total)
    mouth_open = np.zeros(total)
    head_dx = np.zeros(total)
    head_dy = np.zeros(total)
    eyes_ann = np.zeros(total, dtype=np.uint8)
    head_ann = np.zeros(total, dtype=np.uint8)
    mouth_ann = np.zeros(total, dtype=np.uint8)
    t = 0
    for kind, dur in script:
        sl = slice(t, t + dur)
        if kind in ("blink", "close"):
            eye_open[sl] = 0.0
            eyes_ann[sl] = 1
        elif kind == "yawn":
            env = np.minimum(1.0, np.minimum(np.arange(dur) + 1, dur - np.arange(dur)) / 3.0)
            mouth_open[sl] = 0.55 + 0.45 * env
            mouth_ann[sl] = 1
        elif kind == "talk":
            freq = rng.uniform(0.5, 0.9)
            peak = rng.uniform(0.55, 0.85)
            mouth_open[sl] = peak * np.abs(np.sin(freq * np.arange(dur) + rng.uniform(0, np.pi)))
            mouth_ann[sl] = 2
        elif kind == "nod":
            head_dy[sl] = 0.20 * persona.face_ry
            head_ann[sl] = 1
        elif kind == "aside":
            head_dx[sl] = float(rng.choice([-1.0, 1.0])) * 0.22 * persona.face_rx
            head_ann[sl] = 2
        t += dur
    return eye_open, mouth_open, head_dx, head_dy, eyes_ann, head_ann, mouth_ann


def _fill_ellipse(img: np.ndarray, yy: np.ndarray, xx: np.ndarray,
                  cx: float, cy: float, rx: float, ry: float, value: float) -> None:
    mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img[mask] = value


def _ellipse_points(cx: float, cy: float, rx: float, ry: float, count: int) -> np.ndarray:
    """`count` points at uniform angles; their centroid is exactly (cx, cy)."""
    theta = 2.0 * np.pi * np.arange(count) / count
    return np.column_stack([cx + rx * np.cos(theta), cy + ry * np.sin(theta)])


def _landmarks(persona: Persona, eye_open: float, mouth_open: float,
               dx: float, dy: float) -> tuple[np.ndarray, np.ndarray]:
    """51 landmarks plus the gt part centers for one frame."""
    p = persona
    cx, cy = p.cx + dx, p.cy + dy
    ex_l = cx - p.eye_dx * p.face_rx
    ex_r = cx + p.eye_dx * p.face_rx
    ey = cy + p.eye_dy * p.face_ry
    eye_ry = p.eye_ry * (0.15 + 0.85 * eye_open)
    nose_x, nose_y = cx, cy + p.nose_dy * p.face_ry
    mouth_x, mouth_y = cx, cy + p.mouth_dy * p.face_ry
    mouth_ry = p.mouth_ry_closed + mouth_open * (p.mouth_ry_open - p.mouth_ry_closed)
    by = cy + p.brow_dy * p.face_ry

    pts = np.empty((51, 2), dtype=np.float64)
    # brows: 5-point arcs above each eye
    arc = np.linspace(-1.0, 1.0, 5)
    pts[0:5, 0] = ex_l + arc * (p.eye_rx + 3)
    pts[0:5, 1] = by - 2.0 * (1 - arc ** 2)
    pts[5:10, 0] = ex_r + arc * (p.eye_rx + 3)
    pts[5:10, 1] = by - 2.0 * (1 - arc ** 2)
    # nose: 4 bridge + 5 base points, offsets sum to zero around the center
    s = p.nose_h / 8.0
    pts[10:14, 0] = nose_x
    pts[10:14, 1] = nose_y + s * np.array([-8.0, -6.0, -4.0, -2.0])
    pts[14:19, 0] = nose_x + (p.nose_w / 2.0) * np.array([-2.0, -1.0, 0.0, 1.0, 2.0]) / 2.0
    pts[14:19, 1] = nose_y + 4.0 * s
    # eyes: 6 points at uniform angles
    pts[19:25] = _ellipse_points(ex_l, ey, p.eye_rx, eye_ry, 6)
    pts[25:31] = _ellipse_points(ex_r, ey, p.eye_rx, eye_ry, 6)
    # mouth: 12 outer + 8 inner points at uniform angles
    pts[31:43] = _ellipse_points(mouth_x, mouth_y, p.mouth_rx, mouth_ry, 12)
    pts[43:51] = _ellipse_points(mouth_x, mouth_y, 0.6 * p.mouth_rx, 0.6 * mouth_ry, 8)

    gt = np.array([[ex_l, ey], [ex_r, ey], [nose_x, nose_y],
                   [mouth_x, mouth_y], [cx, cy]], dtype=np.float64)
    return pts, gt


def _render(persona: Persona, yy: np.ndarray, xx: np.ndarray, eye_open: float,
            mouth_open: float, dx: float, dy: float) -> np.ndarray:
    p = persona
    img = np.full(yy.shape, p.background, dtype=np.float64)
    cx, cy = p.cx + dx, p.cy + dy
    _fill_ellipse(img, yy, xx, cx, cy, p.face_rx, p.face_ry, p.skin)
    ex_l = cx - p.eye_dx * p.face_rx
    ex_r = cx + p.eye_dx * p.face_rx
    ey = cy + p.eye_dy * p.face_ry
    by = cy + p.brow_dy * p.face_ry
    eye_ry = p.eye_ry * (0.15 + 0.85 * eye_open)
    for ex in (ex_l, ex_r):
        _fill_ellipse(img, yy, xx, ex, by, p.eye_rx + 3, 1.8, p.feature)  # brow
        _fill_ellipse(img, yy, xx, ex, ey, p.eye_rx, eye_ry, p.feature)
    nose_y = cy + p.nose_dy * p.face_ry
    _fill_ellipse(img, yy, xx, cx, nose_y, p.nose_w / 2.0, p.nose_h / 2.0, p.feature + 30)
    mouth_y = cy + p.mouth_dy * p.face_ry
    mouth_ry = p.mouth_ry_closed + mouth_open * (p.mouth_ry_open - p.mouth_ry_closed)
    _fill_ellipse(img, yy, xx, cx, mouth_y, p.mouth_rx, mouth_ry, p.feature)
    return img


def synth_generate(config: SyntheticConfig) -> list[Clip]:
    """Render the full corpus described by `config`, deterministically."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    size = config.frame_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    clips: list[Clip] = []
    for pi in range(config.personas):
        persona = _sample_persona(rng, config)
        for ci in range(config.clips_per_persona):
            total = config.frames_per_clip
            script = _script_events(rng, config)
            (eye_open, mouth_open, head_dx, head_dy,
             eyes_ann, head_ann, mouth_ann) = _event_tracks(rng, config, script, persona)
            frames = np.empty((total, size, size), dtype=np.uint8)
            shapes = np.empty((total, 51, 2), dtype=np.float64)
            gt = np.empty((total, 5, 2), dtype=np.float64)
            for t in range(total):
                img = _render(persona, yy, xx, eye_open[t], mouth_open[t],
                              head_dx[t], head_dy[t])
                if config.noise_level > 0:
                    img = img + rng.normal(0.0, config.noise_level, img.shape)
                frames[t] = np.clip(img, 0, 255).astype(np.uint8)
                pts, gt_t = _landmarks(persona, eye_open[t], mouth_open[t],
                                       head_dx[t], head_dy[t])
                if config.landmark_jitter > 0:
                    pts = pts + rng.normal(0.0, config.landmark_jitter, pts.shape)
                shapes[t] = pts
                gt[t] = gt_t
            annotations = AnnotationTrack(
                drowsiness=np.zeros(total, dtype=np.uint8),  # derived below
                eyes=eyes_ann, head=head_ann, mouth=mouth_ann)
            labels = evidence_labels(annotations, fps=config.fps)
            annotations.drowsiness = labels
            clips.append(Clip(
                clip_id=f"p{pi:02d}_c{ci:02d}", scenario=config.scenario,
                frames=frames, shapes=shapes, labels=labels,
                annotations=annotations, gt_centers=gt))
    return clips


def night_variant(config: SyntheticConfig) -> SyntheticConfig:
    """The same corpus layout rendered with the night palette."""
    return replace(config, scenario="night", seed=config.seed + 1)


def recall_task(n_sequences: int = 320, length: int = 60, dim: int = 16,
                signal: float = 2.0, seed: int = 0):
    """A toy task solvable only with memory spanning the whole sequence.

    Every frame carries a scalar value on one shared direction; the
    value at frame 0 encodes the class as +-signal, all later values
    are class-independent noise of the same scale on the same
    direction, so the class cannot be read from any decayed mixture of
    the sequence: it has to be gated in at the marked first frame and
    held. A start marker on a second direction flags frame 0. Only the
    final frame's label depends on the class and only it carries loss
    weight.

    Returns (sequences, labels, masks).
    """
    rng = np.random.default_rng(seed)
    pattern = rng.standard_normal(dim)
    pattern /= np.linalg.norm(pattern)
    marker = rng.standard_normal(dim)
    marker -= marker @ pattern * pattern
    marker /= np.linalg.norm(marker)
    sequences, labels, masks = [], [], []
    for i in range(n_sequences):
        cls = i % 2
        values = rng.normal(0.0, signal, size=length)
        values[0] = signal if cls == 0 else -signal
        xs = values[:, None] * pattern[None, :]
        xs[0] += 2.0 * signal * marker
        ys = np.zeros(length, dtype=np.int64)
        ys[-1] = cls
        mask = np.zeros(length, dtype=np.float32)
        mask[-1] = 1.0
        sequences.append(xs.astype(np.float32))
        labels.append(ys)
        masks.append(mask)
    return sequences, labels, masks
