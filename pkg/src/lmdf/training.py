"""Two-stage training: the convolutional extractor on static images,
then the temporal head on frozen per-frame representations.

Stage 1 trains the MCNN with its classification head on frames sampled
at a fixed interval from the training clips. Stage 2 extracts one
representation per frame and trains the LSTM stack with truncated BPTT;
the extractor stays frozen unless joint fine-tuning is switched on.
Every run writes a key=value manifest (config, seed, data content hash)
next to its checkpoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import lstm as lstm_mod
from . import mcnn as mcnn_mod
from . import ops
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint, write_manifest
from .data import Clip, StaticSample, content_hash, sample_static_set, split_personas
from .errors import CheckpointError, DataValidationError
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, adam_step
from .patches import (FacialShape, build_patch_set, empty_patch_set,
                      perturb_landmarks, sample_unaligned)

SAMPLING_METHODS = ("aligned", "uniform", "specific")

# conv workspaces stay cache-resident at this batch width
MICRO_BATCH = 2


@dataclass
class TrainConfig:
    seed: int = 0
    # stage 1: convolutional extractor
    repr_dim: int = 256
    path_mask: str = "all"
    share_within_granularity: bool = False
    mcnn_lr: float = 1e-4
    mcnn_steps: int = 300
    mcnn_batch: int = 16
    static_interval: int = 3
    balanced_sampling: bool = False
    sampling_method: str = "aligned"
    eval_every: int = 50
    checkpoint_interval: int = 0
    # stage 2: temporal head
    lstm_lr: float = 3e-4
    max_memory_steps: int = 60
    lstm_batch: int = 16
    lstm_epochs: int = 40
    forget_bias: float = 1.0
    finetune_mcnn: bool = False
    # shared
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.sampling_method not in SAMPLING_METHODS:
            raise DataValidationError(
                f"sampling_method must be one of {SAMPLING_METHODS}, "
                f"got {self.sampling_method!r}")

    def to_manifest(self) -> dict:
        return {f"config_{k}": v for k, v in asdict(self).items()}


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return type(like)(value)


def config_from_file(path, **overrides) -> TrainConfig:
    """Parse a key=value config file; unknown keys are rejected."""
    defaults = TrainConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(TrainConfig)}
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or key not in known:
            raise DataValidationError(f"{path}:{line_no}: unknown config entry {line!r}")
        values[key] = _coerce(raw.strip(), known[key])
    values.update(overrides)
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# Patch assembly for samples
# ---------------------------------------------------------------------------

def face_box_from_shape(shape: FacialShape) -> tuple[float, float, float, float]:
    """A face bounding box inflated from the inner-face landmark extent."""
    pts = shape.points
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    w = (x1 - x0) * 1.6
    h = (y1 - y0) * 1.9
    cx = (x0 + x1) / 2.0
    cy = (y0 + y1) / 2.0
    return (cx - w / 2.0, cy - h / 2.0, w, h)


def patches_for_frame(frame: np.ndarray, shape: FacialShape, method: str = "aligned",
                      sigma: float = 0.0, rng: np.random.Generator | None = None,
                      scheme=None) -> np.ndarray:
    if sigma > 0:
        shape = perturb_landmarks(shape, sigma, rng)
    if method == "aligned":
        return build_patch_set(frame, shape, scheme).patches
    if shape.is_sentinel:
        return empty_patch_set(shape.frame_index, scheme).patches
    box = face_box_from_shape(shape)
    return sample_unaligned(frame, box, method, rng, scheme,
                            frame_index=shape.frame_index).patches


def patches_for_samples(clips_by_id: dict[str, Clip], samples: list[StaticSample],
                        method: str = "aligned", sigma: float = 0.0,
                        rng: np.random.Generator | None = None, scheme=None) -> np.ndarray:
    out = np.empty((len(samples), 15, 64, 64, 3), dtype=np.float32)
    for i, s in enumerate(samples):
        clip = clips_by_id[s.clip_id]
        shape = FacialShape(clip.shapes[s.frame], frame_index=s.frame)
        out[i] = patches_for_frame(clip.frames[s.frame], shape, method, sigma, rng, scheme)
    return out


def _one_hot_labels(labels: np.ndarray) -> np.ndarray:
    out = np.zeros((labels.shape[0], 2), dtype=np.float32)
    out[np.arange(labels.shape[0]), labels.astype(np.intp)] = 1.0
    return out


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

def evaluate_static(model: mcnn_mod.MCNNModel, clips_by_id: dict[str, Clip],
                    samples: list[StaticSample], method: str = "aligned",
                    sigma: float = 0.0, seed: int = 0, chunk: int = MICRO_BATCH):
    """Mean loss and accuracy of the classification head on static samples."""
    rng = np.random.default_rng(seed)
    losses = []
    hits = 0
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        patches = patches_for_samples(clips_by_id, part, method, sigma, rng)
        rep, probs, fwd = mcnn_mod.mcnn_forward(model, patches, cache=True)
        labels = np.array([s.label for s in part])
        loss_vec, _, _ = ops.softmax_xent(fwd["logits"], _one_hot_labels(labels))
        losses.append(loss_vec)
        hits += int((np.argmax(probs, axis=1) == labels).sum())
    n = len(samples)
    return float(np.concatenate(losses).mean()), hits / n


def train_mcnn(train_clips: list[Clip], config: TrainConfig,
               test_clips: list[Clip] | None = None, out_dir=None):
    """Stage-1 training. Returns (model, metrics rows).

    Metrics rows are dicts with step/split/loss/accuracy; test rows are
    interleaved every config.eval_every steps when test clips are given.
    """
    if not train_clips:
        raise DataValidationError("stage-1 training needs at least one clip")
    rng = np.random.default_rng(config.seed)
    samples = sample_static_set(train_clips, config.static_interval, rng)
    labels = np.array([s.label for s in samples])
    if labels.min(initial=1) == labels.max(initial=0):
        raise DataValidationError("static set must contain both classes")
    clips_by_id = {c.clip_id: c for c in train_clips}
    test_samples = None
    if test_clips:
        test_samples = sample_static_set(test_clips, config.static_interval,
                                         np.random.default_rng(config.seed + 1))
        clips_by_id.update({c.clip_id: c for c in test_clips})

    model = mcnn_mod.MCNNModel.create(
        seed=config.seed, repr_dim=config.repr_dim, mask=config.path_mask,
        share_within_granularity=config.share_within_granularity)
    params = model.params()

    pool = np.arange(len(samples))
    if config.balanced_sampling:
        by_class = [pool[labels == c] for c in (0, 1)]
    metrics = []
    for step in range(1, config.mcnn_steps + 1):
        if config.balanced_sampling:
            half = config.mcnn_batch // 2
            idx = np.concatenate([
                rng.choice(by_class[0], size=half),
                rng.choice(by_class[1], size=config.mcnn_batch - half)])
        else:
            idx = rng.choice(pool, size=config.mcnn_batch)
        batch = [samples[i] for i in idx]
        patches = patches_for_samples(clips_by_id, batch, config.sampling_method,
                                      rng=rng)
        targets = _one_hot_labels(labels[idx])
        # micro-batches keep the conv workspaces cache-resident; gradients
        # accumulate into one optimizer step
        model.zero_grads()
        loss_sum = 0.0
        hits = 0
        for lo in range(0, len(batch), MICRO_BATCH):
            hi = min(lo + MICRO_BATCH, len(batch))
            rep, probs, fwd = mcnn_mod.mcnn_forward(model, patches[lo:hi], cache=True)
            loss_sum += mcnn_mod.mcnn_loss(model, fwd, targets[lo:hi],
                                           scale=len(batch)) * (hi - lo)
            mcnn_mod.mcnn_backward(model, fwd)
            hits += int((np.argmax(probs, axis=1) == labels[idx[lo:hi]]).sum())
        loss = loss_sum / len(batch)
        for p in params:
            adam_step(p, config.mcnn_lr, beta1=config.adam_beta1,
                      beta2=config.adam_beta2, eps=config.adam_eps)
        acc = hits / len(batch)
        metrics.append({"step": step, "split": "train", "loss": loss, "accuracy": acc})
        at_eval = config.eval_every and (step % config.eval_every == 0
                                         or step == config.mcnn_steps)
        if test_samples and at_eval:
            tl, ta = evaluate_static(model, clips_by_id, test_samples,
                                     config.sampling_method, seed=config.seed)
            metrics.append({"step": step, "split": "test", "loss": tl, "accuracy": ta})
        if out_dir and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            save_detector(Path(out_dir) / f"mcnn_step{step:06d}.lmdf", model,
                          config=config, data_hash=content_hash(train_clips))
    return model, metrics


# ---------------------------------------------------------------------------
# Representation extraction
# ---------------------------------------------------------------------------

def model_hash(model) -> str:
    h = hashlib.sha1()
    for p in sorted(model.params(), key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def clip_patches(clip: Clip, scheme=None) -> np.ndarray:
    out = np.empty((clip.length, 15, 64, 64, 3), dtype=np.float32)
    for t in range(clip.length):
        shape = FacialShape(clip.shapes[t], frame_index=t)
        out[t] = build_patch_set(clip.frames[t], shape, scheme).patches
    return out


def extract_representations(model: mcnn_mod.MCNNModel, clips: list[Clip],
                            chunk: int = MICRO_BATCH, cache_path=None) -> dict[str, np.ndarray]:
    """One representation vector per frame, in clip order.

    When cache_path names an existing cache written for the same model
    parameters, it is returned as-is (bit-identical to recomputation by
    the checkpoint round-trip guarantee); otherwise representations are
    computed and, if a path was given, written there.
    """
    want_hash = model_hash(model)
    if cache_path is not None and Path(cache_path).exists():
        with np.load(cache_path, allow_pickle=False) as z:
            stored = {k: z[k] for k in z.files}
        if stored.pop("__model_hash__", np.array("")).item() == want_hash:
            missing = [c.clip_id for c in clips if c.clip_id not in stored]
            if not missing:
                return {c.clip_id: stored[c.clip_id] for c in clips}
    reps: dict[str, np.ndarray] = {}
    for clip in clips:
        seq = np.empty((clip.length, model.repr_dim), dtype=np.float32)
        for lo in range(0, clip.length, chunk):
            hi = min(lo + chunk, clip.length)
            batch = np.empty((hi - lo, 15, 64, 64, 3), dtype=np.float32)
            for t in range(lo, hi):
                shape = FacialShape(clip.shapes[t], frame_index=t)
                batch[t - lo] = build_patch_set(clip.frames[t], shape).patches
            rep, _ = mcnn_mod.mcnn_forward(model, batch)
            seq[lo:hi] = rep
        reps[clip.clip_id] = seq
    if cache_path is not None:
        np.savez(cache_path, __model_hash__=np.array(want_hash), **reps)
    return reps


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def train_temporal(model: mcnn_mod.MCNNModel, reps: dict[str, np.ndarray],
                   train_clips: list[Clip], config: TrainConfig):
    """Stage-2 TBPTT training of the temporal head. Returns (head, metrics).

    The extractor is frozen by default; with config.finetune_mcnn the
    window input gradients are pushed through the MCNN and its
    parameters take Adam steps too.
    """
    head = lstm_mod.TemporalHead.create(
        seed=config.seed, input_dim=model.repr_dim,
        max_memory_steps=config.max_memory_steps, forget_bias=config.forget_bias)
    sequences = [reps[c.clip_id] for c in train_clips]
    labels = [c.labels.astype(np.int64) for c in train_clips]

    hook = None
    if config.finetune_mcnn:
        mcnn_params = model.params()

        def hook(seq_indices, t0, d_xs):
            model.zero_grads()
            tw = d_xs.shape[0]
            for b, si in enumerate(seq_indices):
                clip = train_clips[si]
                batch = np.empty((tw, 15, 64, 64, 3), dtype=np.float32)
                for t in range(tw):
                    shape = FacialShape(clip.shapes[t0 + t], frame_index=t0 + t)
                    batch[t] = build_patch_set(clip.frames[t0 + t], shape).patches
                _, _, fwd = mcnn_mod.mcnn_forward(model, batch, cache=True)
                mcnn_mod.mcnn_backward_from_representation(model, fwd, d_xs[:, b, :])
            for p in mcnn_params:
                adam_step(p, config.mcnn_lr, beta1=config.adam_beta1,
                          beta2=config.adam_beta2, eps=config.adam_eps)

    trace = lstm_mod.tbptt_train(
        head, sequences, labels, lr=config.lstm_lr,
        max_memory_steps=config.max_memory_steps, batch_size=config.lstm_batch,
        epochs=config.lstm_epochs, seed=config.seed, input_grad_hook=hook,
        beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    metrics = [{"step": r["step"], "split": "train", "loss": r["loss"],
                "accuracy": r["accuracy"]} for r in trace]
    return head, metrics


# ---------------------------------------------------------------------------
# Frame-level evaluation
# ---------------------------------------------------------------------------

def evaluate_temporal(head: lstm_mod.TemporalHead, reps: dict[str, np.ndarray],
                      clips: list[Clip]) -> dict:
    """Frame accuracy of MCNN+LSTM, overall / per scenario, with confusion."""
    confusion = np.zeros((2, 2), dtype=np.int64)
    per_scenario: dict[str, list] = {}
    for clip in clips:
        _, ys, _ = lstm_mod.predict_sequence(head, reps[clip.clip_id])
        truth = clip.labels.astype(np.int64)
        for t, y in zip(truth, ys):
            confusion[t, y] += 1
        per_scenario.setdefault(clip.scenario or "-", []).append(
            (int((ys == truth).sum()), len(truth)))
    return _summarize(confusion, per_scenario)


def evaluate_mcnn_frames(model: mcnn_mod.MCNNModel, reps: dict[str, np.ndarray],
                         clips: list[Clip]) -> dict:
    """Frame accuracy of the MCNN-only detector (classification head per frame)."""
    confusion = np.zeros((2, 2), dtype=np.int64)
    per_scenario: dict[str, list] = {}
    for clip in clips:
        probs, _ = mcnn_mod.classify(model, reps[clip.clip_id])
        ys = np.argmax(probs, axis=1)
        truth = clip.labels.astype(np.int64)
        for t, y in zip(truth, ys):
            confusion[t, y] += 1
        per_scenario.setdefault(clip.scenario or "-", []).append(
            (int((ys == truth).sum()), len(truth)))
    return _summarize(confusion, per_scenario)


def _summarize(confusion: np.ndarray, per_scenario: dict) -> dict:
    total = int(confusion.sum())
    correct = int(np.trace(confusion))
    return {
        "accuracy": correct / total if total else 0.0,
        "frames": total,
        "confusion": confusion,
        "per_scenario": {k: sum(h for h, _ in v) / sum(n for _, n in v)
                         for k, v in per_scenario.items()},
    }


# ---------------------------------------------------------------------------
# Checkpoint + manifest plumbing
# ---------------------------------------------------------------------------

def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def save_detector(path, model: mcnn_mod.MCNNModel,
                  head: lstm_mod.TemporalHead | None = None,
                  config: TrainConfig | None = None, data_hash: str = "",
                  extra: dict | None = None) -> None:
    """One checkpoint file holding mcnn/* (and lstm/*) tensors, plus a
    key=value manifest beside it."""
    tensors = dict(model.state_tensors())
    manifest = dict(model.manifest())
    if head is not None:
        tensors.update(head.state_tensors())
        manifest.update(head.manifest())
    manifest.update({
        "adam_beta1": ADAM_BETA1 if config is None else config.adam_beta1,
        "adam_beta2": ADAM_BETA2 if config is None else config.adam_beta2,
        "adam_eps": ADAM_EPS if config is None else config.adam_eps,
        "data_hash": data_hash,
    })
    if config is not None:
        manifest.update(config.to_manifest())
    if extra:
        manifest.update(extra)
    save_checkpoint(path, tensors)
    write_manifest(manifest_path(path), manifest)


def load_detector(path):
    """Returns (model, head_or_None, manifest)."""
    path = Path(path)
    tensors = load_checkpoint(path)
    mpath = manifest_path(path)
    if not mpath.exists():
        raise CheckpointError(f"missing manifest beside checkpoint: {mpath}")
    manifest = read_manifest(mpath)
    model = mcnn_mod.MCNNModel.from_state(tensors, manifest)
    head = None
    if any(k.startswith("lstm/") for k in tensors):
        head = lstm_mod.TemporalHead.from_state(tensors, manifest)
    return model, head, manifest


def write_metrics_csv(path, rows: list[dict], manifest_ref: str = "") -> None:
    """CSV with columns step,split,loss,accuracy and a manifest reference."""
    lines = [f"# manifest={manifest_ref}", "step,split,loss,accuracy"]
    for r in rows:
        lines.append(f"{r['step']},{r['split']},{r['loss']:.6f},{r['accuracy']:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# End-to-end convenience
# ---------------------------------------------------------------------------

def split_clips(clips: list[Clip], test_fraction: float, seed: int):
    train_p, test_p = split_personas([c.persona for c in clips], test_fraction, seed)
    train = [c for c in clips if c.persona in train_p]
    test = [c for c in clips if c.persona in test_p]
    return train, test


def two_stage_train(clips: list[Clip], config: TrainConfig, out_dir=None,
                    stages: str = "both") -> dict:
    """Split by persona, run the requested stages, save checkpoints.

    Returns a summary dict with the model, head, metrics, and frame-level
    accuracies of both detectors on the held-out clips.
    """
    train_clips, test_clips = split_clips(clips, config.test_fraction, config.seed)
    data_hash = content_hash(clips)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    model, metrics1 = train_mcnn(train_clips, config, test_clips, out_dir)
    summary = {"model": model, "train_clips": train_clips, "test_clips": test_clips,
               "mcnn_metrics": metrics1, "data_hash": data_hash}
    if out_dir:
        save_detector(out_dir / "mcnn_final.lmdf", model, config=config,
                      data_hash=data_hash)
        write_metrics_csv(out_dir / "mcnn_metrics.csv", metrics1,
                          manifest_ref=str(manifest_path(out_dir / "mcnn_final.lmdf")))
    if stages == "1":
        return summary

    reps_train = extract_representations(model, train_clips)
    reps_test = extract_representations(model, test_clips)
    head, metrics2 = train_temporal(model, reps_train, train_clips, config)
    if config.finetune_mcnn:
        reps_test = extract_representations(model, test_clips)
    summary.update({
        "head": head, "lstm_metrics": metrics2,
        "mcnn_only": evaluate_mcnn_frames(model, reps_test, test_clips),
        "mcnn_lstm": evaluate_temporal(head, reps_test, test_clips),
    })
    if out_dir:
        save_detector(out_dir / "detector.lmdf", model, head, config=config,
                      data_hash=data_hash)
        write_metrics_csv(out_dir / "lstm_metrics.csv", metrics2,
                          manifest_ref=str(manifest_path(out_dir / "detector.lmdf")))
    return summary
