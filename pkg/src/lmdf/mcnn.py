"""Multi-granularity convolutional network.

Fifteen parallel convolutional paths (one per patch), concatenation,
a fusion layer producing the shared representation, and a two-way
classification head used for stage-1 training. The three conv layers
per path are fixed at 5x5x3x32 / 5x5x32x64 / 5x5x64x4 with 2x2 max
pooling after the first and third; each 64x64x3 patch comes out as a
16x16x4 tensor reshaped to 1024 values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DataValidationError, ShapeError
from .patches import PATCH_COUNT, PatchSet
from .tensor import ParamTensor, affine_params, conv_kernel

CONV_SPECS = ((5, 3, 32), (5, 32, 64), (5, 64, 4))  # (k, cin, cout) per layer
DEFAULT_REPR_DIM = 256
REPR_DIM_CHOICES = (64, 128, 256, 512)

# Canonical path masks for the granularity ablations.
GRANULARITY_MASKS = {
    "all": np.ones(PATCH_COUNT, dtype=bool),
    "locals": np.arange(PATCH_COUNT) < 10,
    "parts": (np.arange(PATCH_COUNT) >= 10) & (np.arange(PATCH_COUNT) < 14),
    "global": np.arange(PATCH_COUNT) == 14,
}

_GRANULARITY_CLASS = ["local"] * 10 + ["part"] * 4 + ["global"]


def path_output_dim(patch_size: int) -> int:
    """Flattened size of one path's final tensor for a given patch side."""
    if patch_size % 4:
        raise DataValidationError(f"patch size must be divisible by 4, got {patch_size}")
    side = patch_size // 4
    return side * side * CONV_SPECS[-1][2]


@dataclass
class ConvPath:
    """Parameters of one convolutional path (three bias-free kernels)."""

    k1: ParamTensor
    k2: ParamTensor
    k3: ParamTensor

    @classmethod
    def create(cls, rng: np.random.Generator, dtype, name: str) -> "ConvPath":
        kernels = [conv_kernel(rng, k, cin, cout, dtype, name=f"{name}/conv{i + 1}")
                   for i, (k, cin, cout) in enumerate(CONV_SPECS)]
        return cls(*kernels)

    def params(self) -> list[ParamTensor]:
        return [self.k1, self.k2, self.k3]


class MCNNModel:
    """All parameters of the multi-granularity CNN plus its config."""

    def __init__(self, paths: list[ConvPath], fusion_w: ParamTensor, fusion_b: ParamTensor,
                 head_w: ParamTensor, head_b: ParamTensor, *,
                 mask: np.ndarray, patch_size: int, repr_dim: int,
                 share_within_granularity: bool = False, seed: int = 0):
        self.paths = paths
        self.fusion_w = fusion_w
        self.fusion_b = fusion_b
        self.head_w = head_w
        self.head_b = head_b
        self.mask = np.asarray(mask, dtype=bool)
        self.patch_size = patch_size
        self.repr_dim = repr_dim
        self.share_within_granularity = share_within_granularity
        self.seed = seed
        expected_in = int(self.mask.sum()) * path_output_dim(patch_size)
        if fusion_w.shape != (repr_dim, expected_in):
            raise ShapeError(
                f"fusion weights {fusion_w.shape} do not match mask/patch config "
                f"(expected {(repr_dim, expected_in)})")

    @classmethod
    def create(cls, seed: int = 0, repr_dim: int = DEFAULT_REPR_DIM,
               path_count: int = PATCH_COUNT, patch_size: int = 64,
               mask=None, share_within_granularity: bool = False,
               dtype=np.float32) -> "MCNNModel":
        rng = np.random.default_rng(seed)
        if mask is None:
            mask = np.ones(path_count, dtype=bool)
        elif isinstance(mask, str):
            if path_count != PATCH_COUNT:
                raise DataValidationError("named masks apply to the 15-path configuration only")
            mask = GRANULARITY_MASKS[mask]
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (path_count,):
            raise ShapeError(f"mask must have one flag per path, got shape {mask.shape}")
        if share_within_granularity:
            if path_count != PATCH_COUNT:
                raise DataValidationError("weight sharing applies to the 15-path configuration only")
            shared = {g: ConvPath.create(rng, dtype, name=f"mcnn/shared_{g}")
                      for g in ("local", "part", "global")}
            paths = [shared[_GRANULARITY_CLASS[i]] for i in range(path_count)]
        else:
            paths = [ConvPath.create(rng, dtype, name=f"mcnn/path{i:02d}")
                     for i in range(path_count)]
        fusion_in = int(mask.sum()) * path_output_dim(patch_size)
        fusion_w, fusion_b = affine_params(rng, repr_dim, fusion_in, dtype, name="mcnn/fusion")
        head_w, head_b = affine_params(rng, 2, repr_dim, dtype, name="mcnn/head")
        return cls(paths, fusion_w, fusion_b, head_w, head_b, mask=mask,
                   patch_size=patch_size, repr_dim=repr_dim,
                   share_within_granularity=share_within_granularity, seed=seed)

    @property
    def path_count(self) -> int:
        return len(self.paths)

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def params(self) -> list[ParamTensor]:
        """Unique trainable parameters (shared paths listed once)."""
        seen: dict[int, ParamTensor] = {}
        for path in self.paths:
            for p in path.params():
                seen.setdefault(id(p), p)
        out = list(seen.values())
        out += [self.fusion_w, self.fusion_b, self.head_w, self.head_b]
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params()}

    def manifest(self) -> dict:
        mask_csv = ",".join("1" if m else "0" for m in self.mask)
        return {
            "mcnn_path_count": self.path_count,
            "mcnn_patch_size": self.patch_size,
            "mcnn_repr_dim": self.repr_dim,
            "mcnn_mask": mask_csv,
            "mcnn_share_within_granularity": int(self.share_within_granularity),
            "mcnn_seed": self.seed,
        }

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], manifest: dict) -> "MCNNModel":
        path_count = int(manifest["mcnn_path_count"])
        patch_size = int(manifest["mcnn_patch_size"])
        repr_dim = int(manifest["mcnn_repr_dim"])
        mask = np.array([c == "1" for c in str(manifest["mcnn_mask"]).split(",")], dtype=bool)
        share = bool(int(manifest["mcnn_share_within_granularity"]))
        seed = int(manifest.get("mcnn_seed", 0))
        model = cls.create(seed=seed, repr_dim=repr_dim, path_count=path_count,
                           patch_size=patch_size, mask=mask,
                           share_within_granularity=share)
        for p in model.params():
            if p.name not in tensors:
                raise ShapeError(f"checkpoint is missing tensor {p.name!r}")
            if tensors[p.name].shape != p.shape:
                raise ShapeError(
                    f"checkpoint tensor {p.name!r} has shape {tensors[p.name].shape}, "
                    f"expected {p.shape}")
            p.value = tensors[p.name].astype(p.dtype, copy=True)
        return model


def _path_forward_cached(path: ConvPath, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """conv-relu-pool, conv-relu, conv-relu-pool over a (B, s, s, 3) batch."""
    c1 = ops.conv2d(x, path.k1.value)
    p1, idx1 = ops.maxpool2(ops.relu(c1))
    c2 = ops.conv2d(p1, path.k2.value)
    c3 = ops.conv2d(ops.relu(c2), path.k3.value)
    p3, idx3 = ops.maxpool2(ops.relu(c3))
    flat = p3.reshape(p3.shape[0], -1)
    cache = {"x": x, "c1": c1, "idx1": idx1, "p1": p1, "c2": c2, "c3": c3,
             "idx3": idx3, "p3_shape": p3.shape}
    return flat, cache


def _path_backward(path: ConvPath, cache: dict, grad_flat: np.ndarray,
                   need_input_grad: bool = False) -> np.ndarray | None:
    d_p3 = grad_flat.reshape(cache["p3_shape"])
    d_a3 = ops.maxpool2_backward(cache["idx3"], d_p3)
    d_c3 = ops.relu_backward(cache["c3"], d_a3)
    a2 = ops.relu(cache["c2"])
    d_a2, g_k3 = ops.conv2d_backward(a2, path.k3.value, d_c3)
    d_c2 = ops.relu_backward(cache["c2"], d_a2)
    d_p1, g_k2 = ops.conv2d_backward(cache["p1"], path.k2.value, d_c2)
    d_a1 = ops.maxpool2_backward(cache["idx1"], d_p1)
    d_c1 = ops.relu_backward(cache["c1"], d_a1)
    d_x, g_k1 = ops.conv2d_backward(cache["x"], path.k1.value, d_c1,
                                    need_input_grad=need_input_grad)
    path.k1.accumulate_grad(g_k1)
    path.k2.accumulate_grad(g_k2)
    path.k3.accumulate_grad(g_k3)
    return d_x if need_input_grad else None


def path_forward(path: ConvPath, patch: np.ndarray) -> np.ndarray:
    """One patch (s, s, 3) through its conv path, flattened row-major."""
    if patch.ndim != 3 or patch.shape[2] != CONV_SPECS[0][1]:
        raise ShapeError(f"patch must be s x s x 3, got shape {patch.shape}")
    flat, _ = _path_forward_cached(path, patch[None])
    return flat[0]


def _patch_array(model: MCNNModel, patch_set) -> tuple[np.ndarray, bool]:
    if isinstance(patch_set, PatchSet):
        arr = patch_set.patches[None]
        single = True
    else:
        arr = np.asarray(patch_set)
        single = arr.ndim == 4
        if single:
            arr = arr[None]
    s = model.patch_size
    if arr.ndim != 5 or arr.shape[1] != model.path_count or arr.shape[2:] != (s, s, 3):
        raise ShapeError(
            f"expected {model.path_count} patches of {s}x{s}x3 "
            f"(optionally batched), got array of shape {np.asarray(patch_set).shape}")
    return arr, single


def fuse(model: MCNNModel, representations: np.ndarray) -> np.ndarray:
    """Concatenate active path outputs and fuse: max(W x + b, 0).

    representations: (L_active, path_dim) for one frame or
    (B, L_active, path_dim) batched, in canonical path order.
    """
    reps = np.asarray(representations)
    single = reps.ndim == 2
    if single:
        reps = reps[None]
    n_active = int(model.mask.sum())
    if reps.shape[1] != n_active or reps.shape[2] != path_output_dim(model.patch_size):
        raise ShapeError(
            f"expected {n_active} path outputs of {path_output_dim(model.patch_size)} "
            f"values each, got {reps.shape}")
    cat = reps.reshape(reps.shape[0], -1)
    z = ops.affine(cat, model.fusion_w.value, model.fusion_b.value)
    out = ops.relu(z)
    return out[0] if single else out


def classify(model: MCNNModel, representation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Head affine + softmax. Returns (probs, logits)."""
    logits = ops.affine(representation, model.head_w.value, model.head_b.value)
    return ops.softmax(logits), logits


def mcnn_forward(model: MCNNModel, patch_set, cache: bool = False):
    """Patches -> (representation, probs[, cache]).

    Accepts a PatchSet, an (L, s, s, 3) array, or a batch (B, L, s, s, 3).
    The representation is exposed for the temporal stage.
    """
    arr, single = _patch_array(model, patch_set)
    b = arr.shape[0]
    active = model.active_indices
    flats = []
    caches = []
    for k in active:
        flat, c = _path_forward_cached(model.paths[k], np.ascontiguousarray(arr[:, k]))
        flats.append(flat)
        caches.append(c)
    cat = np.concatenate(flats, axis=1)
    z_fuse = ops.affine(cat, model.fusion_w.value, model.fusion_b.value)
    rep = ops.relu(z_fuse)
    probs, logits = classify(model, rep)
    if not cache:
        if single:
            return rep[0], probs[0]
        return rep, probs
    fwd = {"cat": cat, "z_fuse": z_fuse, "rep": rep, "logits": logits,
           "probs": probs, "caches": caches, "batch": b, "single": single}
    if single:
        return rep[0], probs[0], fwd
    return rep, probs, fwd


def mcnn_loss(model: MCNNModel, fwd: dict, targets: np.ndarray,
              scale: int | None = None) -> float:
    """Mean cross-entropy of a cached forward against one-hot targets.

    `scale` overrides the denominator of the logit gradient so several
    micro-batches can accumulate into one optimizer step."""
    targets = np.atleast_2d(np.asarray(targets))
    loss, _, grad = ops.softmax_xent(fwd["logits"], targets)
    fwd["grad_logits"] = grad / (scale if scale else fwd["batch"])
    return float(np.mean(loss))


def mcnn_backward(model: MCNNModel, fwd: dict,
                  need_input_grads: bool = False) -> np.ndarray | None:
    """Accumulate gradients for every parameter from a cached forward.

    mcnn_loss must have been called on the cache first (it stores the
    logit gradient). Masked-out paths receive no gradient. When
    need_input_grads is set, returns d(loss)/d(patches) with zeros for
    inactive paths.
    """
    if "grad_logits" not in fwd:
        raise ShapeError("call mcnn_loss before mcnn_backward to set the logit gradient")
    g_logits = fwd["grad_logits"]
    d_rep, g_hw, g_hb = ops.affine_backward(fwd["rep"], model.head_w.value, g_logits)
    model.head_w.accumulate_grad(g_hw)
    model.head_b.accumulate_grad(g_hb)
    return mcnn_backward_from_representation(model, fwd, d_rep, need_input_grads)


def mcnn_backward_from_representation(model: MCNNModel, fwd: dict, d_rep: np.ndarray,
                                      need_input_grads: bool = False) -> np.ndarray | None:
    """Backward from an upstream representation gradient (skips the head).

    Used when a downstream consumer (the temporal stage under joint
    fine-tuning) supplies d(loss)/d(representation) directly.
    """
    if d_rep.ndim == 1:
        d_rep = d_rep[None]
    d_z = ops.relu_backward(fwd["z_fuse"], d_rep)
    d_cat, g_fw, g_fb = ops.affine_backward(fwd["cat"], model.fusion_w.value, d_z)
    model.fusion_w.accumulate_grad(g_fw)
    model.fusion_b.accumulate_grad(g_fb)
    active = model.active_indices
    pdim = path_output_dim(model.patch_size)
    d_patches = None
    if need_input_grads:
        b = fwd["batch"]
        s = model.patch_size
        d_patches = np.zeros((b, model.path_count, s, s, 3), dtype=d_cat.dtype)
    for slot, k in enumerate(active):
        grad_flat = d_cat[:, slot * pdim:(slot + 1) * pdim]
        d_x = _path_backward(model.paths[k], fwd["caches"][slot], grad_flat,
                             need_input_grad=need_input_grads)
        if need_input_grads:
            d_patches[:, k] = d_x
    if need_input_grads and fwd["single"]:
        return d_patches[0]
    return d_patches


def representation_batch(model: MCNNModel, patch_batches: np.ndarray,
                         chunk: int = 2) -> np.ndarray:
    """Representations for (B, L, s, s, 3) patches without backward caches."""
    out = np.empty((patch_batches.shape[0], model.repr_dim), dtype=np.float32)
    for lo in range(0, patch_batches.shape[0], chunk):
        hi = min(lo + chunk, patch_batches.shape[0])
        rep, _ = mcnn_forward(model, patch_batches[lo:hi])
        out[lo:hi] = rep
    return out
