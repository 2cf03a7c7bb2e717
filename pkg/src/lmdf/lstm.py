"""Three-layer LSTM temporal head with streaming state and TBPTT training.

The cell is a vanilla LSTM: logistic-sigmoid gates, tanh candidate and
output squashing, no peepholes. Gate parameters are fused along the
first axis in the order (input, forget, output, candidate). Streaming
inference folds `stack_step` over frames; whole-sequence evaluation uses
the same fold, so the two are bit-identical on one platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DataValidationError, ShapeError
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, adam_step
from .tensor import ParamTensor, affine_params, uniform_init

LAYER_COUNT = 3
DEFAULT_MAX_MEMORY_STEPS = 60
FORGET_BIAS_INIT = 1.0

_GATE_ORDER = ("input", "forget", "output", "candidate")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow for large negative inputs
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass
class LSTMLayerParams:
    """Fused gate parameters of one LSTM layer.

    w_x: (4H, D) input weights, w_h: (4H, H) recurrent weights,
    bias: (4H,), gate blocks ordered (input, forget, output, candidate).
    """

    w_x: ParamTensor
    w_h: ParamTensor
    bias: ParamTensor

    def __post_init__(self):
        h4, d = self.w_x.shape
        if h4 % 4 or self.w_h.shape != (h4, h4 // 4) or self.bias.shape != (h4,):
            raise ShapeError(
                f"inconsistent gate parameter shapes: w_x {self.w_x.shape}, "
                f"w_h {self.w_h.shape}, bias {self.bias.shape}")

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[1]

    @classmethod
    def create(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int,
               dtype=np.float32, forget_bias: float = FORGET_BIAS_INIT,
               name: str = "lstm") -> "LSTMLayerParams":
        w_x = ParamTensor(uniform_init(rng, (4 * hidden_dim, input_dim),
                                       input_dim, hidden_dim, dtype), name=f"{name}/w_x")
        w_h = ParamTensor(uniform_init(rng, (4 * hidden_dim, hidden_dim),
                                       hidden_dim, hidden_dim, dtype), name=f"{name}/w_h")
        b = np.zeros(4 * hidden_dim, dtype=dtype)
        b[hidden_dim:2 * hidden_dim] = forget_bias
        bias = ParamTensor(b, name=f"{name}/bias")
        return cls(w_x, w_h, bias)

    def params(self) -> list[ParamTensor]:
        return [self.w_x, self.w_h, self.bias]


class LSTMState:
    """Per-session hidden and cell vectors for the three layers."""

    def __init__(self, hidden_dim: int, layer_count: int = LAYER_COUNT, dtype=np.float32):
        self.hidden_dim = hidden_dim
        self.layer_count = layer_count
        self.dtype = dtype
        self.h = [np.zeros(hidden_dim, dtype=dtype) for _ in range(layer_count)]
        self.c = [np.zeros(hidden_dim, dtype=dtype) for _ in range(layer_count)]
        self.frames_since_reset = 0

    def reset(self) -> None:
        for arr in (*self.h, *self.c):
            arr[...] = 0.0
        self.frames_since_reset = 0

    def copy(self) -> "LSTMState":
        s = LSTMState(self.hidden_dim, self.layer_count, self.dtype)
        s.h = [a.copy() for a in self.h]
        s.c = [a.copy() for a in self.c]
        s.frames_since_reset = self.frames_since_reset
        return s


class TemporalHead:
    """The 3-layer LSTM stack plus the 2-way prediction layer."""

    def __init__(self, layers: list[LSTMLayerParams], proj_w: ParamTensor,
                 proj_b: ParamTensor, max_memory_steps: int, seed: int = 0):
        if max_memory_steps < 1:
            raise DataValidationError(f"max_memory_steps must be positive, got {max_memory_steps}")
        self.layers = layers
        self.proj_w = proj_w
        self.proj_b = proj_b
        self.max_memory_steps = max_memory_steps
        self.seed = seed

    @classmethod
    def create(cls, seed: int = 0, input_dim: int = 256, hidden_dim: int | None = None,
               max_memory_steps: int = DEFAULT_MAX_MEMORY_STEPS,
               forget_bias: float = FORGET_BIAS_INIT, dtype=np.float32) -> "TemporalHead":
        # hidden width follows the representation width
        hidden_dim = input_dim if hidden_dim is None else hidden_dim
        rng = np.random.default_rng(seed)
        layers = []
        d = input_dim
        for i in range(LAYER_COUNT):
            layers.append(LSTMLayerParams.create(
                rng, d, hidden_dim, dtype, forget_bias, name=f"lstm/layer{i}"))
            d = hidden_dim
        proj_w, proj_b = affine_params(rng, 2, hidden_dim, dtype, name="lstm/proj")
        return cls(layers, proj_w, proj_b, max_memory_steps, seed=seed)

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].hidden_dim

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    def fresh_state(self, dtype=np.float32) -> LSTMState:
        return LSTMState(self.hidden_dim, len(self.layers), dtype)

    def params(self) -> list[ParamTensor]:
        out = []
        for layer in self.layers:
            out += layer.params()
        out += [self.proj_w, self.proj_b]
        return out

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params()}

    def manifest(self) -> dict:
        return {
            "lstm_layer_count": len(self.layers),
            "lstm_input_dim": self.input_dim,
            "lstm_hidden_dim": self.hidden_dim,
            "lstm_max_memory_steps": self.max_memory_steps,
            "lstm_forget_bias_init": FORGET_BIAS_INIT,
            "lstm_seed": self.seed,
        }

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], manifest: dict) -> "TemporalHead":
        head = cls.create(
            seed=int(manifest.get("lstm_seed", 0)),
            input_dim=int(manifest["lstm_input_dim"]),
            hidden_dim=int(manifest["lstm_hidden_dim"]),
            max_memory_steps=int(manifest["lstm_max_memory_steps"]),
        )
        for p in head.params():
            if p.name not in tensors:
                raise ShapeError(f"checkpoint is missing tensor {p.name!r}")
            if tensors[p.name].shape != p.shape:
                raise ShapeError(
                    f"checkpoint tensor {p.name!r} has shape {tensors[p.name].shape}, "
                    f"expected {p.shape}")
            p.value = tensors[p.name].astype(p.dtype, copy=True)
        return head


def cell_step(layer: LSTMLayerParams, x: np.ndarray, h_prev: np.ndarray,
              c_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One gated update: c = f*c_prev + i*g, h = o*tanh(c).

    x is (D,) or (B, D); h_prev and c_prev match with hidden width H.
    """
    hd = layer.hidden_dim
    if x.shape[-1] != layer.input_dim or h_prev.shape[-1] != hd or c_prev.shape[-1] != hd:
        raise ShapeError(
            f"cell_step dims mismatched: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for layer D={layer.input_dim}, H={hd}")
    z = x @ layer.w_x.value.T + h_prev @ layer.w_h.value.T + layer.bias.value
    i = _sigmoid(z[..., 0 * hd:1 * hd])
    f = _sigmoid(z[..., 1 * hd:2 * hd])
    o = _sigmoid(z[..., 2 * hd:3 * hd])
    g = np.tanh(z[..., 3 * hd:4 * hd])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def stack_step(head: TemporalHead, state: LSTMState, x: np.ndarray) -> np.ndarray:
    """Advance all three layers one frame; returns the top hidden vector.

    The state is updated in place (layer 1 consumes x, each next layer
    consumes the hidden vector below it).
    """
    inp = x
    for idx, layer in enumerate(head.layers):
        h, c = cell_step(layer, inp, state.h[idx], state.c[idx])
        state.h[idx] = h
        state.c[idx] = c
        inp = h
    state.frames_since_reset += 1
    return inp


def sequence_forward(head: TemporalHead, xs: np.ndarray,
                     state: LSTMState | None = None) -> tuple[np.ndarray, LSTMState]:
    """Whole-sequence evaluation as a fold of stack_step over frames."""
    xs = np.asarray(xs)
    if xs.ndim != 2 or xs.shape[1] != head.input_dim:
        raise ShapeError(f"sequence must be (T, {head.input_dim}), got {xs.shape}")
    if state is None:
        state = head.fresh_state(dtype=xs.dtype)
    hs = np.empty((xs.shape[0], head.hidden_dim), dtype=xs.dtype)
    for t in range(xs.shape[0]):
        hs[t] = stack_step(head, state, xs[t])
    return hs, state


def predict(head: TemporalHead, h_top: np.ndarray) -> tuple[np.ndarray, int]:
    """Project the top hidden state to class probabilities and a label.

    Argmax ties resolve to class 0 (normal)."""
    logits = ops.affine(h_top, head.proj_w.value, head.proj_b.value)
    probs = ops.softmax(logits)
    return probs, int(np.argmax(probs))


def predict_sequence(head: TemporalHead, xs: np.ndarray,
                     state: LSTMState | None = None):
    """Per-frame probabilities and labels for a representation sequence."""
    hs, state = sequence_forward(head, xs, state)
    logits = ops.affine(hs, head.proj_w.value, head.proj_b.value)
    probs = ops.softmax(logits)
    ys = np.argmax(probs, axis=1)
    return probs, ys, state


# ---------------------------------------------------------------------------
# Backpropagation through time
# ---------------------------------------------------------------------------

def _layer_forward_cached(layer: LSTMLayerParams, xs: np.ndarray,
                          h0: np.ndarray, c0: np.ndarray):
    """Forward a (T, B, D) window through one layer, caching gate values."""
    t_len, b, _ = xs.shape
    hd = layer.hidden_dim
    gates = np.empty((4, t_len, b, hd), dtype=xs.dtype)  # i, f, o, g
    h_seq = np.empty((t_len + 1, b, hd), dtype=xs.dtype)
    c_seq = np.empty((t_len + 1, b, hd), dtype=xs.dtype)
    tc = np.empty((t_len, b, hd), dtype=xs.dtype)
    h_seq[0] = h0
    c_seq[0] = c0
    wx_t = layer.w_x.value.T
    wh_t = layer.w_h.value.T
    bias = layer.bias.value
    for t in range(t_len):
        z = xs[t] @ wx_t + h_seq[t] @ wh_t + bias
        i = _sigmoid(z[:, 0 * hd:1 * hd])
        f = _sigmoid(z[:, 1 * hd:2 * hd])
        o = _sigmoid(z[:, 2 * hd:3 * hd])
        g = np.tanh(z[:, 3 * hd:4 * hd])
        c = f * c_seq[t] + i * g
        gates[0, t], gates[1, t], gates[2, t], gates[3, t] = i, f, o, g
        c_seq[t + 1] = c
        tc[t] = np.tanh(c)
        h_seq[t + 1] = o * tc[t]
    cache = {"xs": xs, "gates": gates, "h_seq": h_seq, "c_seq": c_seq, "tc": tc}
    return h_seq[1:], (h_seq[-1].copy(), c_seq[-1].copy()), cache


def _layer_backward(layer: LSTMLayerParams, cache: dict,
                    d_hs: np.ndarray) -> np.ndarray:
    """BPTT through one layer; accumulates parameter grads, returns d_xs."""
    xs, gates = cache["xs"], cache["gates"]
    h_seq, c_seq, tc = cache["h_seq"], cache["c_seq"], cache["tc"]
    t_len, b, _ = xs.shape
    hd = layer.hidden_dim
    g_wx = np.zeros_like(layer.w_x.value)
    g_wh = np.zeros_like(layer.w_h.value)
    g_b = np.zeros_like(layer.bias.value)
    d_xs = np.empty_like(xs)
    dh_next = np.zeros((b, hd), dtype=xs.dtype)
    dc_next = np.zeros((b, hd), dtype=xs.dtype)
    dz = np.empty((b, 4 * hd), dtype=xs.dtype)
    for t in range(t_len - 1, -1, -1):
        i, f, o, g = gates[0, t], gates[1, t], gates[2, t], gates[3, t]
        dh = d_hs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc[t] ** 2)
        dz[:, 0 * hd:1 * hd] = dc * g * i * (1.0 - i)
        dz[:, 1 * hd:2 * hd] = dc * c_seq[t] * f * (1.0 - f)
        dz[:, 2 * hd:3 * hd] = dh * tc[t] * o * (1.0 - o)
        dz[:, 3 * hd:4 * hd] = dc * i * (1.0 - g ** 2)
        g_wx += dz.T @ xs[t]
        g_wh += dz.T @ h_seq[t]
        g_b += dz.sum(axis=0)
        d_xs[t] = dz @ layer.w_x.value
        dh_next = dz @ layer.w_h.value
        dc_next = dc * f
    layer.w_x.accumulate_grad(g_wx)
    layer.w_h.accumulate_grad(g_wh)
    layer.bias.accumulate_grad(g_b)
    return d_xs


def stack_window_forward(head: TemporalHead, xs: np.ndarray,
                         h0: list[np.ndarray], c0: list[np.ndarray]):
    """Cached forward of a (T, B, D) window through the whole stack."""
    caches = []
    finals = []
    inp = xs
    for idx, layer in enumerate(head.layers):
        hs, final, cache = _layer_forward_cached(layer, inp, h0[idx], c0[idx])
        caches.append(cache)
        finals.append(final)
        inp = hs
    return inp, finals, caches


def stack_window_backward(head: TemporalHead, caches: list[dict],
                          d_h_top: np.ndarray) -> np.ndarray:
    """BPTT through the stack; accumulates grads, returns input grads.

    Gradients are truncated at the window boundary: the carried-in state
    is treated as a constant, so frames outside the window get exactly
    zero gradient."""
    d = d_h_top
    for idx in range(len(head.layers) - 1, -1, -1):
        d = _layer_backward(head.layers[idx], caches[idx], d)
    return d


def _one_hot(labels: np.ndarray, dtype) -> np.ndarray:
    out = np.zeros(labels.shape + (2,), dtype=dtype)
    np.put_along_axis(out, labels[..., None].astype(np.intp), 1.0, axis=-1)
    return out


def tbptt_train(head: TemporalHead, sequences, labels, lr: float = 3e-4,
                max_memory_steps: int | None = None, batch_size: int = 16,
                epochs: int = 1, seed: int = 0, loss_masks=None,
                input_grad_hook=None,
                beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                eps: float = ADAM_EPS) -> list[dict]:
    """Truncated-BPTT training over representation sequences.

    sequences: list of (T_i, D) arrays; labels: list of (T_i,) int arrays
    in {0, 1}. Each sequence starts from a fresh state; state flows
    forward across consecutive windows of at most max_memory_steps
    frames, but gradients never cross a window boundary. The window loss
    is the mean per-frame cross-entropy (optionally weighted by
    loss_masks); one Adam step is applied per window per batch.

    input_grad_hook(seq_indices, frame_offset, d_xs) receives the
    gradients w.r.t. the window's input representations, enabling joint
    fine-tuning of the upstream extractor.

    Returns a trace of {step, epoch, loss, accuracy} records.
    """
    if max_memory_steps is None:
        max_memory_steps = head.max_memory_steps
    if max_memory_steps < 1:
        raise DataValidationError(f"max_memory_steps must be positive, got {max_memory_steps}")
    sequences = [np.asarray(s, dtype=np.float32) for s in sequences]
    labels = [np.asarray(l) for l in labels]
    if len(sequences) != len(labels):
        raise DataValidationError(
            f"{len(sequences)} sequences but {len(labels)} label tracks")
    for i, (s, l) in enumerate(zip(sequences, labels)):
        if s.shape[0] != l.shape[0]:
            raise DataValidationError(
                f"sequence {i}: {s.shape[0]} frames but {l.shape[0]} labels")
    if loss_masks is not None:
        loss_masks = [np.asarray(m, dtype=np.float32) for m in loss_masks]
        for i, (s, m) in enumerate(zip(sequences, loss_masks)):
            if s.shape[0] != m.shape[0]:
                raise DataValidationError(
                    f"sequence {i}: {s.shape[0]} frames but {m.shape[0]} mask entries")

    rng = np.random.default_rng(seed)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(sequences):
        by_len.setdefault(s.shape[0], []).append(i)

    params = head.params()
    trace: list[dict] = []
    step = 0
    for epoch in range(epochs):
        for length in sorted(by_len):
            idx_pool = np.array(by_len[length])
            rng.shuffle(idx_pool)
            for lo in range(0, len(idx_pool), batch_size):
                batch_idx = idx_pool[lo:lo + batch_size]
                xs = np.stack([sequences[i] for i in batch_idx], axis=1)  # (T, B, D)
                ys = np.stack([labels[i] for i in batch_idx], axis=1)     # (T, B)
                if loss_masks is not None:
                    ws = np.stack([loss_masks[i] for i in batch_idx], axis=1)
                else:
                    ws = np.ones(ys.shape, dtype=np.float32)
                b = len(batch_idx)
                h_carry = [np.zeros((b, head.hidden_dim), dtype=np.float32)
                           for _ in head.layers]
                c_carry = [np.zeros((b, head.hidden_dim), dtype=np.float32)
                           for _ in head.layers]
                for t0 in range(0, length, max_memory_steps):
                    t1 = min(t0 + max_memory_steps, length)
                    hs_top, finals, caches = stack_window_forward(
                        head, xs[t0:t1], h_carry, c_carry)
                    h_carry = [f[0] for f in finals]
                    c_carry = [f[1] for f in finals]
                    w_win = ws[t0:t1]
                    w_total = float(w_win.sum())
                    tw = t1 - t0
                    logits = (hs_top.reshape(tw * b, -1) @ head.proj_w.value.T
                              + head.proj_b.value).reshape(tw, b, 2)
                    targets = _one_hot(ys[t0:t1], logits.dtype)
                    loss_tb, probs, grad_tb = ops.softmax_xent(
                        logits.reshape(tw * b, 2), targets.reshape(tw * b, 2))
                    loss_tb = loss_tb.reshape(tw, b)
                    preds = np.argmax(probs.reshape(tw, b, 2), axis=2)
                    if w_total == 0.0:
                        continue  # nothing to learn in this window; state already carried
                    loss = float((loss_tb * w_win).sum() / w_total)
                    hits = float((((preds == ys[t0:t1])) * w_win).sum() / w_total)
                    d_logits = (grad_tb.reshape(tw, b, 2)
                                * (w_win / w_total)[:, :, None])
                    head.zero_grads()
                    flat_dl = d_logits.reshape(tw * b, 2)
                    head.proj_w.accumulate_grad(flat_dl.T @ hs_top.reshape(tw * b, -1))
                    head.proj_b.accumulate_grad(flat_dl.sum(axis=0))
                    d_h_top = (flat_dl @ head.proj_w.value).reshape(tw, b, -1)
                    d_xs = stack_window_backward(head, caches, d_h_top)
                    if input_grad_hook is not None:
                        input_grad_hook(list(batch_idx), t0, d_xs)
                    for p in params:
                        adam_step(p, lr, beta1=beta1, beta2=beta2, eps=eps)
                    step += 1
                    trace.append({"step": step, "epoch": epoch,
                                  "loss": loss, "accuracy": hits})
    return trace
