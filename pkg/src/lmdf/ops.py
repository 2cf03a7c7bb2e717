"""Layer operations with analytic backward passes.

Every op works on a single example (spatial tensors are H x W x C,
vectors are 1-D) and transparently on a leading batch axis. Convolution
is stride 1 with zero padding that preserves the spatial extent; pooling
is disjoint 2x2 windows. Backward functions return gradients that match
central finite differences (see `lmdf.gradcheck`).
"""

from __future__ import annotations

import numpy as np

from .errors import DataValidationError, ShapeError

__all__ = [
    "conv2d", "conv2d_backward",
    "maxpool2", "maxpool2_backward",
    "relu", "relu_backward",
    "affine", "affine_backward",
    "softmax", "softmax_xent",
]


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    """Promote a single example to a batch of one; report whether it was single."""
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected a {ndim}-d tensor or a batch of them, got shape {x.shape}")


def _im2col(x_padded: np.ndarray, k: int) -> np.ndarray:
    """(N, H+2p, W+2p, C) -> (N, H, W, k*k*C) patch matrix, window order row-major."""
    n, hp, wp, c = x_padded.shape
    h, w = hp - k + 1, wp - k + 1
    cols = np.empty((n, h, w, k, k, c), dtype=x_padded.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, :, a, b, :] = x_padded[:, a:a + h, b:b + w, :]
    return cols.reshape(n, h, w, k * k * c)


def _check_kernel(x: np.ndarray, kernel: np.ndarray) -> None:
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be k x k x Cin x Cout, got shape {kernel.shape}")
    kh, kw, cin, _ = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel spatial extent must be square and odd, got {kh}x{kw}")
    if x.shape[-1] != cin:
        raise ShapeError(
            f"input channel count {x.shape[-1]} does not match kernel Cin {cin}"
        )
    if x.shape[-3] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"input spatial extents must be >= 1, got shape {x.shape}")


def conv2d(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Stride-1 zero-padded convolution preserving the spatial extent.

    x: (H, W, Cin) or (N, H, W, Cin); kernel: (k, k, Cin, Cout).
    Returns (H, W, Cout) or (N, H, W, Cout).
    """
    _check_kernel(x, kernel)
    xb, single = _as_batch(x, 3)
    n, h, w, c = xb.shape
    k, _, _, cout = kernel.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=xb.dtype)
    xp[:, p:p + h, p:p + w, :] = xb
    cols = _im2col(xp, k)
    y = cols.reshape(n * h * w, -1) @ kernel.reshape(-1, cout).astype(xb.dtype, copy=False)
    y = y.reshape(n, h, w, cout)
    return y[0] if single else y


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray,
                    need_input_grad: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
    """Gradients of a scalar loss through conv2d.

    Returns (grad_x, grad_kernel) with the shapes of x and kernel.
    grad_x is computed by scattering column gradients back through the
    padding; pass need_input_grad=False to skip it (first layers).
    """
    _check_kernel(x, kernel)
    xb, single = _as_batch(x, 3)
    gb, gsingle = _as_batch(grad_out, 3)
    if single != gsingle or gb.shape[:3] != xb.shape[:3] or gb.shape[3] != kernel.shape[3]:
        raise ShapeError(
            f"upstream gradient shape {grad_out.shape} does not match conv2d "
            f"output for input {x.shape} and kernel {kernel.shape}"
        )
    n, h, w, c = xb.shape
    k, _, _, cout = kernel.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=xb.dtype)
    xp[:, p:p + h, p:p + w, :] = xb
    cols = _im2col(xp, k)
    g2 = gb.reshape(n * h * w, cout)
    grad_kernel = cols.reshape(n * h * w, -1).T @ g2
    grad_kernel = grad_kernel.reshape(kernel.shape).astype(kernel.dtype, copy=False)
    if not need_input_grad:
        return None, grad_kernel
    if c <= cout:
        # scatter column gradients back through the padding
        d_cols = (g2 @ kernel.reshape(-1, cout).T).reshape(n, h, w, k, k, c)
        gxp = np.zeros_like(xp)
        for a in range(k):
            for b in range(k):
                gxp[:, a:a + h, b:b + w, :] += d_cols[:, :, :, a, b, :]
        grad_x = gxp[:, p:p + h, p:p + w, :]
    else:
        # cheaper when grad_out has fewer channels: convolve it with the
        # spatially flipped kernel, in/out channels swapped
        kf = np.ascontiguousarray(kernel[::-1, ::-1].transpose(0, 1, 3, 2))
        grad_x = conv2d(gb, kf)
    return (grad_x[0] if single else grad_x), grad_kernel


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint 2x2 max pooling.

    x: (H, W, C) or (N, H, W, C) with even H and W. Returns the pooled
    tensor and an index map (values 0..3, row-major window order, first
    element wins ties) used to route gradients back.
    """
    xb, single = _as_batch(x, 3)
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even spatial extents, got {h}x{w}")
    win = xb.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    win = win.reshape(n, h // 2, w // 2, 4, c)
    idx = win.argmax(axis=3).astype(np.uint8)
    y = np.take_along_axis(win, idx[:, :, :, None, :].astype(np.intp), axis=3)[:, :, :, 0, :]
    if single:
        return y[0], idx[0]
    return y, idx


def maxpool2_backward(idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route pooled gradients back to the winning input positions."""
    gb, single = _as_batch(grad_out, 3)
    ib, isingle = _as_batch(idx, 3)
    if single != isingle or ib.shape != gb.shape:
        raise ShapeError(f"index map shape {idx.shape} does not match grad shape {grad_out.shape}")
    n, h2, w2, c = gb.shape
    g = np.zeros((n, h2, w2, 4, c), dtype=gb.dtype)
    np.put_along_axis(g, ib[:, :, :, None, :].astype(np.intp), gb[:, :, :, None, :], axis=3)
    gx = g.reshape(n, h2, w2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h2, 2 * w2, c)
    return gx[0] if single else gx


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass upstream where x > 0; subgradient at exactly 0 is 0."""
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu backward shapes differ: {x.shape} vs {grad_out.shape}")
    return grad_out * (x > 0)


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W @ x + b for x (n,) or a batch (B, n); w is (m, n), b is (m,)."""
    if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
        raise ShapeError(f"affine params mismatched: w {w.shape}, b {b.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"affine input dim {x.shape[-1]} does not match weight in-dim {w.shape[1]}")
    return x @ w.T + b


def affine_backward(x: np.ndarray, w: np.ndarray,
                    grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (grad_x, grad_w, grad_b) for affine."""
    if grad_out.shape[-1] != w.shape[0] or grad_out.shape[:-1] != x.shape[:-1]:
        raise ShapeError(
            f"affine backward shapes mismatched: x {x.shape}, w {w.shape}, grad {grad_out.shape}"
        )
    if x.ndim == 1:
        grad_w = np.outer(grad_out, x)
        grad_b = grad_out.copy()
    else:
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ w
    return grad_x, grad_w, grad_b


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_one_hot(target: np.ndarray) -> None:
    flat = target.reshape(-1, target.shape[-1])
    ok = np.all((flat == 0) | (flat == 1)) and np.all(flat.sum(axis=-1) == 1)
    if not ok:
        raise DataValidationError(f"target must be one-hot, got {target!r}")


def softmax_xent(logits: np.ndarray, target: np.ndarray):
    """Softmax + cross-entropy with its logit gradient.

    logits and target are (C,) or (B, C); target must be one-hot.
    Returns (loss, probs, grad_logits) where loss is a scalar for a single
    example or a (B,) vector, and grad_logits = probs - target per example.
    """
    if logits.shape != target.shape:
        raise ShapeError(f"logits shape {logits.shape} != target shape {target.shape}")
    _check_one_hot(target)
    p = softmax(logits)
    # pick out log prob of the hot class via the stabilized identity
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = np.maximum(-(target * logp).sum(axis=-1), 0.0)
    grad = p - target
    return loss, p, grad
