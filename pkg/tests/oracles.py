"""Independent reference computations used only by the tests.

Nothing here imports the autodiff path: the classifier loss is re-derived in
plain numpy so finite differences check the Tensor backward rules from outside.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _logsumexp(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _conv(x, w, stride, pad):
    # x: [P|1, N, C, H, W], w: [P|1, F, C, k, k]
    p_, n, c, h, wd = x.shape
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(3, 4))[:, :, :, ::stride, ::stride]
    ho, wo = win.shape[3], win.shape[4]
    cols = win.transpose(0, 1, 3, 4, 2, 5, 6).reshape(p_, n * ho * wo, c * k * k)
    wm = w.reshape(w.shape[0], w.shape[1], -1).transpose(0, 2, 1)  # [P|1, CKK, F]
    out = np.matmul(cols, wm)  # [P, N*ho*wo, F]
    f = w.shape[1]
    return out.reshape(out.shape[0], n, ho, wo, f).transpose(0, 1, 4, 2, 3)


def numpy_logits(arch: dict, params: dict, x: np.ndarray, masks: list | None = None) -> np.ndarray:
    """Logits with an optional leading variant axis on any parameter.

    Parameters without a variant axis are broadcast; the result is [P, N, C].
    When ``masks`` is a list, the ReLU activity pattern of each variant is
    appended to it as a [P, -1] boolean array.
    """

    def get(name):
        p = params[name]
        return p[None] if p.ndim == _base_ndim[name] else p

    _base_ndim = params["__ndim__"]
    h = np.asarray(x, dtype=np.float64)[None]
    n = x.shape[0]
    for i, layer in enumerate(arch["layers"]):
        kind = layer["type"]
        if kind == "conv":
            w, b = get(f"layer{i}.weight"), get(f"layer{i}.bias")
            h = _conv(h, w, layer.get("stride", 1), layer.get("padding", 0))
            h = h + b[:, None, :, None, None]
        elif kind == "linear":
            w, b = get(f"layer{i}.weight"), get(f"layer{i}.bias")
            h = np.matmul(h, w) + b[:, None, :]
        elif kind == "relu":
            if masks is not None:
                masks.append((h > 0).reshape(h.shape[0], -1))
            h = np.maximum(h, 0.0)
        elif kind == "meanpool":
            s = layer["size"]
            P, N, C, H, W = h.shape
            ho, wo = H // s, W // s
            h = h[..., : ho * s, : wo * s].reshape(P, N, C, ho, s, wo, s).mean(axis=(4, 6))
        elif kind == "flatten":
            h = h.reshape(h.shape[0], n, -1)
    return h


def numpy_mim_loss(arch, params, x_id, y_id, x_ood, masks: list | None = None) -> np.ndarray:
    """CE(ID) + CE(OOD, uniform) for every parameter variant, shape [P]."""
    lo = numpy_logits(arch, params, x_id, masks)
    logp = lo - _logsumexp(lo)[..., None]
    l_id = -logp[:, np.arange(len(y_id)), y_id].mean(axis=1)
    lo = numpy_logits(arch, params, x_ood, masks)
    logp = lo - _logsumexp(lo)[..., None]
    l_ood = -logp.mean(axis=(1, 2))
    return l_id + l_ood


def relu_pattern(loss_fn, base: dict) -> np.ndarray:
    masks: list = []
    params = dict(base)
    params["__ndim__"] = {k: v.ndim for k, v in base.items()}
    loss_fn(params, masks)
    return np.concatenate([m.reshape(-1) for m in masks]) if masks else np.zeros(0, bool)


def finite_difference_grads(base: dict, loss_fn, h: float = 1e-5, chunk: int = 256) -> tuple[dict, int]:
    """Central differences for every coordinate of every parameter.

    ``loss_fn(params, masks)`` must return one loss per variant; perturbations
    of one parameter tensor are evaluated ``chunk`` coordinates at a time.
    Also returns how many coordinates had a +-h perturbation flip a ReLU, where
    the central difference does not estimate the derivative.
    """
    ndim = {k: v.ndim for k, v in base.items()}
    pattern = relu_pattern(loss_fn, base)
    crossed = 0
    grads = {}
    for name, value in base.items():
        flat = value.reshape(-1)
        g = np.empty(flat.size)
        for start in range(0, flat.size, chunk):
            idx = np.arange(start, min(start + chunk, flat.size))
            plus = np.repeat(flat[None], len(idx), axis=0)
            minus = plus.copy()
            plus[np.arange(len(idx)), idx] += h
            minus[np.arange(len(idx)), idx] -= h
            variants = np.concatenate([plus, minus]).reshape(-1, *value.shape)
            params = dict(base)
            params[name] = variants
            params["__ndim__"] = ndim
            masks: list = []
            losses = loss_fn(params, masks)
            g[idx] = (losses[: len(idx)] - losses[len(idx) :]) / (2 * h)
            if masks:
                variant = np.concatenate([np.broadcast_to(m, (2 * len(idx), m.shape[1])) for m in masks], axis=1)
                flipped = np.any(variant != pattern[None], axis=1)
                crossed += int(np.count_nonzero(flipped[: len(idx)] | flipped[len(idx) :]))
        grads[name] = g.reshape(value.shape)
    return grads, crossed


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def logistic_fit_accuracy(x: np.ndarray, y: np.ndarray, num_classes: int, steps: int = 500) -> float:
    """Training accuracy of multinomial logistic regression fitted by plain gradient descent."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    w = np.zeros((xb.shape[1], num_classes))
    onehot = np.eye(num_classes)[y]
    for _ in range(steps):
        z = xb @ w
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        w -= 0.5 * xb.T @ (p - onehot) / len(x)
    return float(np.mean((xb @ w).argmax(axis=1) == y))
