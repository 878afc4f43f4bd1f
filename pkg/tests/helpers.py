"""Shared builders and independent reference implementations for the tests."""

from __future__ import annotations

import numpy as np

from dvn.backbone import TaskSpec, attach_hierarchy, conv_preset, init_params, mlp_preset
from dvn.partition import build_hierarchy, derive_orders, equal_partition
from dvn.tensor import finite_diff_grad


def mlp_setup(k=3, dim=2, classes=4, width=24, depth=2, seed=0, dims=None):
    dims = dims or [dim] * k
    tasks = [TaskSpec(j, classes, (dims[j - 1],)) for j in range(1, k + 1)]
    spec = mlp_preset(tasks, width, depth)
    part = equal_partition(spec, k)
    configs = derive_orders(k)
    hier = build_hierarchy(part, configs)
    spec = attach_hierarchy(spec, hier)
    return spec, part, configs, hier, init_params(spec, seed)


def conv_setup(k=4, shape=(8, 8, 3), classes=3, channels=16, depth=4, seed=0, shapes=None):
    shapes = shapes or [shape] * k
    tasks = [TaskSpec(j, classes, tuple(shapes[j - 1])) for j in range(1, k + 1)]
    spec = conv_preset(tasks, channels, depth)
    part = equal_partition(spec, k)
    configs = derive_orders(k)
    hier = build_hierarchy(part, configs)
    spec = attach_hierarchy(spec, hier)
    return spec, part, configs, hier, init_params(spec, seed)


def grads_close(analytic, numeric, rel=1e-5, abs_=1e-8):
    """Elementwise: |a - f| <= abs_ or |a - f| <= rel * max(|a|, |f|)."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff <= abs_) | (diff <= rel * scale)
    return bool(ok.all()), float(np.max(np.where(ok, 0.0, diff / np.maximum(scale, 1e-300)), initial=0.0))


def fd_all(loss_fn, params, names=None, eps=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every named parameter tensor."""
    names = list(params.tensors) if names is None else names
    return {n: finite_diff_grad(lambda _w: loss_fn(), params[n].data, eps) for n in names}


# reference forward on physically extracted sub-networks


def _select(a, idx):
    return a[..., idx]


def extract_subnetwork(params, spec, mask):
    """Copy exactly the weight blocks of ``mask`` into standalone arrays."""
    task, level = mask.task, mask.level
    layers = []
    first = spec.input_layers[task]
    entries = [(first, f"input.{task}", "in", slice(None), mask.in_index[0])]
    entries += [(l, f"body.{r}", str(r), mask.in_index[r], mask.out_index[r]) for r, l in enumerate(spec.body)]
    for layer, prefix, key, isel, osel in entries:
        w = params[prefix + ".weight"].data
        w = np.array(np.take(w, np.arange(w.shape[-2])[isel], axis=-2))
        w = np.array(np.take(w, np.arange(w.shape[-1])[osel], axis=-1))
        b = np.array(params[prefix + ".bias"].data[osel])
        norm = None
        if layer.norm:
            p = f"norm.{task}.{level}.{key}"
            norm = tuple(np.array(a) for a in (
                params[p + ".scale"].data, params[p + ".shift"].data,
                params.buffers[p + ".running_mean"], params.buffers[p + ".running_var"]))
        layers.append({"kind": layer.kind, "stride": layer.stride, "w": w, "b": b, "norm": norm,
                       "relu": layer.relu})
    head = (np.array(params[f"head.{task}.{level}.weight"].data), np.array(params[f"head.{task}.{level}.bias"].data))
    return layers, head


def conv_shift_add(x, w, stride):
    """Same-padded convolution by summing shifted kernel taps (no patch matrix)."""
    kh, kw, _, cout = w.shape
    n, h, wd, _ = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    oh, ow = -(-h // stride), -(-wd // stride)
    out = np.zeros((n, oh, ow, cout))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
            out += np.einsum("nhwc,co->nhwo", patch, w[i, j])
    return out


def standalone_forward(sub, x, eps=1e-5):
    layers, (hw, hb) = sub
    h = np.asarray(x, dtype=np.float64)
    for L in layers:
        if L["kind"] == "dense":
            h = h @ L["w"]
        else:
            h = conv_shift_add(h, L["w"], L["stride"])
        h = h + L["b"]
        if L["norm"] is not None:
            g, beta, rm, rv = L["norm"]
            h = (h - rm) / np.sqrt(rv + eps) * g + beta
        if L["relu"]:
            h = np.maximum(h, 0.0)
    if h.ndim == 4:
        h = h.mean(axis=(1, 2))
    return h @ hw + hb
