"""Small numpy network: identity-initialised adapter plus a 3-layer GELU head.

Parameters live in plain dicts of float64 arrays keyed by ``PARAM_ORDER``.
Layers compute ``y = x @ W + b`` with ``W`` shaped (fan_in, fan_out).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np
from scipy.special import ndtr

Params = Dict[str, np.ndarray]

ADAPTER_KEYS = ("adapter.W", "adapter.b")
HEAD_KEYS = ("head.W1", "head.b1", "head.W2", "head.b2", "head.W3", "head.b3")
PARAM_ORDER = ADAPTER_KEYS + HEAD_KEYS

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(v, temp: float = 1.0):
    """Temperature softmax along the last axis (max-subtracted)."""
    if temp <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(v, dtype=np.float64) / temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v, temp: float = 1.0):
    if temp <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(v, dtype=np.float64) / temp
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def init_adapter(dim: int) -> Params:
    return {"adapter.W": np.eye(dim), "adapter.b": np.zeros(dim)}


def init_head(dim: int, hidden: int, rng: np.random.Generator) -> Params:
    def dense(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)

    return {
        "head.W1": dense(dim, hidden), "head.b1": np.zeros(hidden),
        "head.W2": dense(hidden, hidden), "head.b2": np.zeros(hidden),
        "head.W3": dense(hidden, dim), "head.b3": np.zeros(dim),
    }


def init_params(dim: int, hidden: int, rng: np.random.Generator) -> Params:
    params = init_adapter(dim)
    params.update(init_head(dim, hidden, rng))
    return params


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def forward(params: Params, x, dropout_p: float = 0.0,
            rng: Optional[np.random.Generator] = None, use_head: bool = True):
    """Run ``head(adapter(x))`` on a batch; returns ``(out, cache)``.

    With ``dropout_p > 0`` inverted dropout is applied after both GELUs. The
    output is not normalised.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    X = np.atleast_2d(x)
    dim = params["adapter.W"].shape[0]
    if X.shape[-1] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {X.shape[-1]}")
    z0 = X @ params["adapter.W"] + params["adapter.b"]
    cache = {"x": X, "z0": z0, "use_head": use_head}
    if not use_head:
        return (z0[0] if squeeze else z0), cache
    masks = [None, None]
    if dropout_p > 0:
        if rng is None:
            raise ValueError("dropout requires an rng")
        keep = 1.0 - dropout_p
        hidden = params["head.W1"].shape[1]
        masks = [(rng.random((X.shape[0], hidden)) < keep) / keep for _ in range(2)]
    h1 = z0 @ params["head.W1"] + params["head.b1"]
    a1 = gelu(h1)
    if masks[0] is not None:
        a1 = a1 * masks[0]
    h2 = a1 @ params["head.W2"] + params["head.b2"]
    a2 = gelu(h2)
    if masks[1] is not None:
        a2 = a2 * masks[1]
    out = a2 @ params["head.W3"] + params["head.b3"]
    cache.update(h1=h1, a1=a1, h2=h2, a2=a2, masks=masks)
    return (out[0] if squeeze else out), cache


def backward(params: Params, cache, dout) -> Params:
    """Gradients of a scalar loss w.r.t. every parameter, given ``dL/dout``."""
    dout = np.atleast_2d(np.asarray(dout, dtype=np.float64))
    grads = {}
    if cache["use_head"]:
        grads["head.W3"] = cache["a2"].T @ dout
        grads["head.b3"] = dout.sum(axis=0)
        da2 = dout @ params["head.W3"].T
        if cache["masks"][1] is not None:
            da2 = da2 * cache["masks"][1]
        dh2 = da2 * gelu_grad(cache["h2"])
        grads["head.W2"] = cache["a1"].T @ dh2
        grads["head.b2"] = dh2.sum(axis=0)
        da1 = dh2 @ params["head.W2"].T
        if cache["masks"][0] is not None:
            da1 = da1 * cache["masks"][0]
        dh1 = da1 * gelu_grad(cache["h1"])
        grads["head.W1"] = cache["z0"].T @ dh1
        grads["head.b1"] = dh1.sum(axis=0)
        dz0 = dh1 @ params["head.W1"].T
    else:
        dz0 = dout
    grads["adapter.W"] = cache["x"].T @ dz0
    grads["adapter.b"] = dz0.sum(axis=0)
    return grads


@dataclass
class ModelState:
    """Student and teacher branches plus the rolling teacher center."""

    student: Params
    teacher: Params
    center: np.ndarray
    teacher_temp: float = 0.04
    student_temp: float = 1.0
    ema_momentum: float = 0.99
    center_momentum: float = 0.9
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.teacher_temp <= 0 or self.student_temp <= 0:
            raise ValueError("temperatures must be positive")
        for k in PARAM_ORDER:
            if self.student[k].shape != self.teacher[k].shape:
                raise ValueError(f"student/teacher shape mismatch in {k}")
        if not np.all(np.isfinite(self.center)):
            raise ValueError("center must be finite")

    @property
    def dim(self) -> int:
        return self.student["adapter.W"].shape[0]

    @property
    def hidden(self) -> int:
        return self.student["head.W1"].shape[1]

    def copy(self) -> "ModelState":
        return ModelState(copy_params(self.student), copy_params(self.teacher),
                          self.center.copy(), self.teacher_temp, self.student_temp,
                          self.ema_momentum, self.center_momentum, self.dropout_p)

    @classmethod
    def create(cls, dim: int, hidden: int, rng: np.random.Generator, **kw) -> "ModelState":
        """Both branches start from the identity adapter; heads are drawn separately."""
        student = init_params(dim, hidden, rng)
        teacher = init_params(dim, hidden, rng)
        return cls(student, teacher, np.zeros(dim), **kw)


def model_forward(params: Params, x, dropout: bool = False, rng=None, p: float = 0.5,
                  use_head: bool = True):
    out, _ = forward(params, x, dropout_p=p if dropout else 0.0, rng=rng, use_head=use_head)
    return out


@dataclass
class AdamW:
    """AdamW with bias-corrected moments and decoupled weight decay."""

    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.04
    t: Dict[str, int] = field(default_factory=dict)
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def step(self, params: Params, grads: Params, lr: float, keys=None) -> None:
        """Update ``params`` in place for the blocks in ``keys`` (default: all grads)."""
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        keys = [k for k in PARAM_ORDER if k in grads] if keys is None else list(keys)
        for k in keys:
            if not np.all(np.isfinite(grads[k])):
                raise FloatingPointError(f"non-finite gradient in parameter block {k}")
        b1, b2 = self.betas
        for k in keys:
            # per-block step counts: blocks frozen early start their bias correction fresh
            t = self.t[k] = self.t.get(k, 0) + 1
            c1 = 1.0 - b1 ** t
            c2 = 1.0 - b2 ** t
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = params[k]
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(opt: AdamW, params: Params, grads: Params, lr: float, keys=None):
    opt.step(params, grads, lr, keys)
    return params, opt


def ema_update(teacher: Params, student: Params, m: float) -> Params:
    """Return ``m * teacher + (1 - m) * student`` blockwise."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch in {k}")
        out[k] = m * t + (1.0 - m) * s
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(loss_fn: Callable[[Params], tuple], params: Params, h: float = 1e-5,
               tol: float = 1e-4, n_coords: int = 200, rng=None, keys=None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` returns ``(loss, grads)``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps near-zero coordinates
    from reporting pure round-off.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    keys = [k for k in PARAM_ORDER if k in params] if keys is None else list(keys)
    work = copy_params(params)
    _, grads = loss_fn(work)
    sizes = np.array([work[k].size for k in keys])
    picks = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, worst_err = None, 0.0
    for flat in np.sort(picks):
        b = int(np.searchsorted(offsets, flat, side="right") - 1)
        k, i = keys[b], int(flat - offsets[b])
        view = work[k].reshape(-1)
        orig = view[i]
        view[i] = orig + h
        lp, _ = loss_fn(work)
        view[i] = orig - h
        lm, _ = loss_fn(work)
        view[i] = orig
        num = (lp - lm) / (2.0 * h)
        ana = float(grads[k].reshape(-1)[i])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        if worst is None or err > worst_err:
            worst, worst_err = (k, i, ana, num), err
    return GradCheckReport(worst_err, worst, len(picks), tol)


_MAGIC = b"TCNN0001"


def save_checkpoint(model: ModelState, path) -> None:
    """Header length (uint32 LE), JSON header, then float32 blobs in header order."""
    blocks = []
    for branch, params in (("student", model.student), ("teacher", model.teacher)):
        for k in PARAM_ORDER:
            blocks.append((f"{branch}.{k}", params[k]))
    blocks.append(("center", model.center))
    header = {
        "dim": model.dim, "hidden": model.hidden,
        "teacher_temp": model.teacher_temp, "student_temp": model.student_temp,
        "ema_momentum": model.ema_momentum, "center_momentum": model.center_momentum,
        "dropout_p": model.dropout_p,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for _, a in blocks:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    arrays = {}
    for b in header["blocks"]:
        n = int(np.prod(b["shape"])) if b["shape"] else 1
        a = np.frombuffer(raw, dtype="<f4", count=n, offset=pos)
        arrays[b["name"]] = a.reshape(b["shape"]).astype(np.float64)
        pos += 4 * n
    if pos != len(raw):
        raise ValueError(f"{path}: trailing or missing parameter bytes")
    student = {k: arrays[f"student.{k}"] for k in PARAM_ORDER}
    teacher = {k: arrays[f"teacher.{k}"] for k in PARAM_ORDER}
    return ModelState(student, teacher, arrays["center"], header["teacher_temp"],
                      header["student_temp"], header["ema_momentum"],
                      header["center_momentum"], header["dropout_p"])


def lr_at(cfg, epoch: int, epochs_total: int) -> float:
    """Per-epoch learning rate: linear warmup to ``lr_peak``, cosine decay to ``lr_final``.

    Warmup covers epochs ``1..warmup_epochs`` and ends exactly at the peak; the
    last epoch of the run sits at ``lr_final``.
    """
    if not 1 <= epoch <= epochs_total:
        raise ValueError(f"epoch {epoch} outside 1..{epochs_total}")
    warm = cfg.warmup_epochs
    if warm > 0 and epoch <= warm:
        return cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * epoch / warm
    span = epochs_total - max(warm, 0)
    if span <= 0:
        return cfg.lr_peak
    progress = (epoch - max(warm, 0)) / span
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + math.cos(math.pi * progress))
