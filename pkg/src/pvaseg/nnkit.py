"""Small trainable 3D conv nets with handwritten reverse-mode gradients.

A backbone here is a stack of k=3 same-padding conv3d layers with rectifier
activations, closed by a 1x1x1 conv and a sigmoid.  The activation feeding
the head (the penultimate feature map) is exposed because the prototype
block downstream consumes it.  Everything runs on plain numpy: float32 for
training, float64 for gradient verification.  No hidden RNG anywhere in the
forward/backward path; initialization takes an explicit generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .volgrid import FormatError, ValidationError, Volume

CKPT_MAGIC = b"VCKP"

# sigmoid outputs are pinned away from {0,1} so log-losses and the
# confidence degree stay finite
LOGIT_FLOOR = 1e-7


class NumericalError(RuntimeError):
    """Non-finite values appeared during a forward or backward pass."""


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


@dataclass(frozen=True)
class FeatureMap:
    """Channel-major dense activation block of shape (C, H, W, D)."""

    channels: int
    dims: tuple[int, int, int]
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != (self.channels, *self.dims):
            raise ValidationError(
                f"feature map shape {self.data.shape} does not match "
                f"(C={self.channels}, dims={self.dims})")
        if not np.isfinite(self.data).all():
            raise NumericalError("feature map contains non-finite values")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FeatureMap":
        arr = np.asarray(arr)
        return cls(channels=arr.shape[0], dims=tuple(arr.shape[1:]), data=arr)


@dataclass
class ParamEntry:
    values: np.ndarray  # flat float32
    grad: np.ndarray  # flat float32, same length
    shape: tuple[int, ...]
    m: np.ndarray  # Adam first moment
    v: np.ndarray  # Adam second moment
    trainable: bool = True


class ParamStore:
    """Named flat parameter arrays plus their gradients and Adam state."""

    def __init__(self):
        self.entries: dict[str, ParamEntry] = {}
        self.step_count = 0

    def add(self, name: str, values: np.ndarray, trainable: bool = True):
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        flat = np.asarray(values, dtype=np.float32).ravel().copy()
        self.entries[name] = ParamEntry(
            values=flat,
            grad=np.zeros_like(flat),
            shape=tuple(np.asarray(values).shape),
            m=np.zeros_like(flat),
            v=np.zeros_like(flat),
            trainable=trainable,
        )

    def view(self, name: str) -> np.ndarray:
        e = self.entries[name]
        return e.values.reshape(e.shape)

    def zero_grads(self):
        for e in self.entries.values():
            e.grad[:] = 0.0

    def freeze(self, prefix: str = ""):
        for name, e in self.entries.items():
            if name.startswith(prefix):
                e.trainable = False

    def n_params(self) -> int:
        return sum(e.values.size for e in self.entries.values())


@dataclass(frozen=True)
class ModelSpec:
    """Backbone layout: hidden conv widths, then a 1-channel sigmoid head."""

    widths: tuple[int, ...] = (8, 8, 8)
    in_channels: int = 1
    role: str = "S_g"

    def __post_init__(self):
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValidationError(f"widths must be positive, got {self.widths}")
        if self.in_channels < 1:
            raise ValidationError("in_channels must be >= 1")
        if self.role not in ("S_l", "S_g"):
            raise ValidationError(f"unknown model role {self.role!r}")

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(f"conv{i + 1}" for i in range(len(self.widths))) + ("head",)

    @property
    def penultimate_channels(self) -> int:
        return self.widths[-1]


def _conv3_forward(x, w, b):
    # x (Cin,H,W,D), w (Cout,Cin,3,3,3): zero-pad by 1, im2col, one GEMM
    cin, H, W, D = x.shape
    xp = np.zeros((cin, H + 2, W + 2, D + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(H * W * D, cin * 27)
    out = cols @ w.reshape(w.shape[0], cin * 27).T
    out += b
    return out.reshape(H, W, D, w.shape[0]).transpose(3, 0, 1, 2), cols


def _conv3_backward(dout, cols, w, x_shape):
    cout = dout.shape[0]
    cin, H, W, D = x_shape
    dflat = dout.transpose(1, 2, 3, 0).reshape(H * W * D, cout)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = dflat @ w.reshape(cout, cin * 27)
    dwin = dcols.reshape(H, W, D, cin, 3, 3, 3).transpose(3, 4, 5, 6, 0, 1, 2)
    # scatter the 27 taps back onto the padded grid
    dxp = np.zeros((cin, H + 2, W + 2, D + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                dxp[:, i:i + H, j:j + W, k:k + D] += dwin[:, i, j, k]
    return dw, db, dxp[:, 1:-1, 1:-1, 1:-1]


def _conv1_forward(x, w, b):
    # pointwise channel mix: w (Cout,Cin)
    out = np.tensordot(w, x, axes=([1], [0]))
    out += b.reshape(-1, 1, 1, 1)
    return out


def _conv1_backward(dout, x, w):
    dw = np.tensordot(dout, x, axes=([1, 2, 3], [1, 2, 3]))
    db = dout.sum(axis=(1, 2, 3))
    dx = np.tensordot(w.T, dout, axes=([1], [0]))
    return dw, db, dx


class SegModel:
    """A ModelSpec bound to a ParamStore, with forward/backward passes."""

    def __init__(self, spec: ModelSpec, store: ParamStore | None = None,
                 rng: np.random.Generator | None = None):
        self.spec = spec
        if store is None:
            store = ParamStore()
            if rng is None:
                rng = np.random.default_rng(0)
            self._init_params(store, rng)
        else:
            self._check_store(store)
        self.store = store
        self._cache = None

    def _init_params(self, store: ParamStore, rng: np.random.Generator):
        cin = self.spec.in_channels
        for i, cout in enumerate(self.spec.widths):
            fan_in = cin * 27
            w = rng.standard_normal((cout, cin, 3, 3, 3)) * np.sqrt(2.0 / fan_in)
            store.add(f"conv{i + 1}.w", w.astype(np.float32))
            store.add(f"conv{i + 1}.b", np.zeros(cout, dtype=np.float32))
            cin = cout
        w = rng.standard_normal((1, cin)) * np.sqrt(1.0 / cin)
        store.add("head.w", w.astype(np.float32))
        store.add("head.b", np.zeros(1, dtype=np.float32))

    def _check_store(self, store: ParamStore):
        cin = self.spec.in_channels
        expected = {}
        for i, cout in enumerate(self.spec.widths):
            expected[f"conv{i + 1}.w"] = (cout, cin, 3, 3, 3)
            expected[f"conv{i + 1}.b"] = (cout,)
            cin = cout
        expected["head.w"] = (1, cin)
        expected["head.b"] = (1,)
        for name, shape in expected.items():
            if name not in store.entries:
                raise ValidationError(f"checkpoint missing parameter {name!r}")
            got = store.entries[name].shape
            if got != shape:
                raise ValidationError(
                    f"parameter {name!r} has shape {got}, expected {shape}")

    def _params(self, dtype) -> dict[str, np.ndarray]:
        out = {}
        for name in self.store.entries:
            out[name] = self.store.view(name).astype(dtype, copy=False)
        return out

    def _forward_with(self, params, x, train: bool):
        """Core pass on a (C,H,W,D) array; dtype follows x."""
        cache = [] if train else None
        h = x
        n_hidden = len(self.spec.widths)
        for i in range(n_hidden):
            name = f"conv{i + 1}"
            h, cols = _conv3_forward(h, params[name + ".w"], params[name + ".b"])
            if not np.isfinite(h).all():
                raise NumericalError(f"non-finite values after layer {name!r}")
            mask = h > 0
            h = h * mask
            if train:
                cache.append((name, cols, mask))
        penultimate = h
        s = _conv1_forward(h, params["head.w"], params["head.b"])
        if not np.isfinite(s).all():
            raise NumericalError("non-finite values after layer 'head'")
        y = expit(s)
        np.clip(y, LOGIT_FLOOR, 1.0 - LOGIT_FLOOR, out=y)
        if train:
            cache.append(("head", penultimate, y, x.shape))
        return y[0], penultimate, cache

    def _backward_with(self, params, cache, dlogit):
        """Return {name: grad array} for a cached forward."""
        name, penultimate, y, x_shape = cache[-1]
        grads = {}
        ds = (dlogit * y[0] * (1.0 - y[0]))[None]
        dw, db, dh = _conv1_backward(ds, penultimate, params["head.w"])
        grads["head.w"] = dw
        grads["head.b"] = db
        for i in range(len(cache) - 2, -1, -1):
            name, cols, mask = cache[i]
            dh = dh * mask
            in_shape = (params[name + ".w"].shape[1],) + x_shape[1:]
            dw, db, dh = _conv3_backward(dh, cols, params[name + ".w"], in_shape)
            grads[name + ".w"] = dw
            grads[name + ".b"] = db
        return grads

    def forward_array(self, x: np.ndarray, train: bool = False):
        """Run on a raw (H,W,D) or (C,H,W,D) float array.

        Returns (logit (H,W,D), penultimate (C,H,W,D)).  With train=True the
        intermediates are kept for one later backward() call.
        """
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.shape[0] != self.spec.in_channels:
            raise ValidationError(
                f"expected {self.spec.in_channels} input channels, "
                f"got {x.shape[0]}")
        if not np.isfinite(x).all():
            raise ValidationError("input patch contains non-finite values")
        y, penultimate, cache = self._forward_with(
            self._params(x.dtype), x, train)
        self._cache = (cache, x.dtype) if train else None
        return y, penultimate

    def forward(self, patch: Volume, train: bool = False):
        """Volume-typed pass: returns (logit Volume, penultimate FeatureMap)."""
        y, penultimate = self.forward_array(patch.data.astype(np.float32), train)
        logit = Volume.from_array(y.astype(np.float32), spacing=patch.spacing,
                                  role="logit")
        return logit, FeatureMap.from_array(penultimate)

    def backward(self, loss_grad: np.ndarray):
        """Accumulate parameter gradients for the last train-mode forward."""
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        cache, dtype = self._cache
        loss_grad = np.asarray(loss_grad, dtype=dtype)
        grads = self._backward_with(self._params(dtype), cache, loss_grad)
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericalError(
                    f"non-finite gradient for parameter {name!r}")
            self.store.entries[name].grad += g.astype(np.float32).ravel()

    def zero_grads(self):
        self.store.zero_grads()


def loss_seg(pred, target, weights=None):
    """Soft-Dice plus voxelwise cross-entropy against soft targets.

    Returns (scalar loss, gradient with respect to pred).  Optional weights
    rescale each voxel's contribution in both terms; zero weight removes a
    voxel entirely (used to ignore unlabeled voxels).
    """
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if p.shape != t.shape:
        raise ValidationError(
            f"pred dims {p.shape} do not match target dims {t.shape}")
    if weights is None:
        w = np.ones_like(p)
    else:
        w = np.asarray(getattr(weights, "data", weights), dtype=np.float64)
        if w.shape != p.shape:
            raise ValidationError(
                f"weights dims {w.shape} do not match pred dims {p.shape}")
    wsum = w.sum()
    if wsum <= 0:
        raise ValidationError("weights sum to zero; nothing to supervise")

    smooth = 1.0
    inter = (w * p * t).sum()
    denom = (w * p).sum() + (w * t).sum() + smooth
    num = 2.0 * inter + smooth
    dice_term = 1.0 - num / denom
    # d(dice)/dp = -(2wt*denom - num*w) / denom^2
    ddice = -(2.0 * w * t * denom - num * w) / (denom * denom)

    pc = np.clip(p, LOGIT_FLOOR, 1.0 - LOGIT_FLOOR)
    bce_term = -(w * (t * np.log(pc) + (1.0 - t) * np.log1p(-pc))).sum() / wsum
    dbce = -(w * (t / pc - (1.0 - t) / (1.0 - pc))) / wsum

    loss = float(dice_term + bce_term)
    return loss, (ddice + dbce).astype(np.float32)


def adam_step(store: ParamStore, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update over all trainable entries."""
    store.step_count += 1
    t = store.step_count
    c1 = np.float32(1.0 - beta1 ** t)
    c2 = np.float32(1.0 - beta2 ** t)
    b1 = np.float32(beta1)
    b2 = np.float32(beta2)
    for e in store.entries.values():
        if not e.trainable:
            continue
        g = e.grad
        e.m *= b1
        e.m += (1 - b1) * g
        e.v *= b2
        e.v += (1 - b2) * g * g
        mhat = e.m / c1
        vhat = e.v / c2
        e.values -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(eps))


def grad_check(model: SegModel, patch: np.ndarray, loss_fn=None,
               eps: float = 1e-3, tol: float = 1e-3) -> dict:
    """Compare backprop gradients to central finite differences.

    The whole check runs in float64 on a shadow copy of the parameters, so
    the comparison is not polluted by float32 round-off.  Returns a report
    {layer: {"max_rel_err": float, "status": "ok"|"fail"|"skipped"}} covering
    every parameter of every layer; frozen layers are reported as skipped.
    """
    if loss_fn is None:
        def loss_fn(y):
            return float(y.mean()), np.full_like(y, 1.0 / y.size)

    x = np.asarray(patch, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    params = {name: model.store.view(name).astype(np.float64)
              for name in model.store.entries}
    y, _, cache = model._forward_with(params, x, train=True)
    _, dlogit = loss_fn(y)
    grads = model._backward_with(params, cache, np.asarray(dlogit, np.float64))

    def run_loss():
        yy, _, _ = model._forward_with(params, x, train=False)
        return loss_fn(yy)[0]

    report = {}
    for layer in model.spec.layer_names:
        names = [layer + ".w", layer + ".b"]
        if not any(model.store.entries[n].trainable for n in names):
            report[layer] = {"max_rel_err": None, "status": "skipped"}
            continue
        max_rel = 0.0
        for name in names:
            if not model.store.entries[name].trainable:
                continue
            theta = params[name]
            g_bp = grads[name]
            for i in range(theta.size):
                orig = theta.flat[i]
                theta.flat[i] = orig + eps
                lp = run_loss()
                theta.flat[i] = orig - eps
                lm = run_loss()
                theta.flat[i] = orig
                g_fd = (lp - lm) / (2.0 * eps)
                gb = float(g_bp.flat[i])
                rel = abs(gb - g_fd) / max(abs(gb) + abs(g_fd), 1e-8)
                max_rel = max(max_rel, rel)
        status = "ok" if max_rel < tol else "fail"
        report[layer] = {"max_rel_err": max_rel, "status": status}
    return report


def save_checkpoint(path, store: ParamStore, extras: dict | None = None,
                    rng_state=None):
    """Write params (+ Adam moments) and extra arrays to one binary file.

    Layout: magic, u32 manifest length, JSON manifest, float32 LE blob.
    Moment arrays ride along as "<name>#m" / "<name>#v" entries so a resumed
    run continues bit-exactly.
    """
    entries = []
    blob = bytearray()

    def put(name, arr, shape):
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(shape),
                        "offset": len(blob), "len": int(data.size)})
        blob.extend(data.tobytes())

    for name in sorted(store.entries):
        e = store.entries[name]
        put(name, e.values, e.shape)
        put(name + "#m", e.m, e.shape)
        put(name + "#v", e.v, e.shape)
    for name in sorted(extras or {}):
        arr = np.asarray(extras[name], dtype=np.float32)
        put(name, arr.ravel(), arr.shape)
    manifest = {"entries": entries, "step_count": store.step_count,
                "rng_state": rng_state}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(len(head).to_bytes(4, "little"))
        f.write(head)
        f.write(bytes(blob))


def load_checkpoint(path):
    """Read a checkpoint back: (ParamStore, extras dict, rng_state).

    Entries that came with moment arrays are reattached as trainable
    parameters; bare entries are returned in extras.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    hlen = int.from_bytes(raw[4:8], "little")
    try:
        manifest = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint manifest") from exc
    blob = raw[8 + hlen:]

    arrays = {}
    for ent in manifest["entries"]:
        start = ent["offset"]  # byte offset into the blob
        nbytes = ent["len"] * 4
        chunk = blob[start:start + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated checkpoint blob")
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float32)
        arrays[ent["name"]] = (arr, tuple(ent["shape"]))

    store = ParamStore()
    store.step_count = int(manifest["step_count"])
    extras = {}
    for name, (arr, shape) in arrays.items():
        if "#" in name:
            continue
        if name + "#m" in arrays:
            e = ParamEntry(values=arr.copy(), grad=np.zeros_like(arr),
                           shape=shape, m=arrays[name + "#m"][0].copy(),
                           v=arrays[name + "#v"][0].copy())
            store.entries[name] = e
        else:
            extras[name] = arr.reshape(shape)
    return store, extras, manifest.get("rng_state")
