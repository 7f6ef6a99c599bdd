"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every numeric value in the lab flows through this module: a ``Tensor`` wraps a
C-contiguous float64 array, ops executed inside a ``Tape`` context are recorded
and can be differentiated with :func:`backward` or re-executed bitwise with
``Tape.replay``. Outside a tape context the same ops run in plain inference
mode with no recording.

Shape discipline is strict on purpose: the only implicit broadcast allowed
anywhere is adding a 1-D bias over the last axis. Everything else must match
exactly or the op raises :class:`ShapeError` naming both shapes, which keeps
the gradient rules short enough to audit by hand.
"""

from __future__ import annotations

import hashlib
import itertools
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeEntry",
    "ShapeError",
    "NonFiniteError",
    "forward_op",
    "backward",
    "matmul",
    "add",
    "scale",
    "softmax",
    "layer_norm",
    "relu",
    "embedding_gather",
    "concat",
    "mean_pool",
    "max_pool",
    "dropout",
    "cross_entropy_loss",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_checksums",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf, naming the op kind."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    ``data`` is always stored C-contiguous so checkpoints and checksums are
    byte-stable. ``grad`` is populated by :func:`backward` and is ``None``
    until then.
    """

    __slots__ = ("id", "data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.id = next(_ids)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        tape = _active_tape()
        if tape is not None:
            tape.tensors[self.id] = self

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


@dataclass
class TapeEntry:
    """One recorded op: kind, operand ids, result id, attrs and saved state."""

    kind: str
    input_ids: tuple[int, ...]
    output_id: int
    attrs: dict = field(default_factory=dict)
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered record of ops; supports backward differentiation and replay."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self.tensors: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def watch(self, *tensors: Tensor) -> None:
        """Register tensors created outside this tape (e.g. parameters)."""
        for t in tensors:
            self.tensors[t.id] = t

    def replay(self) -> dict[int, np.ndarray]:
        """Re-execute every entry from current input values.

        Saved RNG products (dropout masks) are reused, so replay with
        unchanged inputs reproduces every recorded output bitwise. Returns a
        map from tensor id to the recomputed array.
        """
        values = {tid: t.data for tid, t in self.tensors.items()}
        for e in self.entries:
            ins = [values[i] for i in e.input_ids]
            values[e.output_id] = _FORWARD[e.kind](ins, e.attrs, e.saved)
        return values


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(kind, inputs: Sequence[Tensor], out: Tensor, attrs: dict, saved: dict) -> None:
    tape = _active_tape()
    if tape is None:
        return
    for t in inputs:
        tape.tensors.setdefault(t.id, t)
    tape.tensors[out.id] = out
    tape.entries.append(
        TapeEntry(kind, tuple(t.id for t in inputs), out.id, attrs, saved)
    )


def _finite_or_raise(kind: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"op '{kind}' produced non-finite values")
    return arr


def _apply(kind: str, inputs: Sequence[Tensor], attrs: dict) -> Tensor:
    saved: dict = {}
    with np.errstate(over="ignore", invalid="ignore"):
        out_arr = _FORWARD[kind]([t.data for t in inputs], attrs, saved)
    _finite_or_raise(kind, out_arr)
    out = Tensor(out_arr)
    _record(kind, inputs, out, attrs, saved)
    return out


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Generic entry point dispatching on op kind (see module docstring)."""
    if kind not in _FORWARD:
        raise ValueError(f"unknown op kind '{kind}'")
    return _apply(kind, inputs, dict(attrs or {}))


# ---------------------------------------------------------------------------
# Forward / backward rules. Each forward takes (arrays, attrs, saved) and may
# stash backward state in `saved`; each backward takes (arrays, out_grad,
# attrs, saved) and returns one gradient array (or None) per input.
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _op(kind):
    def deco(pair):
        fwd, bwd = pair()
        _FORWARD[kind] = fwd
        _BACKWARD[kind] = bwd
        return pair

    return deco


def _maybe_t(a: np.ndarray, flag: bool) -> np.ndarray:
    return np.swapaxes(a, -1, -2) if flag else a


@_op("matmul")
def _matmul_op():
    def fwd(arrs, attrs, saved):
        a, b = arrs
        ta, tb = attrs.get("transpose_a", False), attrs.get("transpose_b", False)
        ae, be = _maybe_t(a, ta), _maybe_t(b, tb)
        if ae.ndim < 2 or be.ndim < 2:
            raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
        if ae.shape[-1] != be.shape[-2]:
            raise ShapeError(f"matmul inner-dim mismatch: {a.shape} vs {b.shape}")
        if be.ndim > 2 and ae.shape[:-2] != be.shape[:-2]:
            raise ShapeError(f"matmul leading-dim mismatch: {a.shape} vs {b.shape}")
        return np.matmul(ae, be)

    def bwd(arrs, g, attrs, saved):
        a, b = arrs
        ta, tb = attrs.get("transpose_a", False), attrs.get("transpose_b", False)
        ae, be = _maybe_t(a, ta), _maybe_t(b, tb)
        if be.ndim == 2 and ae.ndim > 2:
            k = ae.shape[-1]
            da_e = np.matmul(g, be.T)
            db_e = ae.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            da_e = np.matmul(g, np.swapaxes(be, -1, -2))
            db_e = np.matmul(np.swapaxes(ae, -1, -2), g)
        return _maybe_t(da_e, ta), _maybe_t(db_e, tb)

    return fwd, bwd


@_op("add")
def _add_op():
    # Same-shape addition, or a 1-D bias broadcast over the last axis.
    def fwd(arrs, attrs, saved):
        a, b = arrs
        if a.shape == b.shape:
            return a + b
        if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
            return a + b
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(arrs, g, attrs, saved):
        a, b = arrs
        if a.shape == b.shape:
            return g, g
        db = g.reshape(-1, b.shape[0]).sum(axis=0)
        return g, db

    return fwd, bwd


@_op("scale")
def _scale_op():
    def fwd(arrs, attrs, saved):
        (a,) = arrs
        return a * float(attrs["factor"])

    def bwd(arrs, g, attrs, saved):
        return (g * float(attrs["factor"]),)

    return fwd, bwd


@_op("softmax")
def _softmax_op():
    def fwd(arrs, attrs, saved):
        (a,) = arrs
        axis = attrs.get("axis", -1)
        if not (-a.ndim <= axis < a.ndim):
            raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        saved["y"] = y
        return y

    def bwd(arrs, g, attrs, saved):
        axis = attrs.get("axis", -1)
        y = saved["y"]
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return fwd, bwd


@_op("layer_norm")
def _layer_norm_op():
    # Normalizes over the last axis; gain and bias are 1-D of that size.
    def fwd(arrs, attrs, saved):
        x, gain, bias = arrs
        eps = attrs.get("eps", 1e-5)
        n = x.shape[-1]
        if gain.shape != (n,) or bias.shape != (n,):
            raise ShapeError(
                f"layer_norm gain/bias must be ({n},), got {gain.shape} and {bias.shape}"
            )
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        saved["xhat"] = xhat
        saved["inv"] = inv
        return xhat * gain + bias

    def bwd(arrs, g, attrs, saved):
        x, gain, bias = arrs
        xhat, inv = saved["xhat"], saved["inv"]
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return fwd, bwd


@_op("relu")
def _relu_op():
    def fwd(arrs, attrs, saved):
        (a,) = arrs
        saved["mask"] = a > 0
        return np.where(saved["mask"], a, 0.0)

    def bwd(arrs, g, attrs, saved):
        return (np.where(saved["mask"], g, 0.0),)

    return fwd, bwd


@_op("embedding_gather")
def _gather_op():
    # Gathers rows of a [N, D] table by an integer index array of any shape.
    def fwd(arrs, attrs, saved):
        (table,) = arrs
        ids = np.asarray(attrs["ids"], dtype=np.int64)
        if table.ndim != 2:
            raise ShapeError(f"embedding_gather table must be 2-D, got {table.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(
                f"gather index out of range for table of {table.shape[0]} rows"
            )
        return table[ids]

    def bwd(arrs, g, attrs, saved):
        (table,) = arrs
        ids = np.asarray(attrs["ids"], dtype=np.int64)
        dt = np.zeros_like(table)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return fwd, bwd


@_op("concat")
def _concat_op():
    def fwd(arrs, attrs, saved):
        axis = attrs.get("axis", -1)
        base = list(arrs[0].shape)
        for a in arrs[1:]:
            other = list(a.shape)
            if len(other) != len(base):
                raise ShapeError(f"concat rank mismatch: {arrs[0].shape} vs {a.shape}")
            bi, oi = base.copy(), other.copy()
            bi[axis] = oi[axis] = 0
            if bi != oi:
                raise ShapeError(f"concat shape mismatch: {arrs[0].shape} vs {a.shape}")
        saved["sizes"] = [a.shape[axis] for a in arrs]
        return np.concatenate(arrs, axis=axis)

    def bwd(arrs, g, attrs, saved):
        axis = attrs.get("axis", -1)
        splits = np.cumsum(saved["sizes"])[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return fwd, bwd


def _pool_mask(attrs, shape):
    # Keep-mask over the positions axis of a [B, L, D] input; default all-keep.
    mask = attrs.get("mask")
    if mask is None:
        return np.ones(shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape[:2]:
        raise ShapeError(f"pool mask {mask.shape} does not match input {shape}")
    if not mask.any(axis=1).all():
        raise ShapeError("pool mask leaves a row with no kept positions")
    return mask


@_op("mean_pool")
def _mean_pool_op():
    # [B, L, D] -> [B, D], averaging kept positions per row.
    def fwd(arrs, attrs, saved):
        (x,) = arrs
        if x.ndim != 3:
            raise ShapeError(f"mean_pool expects [B, L, D], got {x.shape}")
        mask = _pool_mask(attrs, x.shape)
        counts = mask.sum(axis=1, keepdims=True)
        saved["mask"], saved["counts"] = mask, counts
        return (x * mask[:, :, None]).sum(axis=1) / counts

    def bwd(arrs, g, attrs, saved):
        mask, counts = saved["mask"], saved["counts"]
        return ((g / counts)[:, None, :] * mask[:, :, None],)

    return fwd, bwd


@_op("max_pool")
def _max_pool_op():
    # [B, L, D] -> [B, D], per-dimension max over kept positions.
    def fwd(arrs, attrs, saved):
        (x,) = arrs
        if x.ndim != 3:
            raise ShapeError(f"max_pool expects [B, L, D], got {x.shape}")
        mask = _pool_mask(attrs, x.shape)
        neg = np.where(mask[:, :, None], x, -np.inf)
        idx = neg.argmax(axis=1)
        saved["idx"] = idx
        return np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]

    def bwd(arrs, g, attrs, saved):
        (x,) = arrs
        dx = np.zeros_like(x)
        np.put_along_axis(dx, saved["idx"][:, None, :], g[:, None, :], axis=1)
        return (dx,)

    return fwd, bwd


@_op("dropout")
def _dropout_op():
    # rate == 0 is the exact identity and consumes no randomness. Otherwise an
    # inverted-dropout mask is drawn from the caller's RNG stream and saved,
    # so replay reuses it.
    def fwd(arrs, attrs, saved):
        (x,) = arrs
        rate = float(attrs.get("rate", 0.0))
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        if rate == 0.0:
            saved["mask"] = None
            return x.copy()
        if "mask" not in saved or saved["mask"] is None:
            rng = attrs.get("rng")
            if rng is None:
                raise ValueError("dropout with rate > 0 requires an rng")
            saved["mask"] = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * saved["mask"]

    def bwd(arrs, g, attrs, saved):
        if saved["mask"] is None:
            return (g,)
        return (g * saved["mask"],)

    return fwd, bwd


@_op("cross_entropy")
def _cross_entropy_op():
    # Mean negative log-softmax over positions whose target is not the
    # ignore marker (-1). Logits are [..., V]; targets share the leading shape.
    def fwd(arrs, attrs, saved):
        (logits,) = arrs
        targets = np.asarray(attrs["targets"], dtype=np.int64)
        if targets.shape != logits.shape[:-1]:
            raise ShapeError(
                f"targets shape {targets.shape} does not match logits {logits.shape}"
            )
        v = logits.shape[-1]
        flat = logits.reshape(-1, v)
        tgt = targets.reshape(-1)
        valid = tgt != -1
        if not valid.any():
            raise ValueError("empty loss: every position carries the ignore marker")
        if tgt[valid].min() < 0 or tgt[valid].max() >= v:
            raise ShapeError(f"target id out of range for vocab {v}")
        z = flat - flat.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(z).sum(axis=1))
        picked = z[np.arange(flat.shape[0]), np.where(valid, tgt, 0)]
        losses = (logsumexp - picked) * valid
        saved["z"] = z
        saved["valid"] = valid
        saved["tgt"] = tgt
        return np.asarray(losses.sum() / valid.sum())

    def bwd(arrs, g, attrs, saved):
        (logits,) = arrs
        z, valid, tgt = saved["z"], saved["valid"], saved["tgt"]
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        rows = np.arange(p.shape[0])
        p[rows, np.where(valid, tgt, 0)] -= 1.0
        p *= (valid / valid.sum())[:, None]
        g_scalar = float(np.asarray(g).reshape(-1)[0])
        return (g_scalar * p.reshape(logits.shape),)

    return fwd, bwd


# ---------------------------------------------------------------------------
# Public op wrappers
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    return _apply("matmul", [a, b], {"transpose_a": transpose_a, "transpose_b": transpose_b})


def add(a: Tensor, b: Tensor) -> Tensor:
    return _apply("add", [a, b], {})


def scale(a: Tensor, factor: float) -> Tensor:
    return _apply("scale", [a], {"factor": factor})


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return _apply("softmax", [a], {"axis": axis})


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return _apply("layer_norm", [x, gain, bias], {"eps": eps})


def relu(a: Tensor) -> Tensor:
    return _apply("relu", [a], {})


def embedding_gather(table: Tensor, ids) -> Tensor:
    return _apply("embedding_gather", [table], {"ids": np.asarray(ids, dtype=np.int64)})


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return _apply("concat", list(tensors), {"axis": axis})


def mean_pool(x: Tensor, mask=None) -> Tensor:
    return _apply("mean_pool", [x], {"mask": mask})


def max_pool(x: Tensor, mask=None) -> Tensor:
    return _apply("max_pool", [x], {"mask": mask})


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None) -> Tensor:
    return _apply("dropout", [x], {"rate": rate, "rng": rng})


def cross_entropy_loss(logits: Tensor, targets) -> Tensor:
    """Mean NLL over non-ignored targets; -1 marks an ignored position."""
    return _apply("cross_entropy", [logits], {"targets": np.asarray(targets, dtype=np.int64)})


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor registered in the tape.

    Tensors with no path to the loss receive an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for e in reversed(tape.entries):
        g = grads.pop(e.output_id, None)
        if g is None:
            continue
        arrs = [tape.tensors[i].data for i in e.input_ids]
        in_grads = _BACKWARD[e.kind](arrs, g, e.attrs, e.saved)
        for tid, ig in zip(e.input_ids, in_grads):
            if ig is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + ig
            else:
                grads[tid] = ig
    for tid, t in tape.tensors.items():
        if not t.requires_grad:
            continue
        g = grads.get(tid)
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64)


# ---------------------------------------------------------------------------
# Checkpoints: named float64 arrays in a zip archive plus a text manifest
# "name<TAB>shape<TAB>sha256-of-raw-bytes", sorted by name. Round trips are
# bit-exact because arrays are stored as raw little-endian float64 buffers.
# ---------------------------------------------------------------------------


def _array_checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def checkpoint_checksums(params: dict[str, Tensor]) -> dict[str, str]:
    return {name: _array_checksum(t.data) for name, t in params.items()}


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    path = str(path)
    names = sorted(params)
    manifest_lines = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in names:
            arr = np.ascontiguousarray(params[name].data, dtype="<f8")
            zf.writestr(name + ".bin", arr.tobytes())
            shape = ",".join(str(d) for d in arr.shape)
            manifest_lines.append(f"{name}\t{shape}\t{_array_checksum(arr)}")
        zf.writestr("MANIFEST.txt", "\n".join(manifest_lines) + "\n")


def load_checkpoint(path, requires_grad: bool = True) -> dict[str, Tensor]:
    path = str(path)
    out: dict[str, Tensor] = {}
    with zipfile.ZipFile(path) as zf:
        manifest = zf.read("MANIFEST.txt").decode().strip().splitlines()
        for line in manifest:
            name, shape_s, digest = line.split("\t")
            shape = tuple(int(d) for d in shape_s.split(",") if d)
            raw = zf.read(name + ".bin")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            if _array_checksum(arr) != digest:
                raise ValueError(f"checksum mismatch for '{name}' in {path}")
            out[name] = Tensor(arr, requires_grad=requires_grad, name=name)
    return out
