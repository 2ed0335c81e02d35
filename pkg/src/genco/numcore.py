"""Differentiable numeric core.

Tensors, autograd and the kernel implementations come from torch. This module
adds what the rest of the package relies on: shape-checked functional
operators with readable errors, textbook optimizers that refuse to skip
parameters without gradients, a central finite-difference gradient oracle,
keyed seed derivation, and the raw-binary checkpoint format.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operator."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes " + " vs ".join(str(list(s)) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradCheckError(RuntimeError):
    pass


class MissingGradientError(RuntimeError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"parameter {name!r} has no gradient")


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# determinism and seeds


def configure_threads(n: int | None = None) -> int:
    """Cap intra-op threads; GENCO_THREADS wins when ``n`` is omitted."""
    if n is None:
        n = int(os.environ.get("GENCO_THREADS", "1"))
    n = max(1, n)
    torch.set_num_threads(n)
    return n


def derive_seed(root: int, *names) -> int:
    """Named key derivation: a 63-bit seed from a root seed plus a purpose path.

    ``derive_seed(7, "augment", 3, 12)`` depends only on its arguments, so a
    stage's stream never shifts because another stage drew more numbers.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(repr((int(root),) + tuple(names)).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def torch_generator(key: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(key))
    return g


# ---------------------------------------------------------------------------
# operators


def _need(cond: bool, op: str, *shapes, detail: str = "") -> None:
    if not cond:
        raise ShapeError(op, *shapes, detail=detail)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.dim() >= 1 and b.dim() >= 1 and a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0],
          "matmul", a.shape, b.shape)
    return a @ b


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    _need(weight.dim() == 2 and x.shape[-1] == weight.shape[1], "linear", x.shape, weight.shape)
    if bias is not None:
        _need(bias.shape == (weight.shape[0],), "linear", weight.shape, bias.shape, detail="bias")
    return F.linear(x, weight, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 (or any odd k) convolution, zero padding k//2 so stride 1 keeps H, W."""
    _need(x.dim() == 4 and weight.dim() == 4 and x.shape[1] == weight.shape[1],
          "conv2d", x.shape, weight.shape)
    _need(weight.shape[2] % 2 == 1 and weight.shape[2] == weight.shape[3], "conv2d",
          x.shape, weight.shape, detail="kernel must be square and odd")
    _need(stride in (1, 2), "conv2d", x.shape, weight.shape, detail=f"stride {stride}")
    return F.conv2d(x, weight, bias, stride=stride, padding=weight.shape[2] // 2)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2 stride-2 deconvolution; weight is [C_in, C_out, 2, 2]."""
    _need(x.dim() == 4 and weight.dim() == 4 and x.shape[1] == weight.shape[0]
          and tuple(weight.shape[2:]) == (2, 2), "transposed_conv2d", x.shape, weight.shape)
    return F.conv_transpose2d(x, weight, bias, stride=2)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: Tensor,
               running_var: Tensor, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    _need(x.dim() >= 2 and weight.shape == (x.shape[1],), "batch_norm", x.shape, weight.shape)
    return F.batch_norm(x, running_mean, running_var, weight, bias,
                        training=training, momentum=momentum, eps=eps)


def max_pool2(x: Tensor) -> Tensor:
    _need(x.dim() == 4 and x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0, "max_pool2", x.shape)
    return F.max_pool2d(x, 2)


def global_avg_pool(x: Tensor) -> Tensor:
    _need(x.dim() == 4, "global_avg_pool", x.shape)
    return x.mean(dim=(2, 3))


def concat(tensors: Sequence[Tensor], dim: int = 1) -> Tensor:
    ref = tensors[0]
    for t in tensors[1:]:
        same = t.dim() == ref.dim() and all(
            a == b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != dim % ref.dim())
        _need(same, "concat", ref.shape, t.shape, detail=f"dim={dim}")
    return torch.cat(list(tensors), dim=dim)


def l2_normalize(x: Tensor, dim: int = -1) -> Tensor:
    return x / x.norm(dim=dim, keepdim=True)


def log_sum_exp(x: Tensor, dim: int = -1) -> Tensor:
    return torch.logsumexp(x, dim=dim)


def softmax_cross_entropy(logits: Tensor, labels: Tensor, ignore_index: int | None = None) -> Tensor:
    """Mean cross-entropy over class dim 1; labels equal to ``ignore_index`` drop out.

    Works for [B, C] classification and [B, C, H, W] dense logits alike.
    """
    expect = (logits.shape[0],) + tuple(logits.shape[2:])
    _need(logits.dim() >= 2 and tuple(labels.shape) == expect,
          "softmax_cross_entropy", logits.shape, labels.shape)
    labels = labels.long()
    if ignore_index is None:
        valid = torch.ones_like(labels, dtype=torch.bool)
    else:
        valid = labels != ignore_index
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    lse = torch.logsumexp(logits, dim=1)
    picked = logits.gather(1, safe.unsqueeze(1)).squeeze(1)
    nll = (lse - picked) * valid.to(logits.dtype)
    n = valid.sum()
    if int(n) == 0:
        return nll.sum() * 0.0
    return nll.sum() / n.to(logits.dtype)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], epsilon: float = 1e-6) -> float:
    """Max over all input elements of |analytic - central| / max(1, |central|).

    ``f`` takes no arguments and reads ``inputs`` by closure; each input is
    perturbed in place and restored.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise GradCheckError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    for t in inputs:
        if t.dtype != torch.float64:
            raise GradCheckError(f"grad_check needs float64 inputs, got {t.dtype}")
        if not t.requires_grad:
            raise GradCheckError("every input must require grad")
    out = f()
    if out.numel() != 1:
        raise GradCheckError(f"f must return a scalar, got shape {list(out.shape)}")
    if not torch.isfinite(out).all():
        raise GradCheckError("non-finite forward value")
    analytic = torch.autograd.grad(out, list(inputs), allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for t, g in zip(inputs, analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                hi = f().item()
                flat[i] = orig - epsilon
                lo = f().item()
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise GradCheckError("non-finite forward value")
                num = (hi - lo) / (2 * epsilon)
                err = abs(gflat[i].item() - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    """SGD with momentum, Adam and AdamW over a named parameter list.

    Weight decay is an L2 term folded into the gradient for ``sgd-momentum``
    and ``adam``; ``adamw`` decays decoupled from the adaptive step.
    """

    KINDS = ("sgd-momentum", "adam", "adamw")

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], kind: str, lr: float,
                 weight_decay: float = 0.0, momentum: float = 0.9,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in self.KINDS:
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.params: dict[str, Tensor] = {}
        for name, p in named_params:
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.params[name] = p
        self.state: dict[str, dict[str, Tensor]] = {}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(name)
        self.t += 1
        lr, wd = self.lr, self.weight_decay
        for name, p in self.params.items():
            g = p.grad
            st = self.state.setdefault(name, {})
            if self.kind == "sgd-momentum":
                if wd:
                    g = g + wd * p
                if self.momentum:
                    buf = st.get("momentum")
                    if buf is None:
                        buf = st["momentum"] = g.clone()
                    else:
                        buf.mul_(self.momentum).add_(g)
                    g = buf
                p.sub_(lr * g)
                continue

            b1, b2 = self.betas
            if self.kind == "adam" and wd:
                g = g + wd * p
            if self.kind == "adamw" and wd:
                p.mul_(1 - lr * wd)
            if "exp_avg" not in st:
                st["exp_avg"] = torch.zeros_like(p)
                st["exp_avg_sq"] = torch.zeros_like(p)
            m, v = st["exp_avg"], st["exp_avg_sq"]
            m.mul_(b1).add_((1 - b1) * g)
            v.mul_(b2).add_((1 - b2) * g * g)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + self.eps))

    def state_tensors(self, prefix: str = "optim") -> dict[str, Tensor]:
        out = {}
        for name, st in self.state.items():
            for key, buf in st.items():
                out[f"{prefix}.{key}.{name}"] = buf
        return out

    def load_state_tensors(self, tensors: dict[str, Tensor], t: int, prefix: str = "optim") -> None:
        self.t = t
        self.state = {}
        for full, buf in tensors.items():
            if not full.startswith(prefix + "."):
                continue
            key, name = full[len(prefix) + 1:].split(".", 1)
            if name not in self.params:
                raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
            self.state.setdefault(name, {})[key] = buf.clone()


# ---------------------------------------------------------------------------
# checkpoint format

_DTYPES = {
    torch.float32: ("float32", "<f4"),
    torch.float64: ("float64", "<f8"),
    torch.int64: ("int64", "<i8"),
}
_BY_NAME = {name: (dt, np_code) for dt, (name, np_code) in _DTYPES.items()}


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, Tensor], meta: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one raw little-endian row-major file per tensor."""
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    entries = []
    for i, (name, t) in enumerate(tensors.items()):
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name!r}")
        dtype_name, code = _DTYPES[t.dtype]
        fname = f"{i:04d}_{name}.bin"
        arr = t.detach().cpu().contiguous().numpy().astype(code, copy=False)
        (path / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype_name, "file": fname})
    manifest = {"format": "genco-checkpoint", "version": 1, "meta": meta or {}, "tensors": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise CheckpointError(f"no manifest.json in {path}")
    manifest = json.loads(mf.read_text())
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] not in _BY_NAME:
            raise CheckpointError(f"unsupported dtype {e['dtype']!r} for {e['name']!r}")
        dt, code = _BY_NAME[e["dtype"]]
        raw = (path / e["file"]).read_bytes()
        n = int(np.prod(e["shape"], dtype=np.int64))
        if len(raw) != n * np.dtype(code).itemsize:
            raise CheckpointError(f"{e['file']}: expected {n} elements, got {len(raw)} bytes")
        arr = np.frombuffer(raw, dtype=code).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(dt)
    return tensors, manifest.get("meta", {})
