"""Finite-difference gradient suites shared by the ``gradcheck`` command and the tests."""
from __future__ import annotations

import torch

from . import numcore as nc
from .contrastive import MemoryBank, build_generator, generate, genco_loss, moco_loss

TOLERANCE = 1e-4


def _rand(g: torch.Generator, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=g, dtype=torch.float64).requires_grad_(True)


def _unit(g: torch.Generator, n: int, d: int) -> torch.Tensor:
    x = torch.randn(n, d, generator=g, dtype=torch.float64)
    return x / x.norm(dim=1, keepdim=True)


def _filled_bank(g: torch.Generator, capacity: int, d: int) -> MemoryBank:
    bank = MemoryBank(capacity, d, dtype=torch.float64)
    bank.enqueue(_unit(g, capacity, d))
    return bank


def genco_instance_error(seed: int, dim: int = 8, bank_size: int = 16, batch: int = 4,
                         tau: float = 0.2, symmetric: bool = False) -> float:
    """grad_check of the full loss, through generate() and every generator weight."""
    g = nc.torch_generator(nc.derive_seed(seed, "gradcheck", "genco"))
    G = build_generator(dim, dim, seed).double()
    bank = _filled_bank(g, bank_size, dim)
    q_raw = _rand(g, batch, dim)
    k = _unit(g, batch, dim)
    z = torch.randn(batch, dim, generator=g, dtype=torch.float64) * 0.1 ** 0.5
    params = [p.requires_grad_(True) for p in G.parameters()]

    def f():
        q = nc.l2_normalize(q_raw, dim=1)
        return genco_loss(q, generate(G, q, z), k, bank, tau, symmetric)

    return nc.grad_check(f, [q_raw, *params])


def moco_instance_error(seed: int, dim: int = 8, bank_size: int = 16, batch: int = 4) -> float:
    g = nc.torch_generator(nc.derive_seed(seed, "gradcheck", "moco"))
    bank = _filled_bank(g, bank_size, dim)
    q_raw = _rand(g, batch, dim)
    k = _unit(g, batch, dim)
    return nc.grad_check(lambda: moco_loss(nc.l2_normalize(q_raw, dim=1), k, bank, 0.2), [q_raw])


def op_instance_errors(seed: int) -> dict[str, float]:
    """One random instance per differentiable operator, each reduced to a scalar."""
    g = nc.torch_generator(nc.derive_seed(seed, "gradcheck", "ops"))
    # fixed random projection so each scalar depends on every output element
    def reduce(y):
        w = torch.randn(y.shape, generator=nc.torch_generator(nc.derive_seed(seed, "reduce")),
                        dtype=torch.float64)
        return (y * w).sum()

    out = {}
    a, b = _rand(g, 3, 4), _rand(g, 4, 5)
    out["matmul"] = nc.grad_check(lambda: reduce(nc.matmul(a, b)), [a, b])
    x, w, bias = _rand(g, 3, 4), _rand(g, 5, 4), _rand(g, 5)
    out["linear"] = nc.grad_check(lambda: reduce(nc.linear(x, w, bias)), [x, w, bias])
    x, w, bias = _rand(g, 2, 2, 6, 6), _rand(g, 3, 2, 3, 3), _rand(g, 3)
    out["conv2d"] = nc.grad_check(lambda: reduce(nc.conv2d(x, w, bias, stride=2)), [x, w, bias])
    x, w, bias = _rand(g, 2, 3, 3, 3), _rand(g, 3, 2, 2, 2), _rand(g, 2)
    out["transposed_conv2d"] = nc.grad_check(lambda: reduce(nc.transposed_conv2d(x, w, bias)), [x, w, bias])
    x = _rand(g, 4, 5)
    out["relu"] = nc.grad_check(lambda: reduce(nc.relu(x)), [x])
    x, gamma, beta = _rand(g, 4, 3, 2, 2), _rand(g, 3), _rand(g, 3)
    rm, rv = torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64)
    out["batch_norm"] = nc.grad_check(
        lambda: reduce(nc.batch_norm(x, gamma, beta, rm.clone(), rv.clone(), training=True)), [x, gamma, beta])
    x = _rand(g, 2, 2, 4, 4)
    out["max_pool2"] = nc.grad_check(lambda: reduce(nc.max_pool2(x)), [x])
    out["global_avg_pool"] = nc.grad_check(lambda: reduce(nc.global_avg_pool(x)), [x])
    u, v = _rand(g, 2, 3), _rand(g, 2, 4)
    out["concat"] = nc.grad_check(lambda: reduce(nc.concat([u, v], dim=1)), [u, v])
    x = _rand(g, 3, 5)
    out["l2_normalize"] = nc.grad_check(lambda: reduce(nc.l2_normalize(x, dim=1)), [x])
    out["log_sum_exp"] = nc.grad_check(lambda: reduce(nc.log_sum_exp(x, dim=1)), [x])
    logits = _rand(g, 2, 3, 2, 2)
    labels = torch.tensor([[[0, 255], [2, 1]], [[1, 1], [255, 0]]])
    out["softmax_cross_entropy"] = nc.grad_check(
        lambda: nc.softmax_cross_entropy(logits, labels, ignore_index=255), [logits])
    return out


def run_suite(seed: int = 0, instances: int = 20, op_instances: int = 3) -> dict[str, float]:
    """Max relative error per suite."""
    result = {"genco_loss": max(genco_instance_error(nc.derive_seed(seed, i)) for i in range(instances)),
              "genco_loss_symmetric": max(genco_instance_error(nc.derive_seed(seed, "sym", i), symmetric=True)
                                          for i in range(max(1, instances // 4))),
              "moco_loss": max(moco_instance_error(nc.derive_seed(seed, i)) for i in range(instances))}
    ops: dict[str, float] = {}
    for i in range(op_instances):
        for name, err in op_instance_errors(nc.derive_seed(seed, "ops", i)).items():
            ops[name] = max(ops.get(name, 0.0), err)
    result.update({f"op.{k}": v for k, v in sorted(ops.items())})
    return result
