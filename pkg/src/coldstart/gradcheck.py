"""Finite-difference oracles and the gradient verification harness.

These are the independent checks for the analytic backward pass: central
differences for first derivatives, central differences of the analytic
gradient for Hessian-vector products, and a component-wise sweep for the
full second-order meta-gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one component at a time."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return out


def fd_hvp(grad_f, x: np.ndarray, v: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central difference of a gradient function along direction v."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    gp = grad_f(x + h * v)
    gm = grad_f(x - h * v)
    return (gp - gm) / (2.0 * h)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error between two same-shaped arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


@dataclass
class GradCheckReport:
    suites: list[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def lines(self):
        for s in self.suites:
            status = "PASS" if s.passed else "FAIL"
            yield f"[{status}] {s.name}: max rel err {s.max_rel_error:.3e} (tol {s.tolerance:.0e})"


MAX_CHECK_PARAMS = 5000

FIRST_ORDER_TOL = 1e-4
HVP_TOL = 1e-3
META_TOL = 1e-3


def _model_param_count(model) -> int:
    return sum(p.value.size for p in model.parameters())


def randomize_parameters(model, scale=0.3, seed=42) -> None:
    """Move every parameter to an O(scale) random point. Fresh models keep
    all ReLU preactivations within ~1e-3 of the kink (tiny embeddings, zero
    biases), where central differences step across the kink and disagree
    with the subgradient; checking at a generic point avoids that."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.value = rng.normal(0.0, scale, p.value.shape)


def check_model_first_order(model, instances, tol=FIRST_ORDER_TOL, h=1e-5) -> SuiteResult:
    """Analytic d loss / d (phi, theta, tables) vs central differences."""
    from .models import batch_loss

    n_params = _model_param_count(model)
    if n_params > MAX_CHECK_PARAMS:
        raise ValueError(
            f"grad check limited to {MAX_CHECK_PARAMS} parameters, model has {n_params}"
        )
    worst = 0.0
    phi_param = ad.Parameter("phi_probe", np.zeros(model.m))
    for inst in instances:
        phi_param.value = model.tables[model.ad_id_field].value[inst.ad_id].copy()
        targets = [phi_param] + list(model.parameters())

        def loss_value():
            tape = ad.Tape()
            phi = ad.broadcast_row(tape.leaf(phi_param), 1)
            return batch_loss(tape, model, phi, [inst])

        loss = loss_value()
        analytic = ad.grad(loss, targets)
        for param, g in zip(targets, analytic):
            def f(x, param=param):
                saved = param.value
                param.value = x.reshape(saved.shape)
                try:
                    return float(loss_value().value)
                finally:
                    param.value = saved

            fd = fd_gradient(f, param.value.copy(), h=h).reshape(param.value.shape)
            worst = max(worst, rel_error(g.value, fd))
    return SuiteResult(f"first_order[{model.variant}]", worst, tol)


def check_hvp(model, instances, tol=HVP_TOL, h=1e-4, seed=0) -> SuiteResult:
    """Double-backprop HVP vs central difference of the analytic gradient."""
    from .models import batch_loss

    rng = np.random.default_rng(seed)
    phi_param = ad.Parameter("phi_probe", np.zeros(model.m))
    worst = 0.0
    for inst in instances:
        phi_param.value = rng.normal(0.0, 0.3, model.m)

        def build():
            tape = ad.Tape()
            phi = ad.broadcast_row(tape.leaf(phi_param), 1)
            return batch_loss(tape, model, phi, [inst])

        v = rng.normal(size=model.m)
        analytic = ad.hvp(build(), phi_param, v).value

        def grad_at(x):
            saved = phi_param.value
            phi_param.value = x
            try:
                return ad.grad(build(), phi_param).value
            finally:
                phi_param.value = saved

        numeric = fd_hvp(grad_at, phi_param.value.copy(), v, h=h)
        worst = max(worst, rel_error(analytic, numeric))
    return SuiteResult(f"hvp[{model.variant}]", worst, tol)


def check_meta_gradient(model, generator, group, config, tol=META_TOL, h=1e-5) -> SuiteResult:
    """Full second-order meta-gradient vs finite differences over w."""
    from .metagen import meta_gradient, meta_objective_value

    w = generator.w
    if w.value.size > MAX_CHECK_PARAMS:
        raise ValueError(
            f"grad check limited to {MAX_CHECK_PARAMS} parameters, w has {w.value.size}"
        )
    k = config.minibatch
    batch_a = group.instances[:k]
    batch_b = group.instances[k:2 * k]
    analytic = meta_gradient(model, generator, batch_a, batch_b, config).grad_w

    def f(x):
        saved = w.value
        w.value = x.reshape(saved.shape)
        try:
            return meta_objective_value(model, generator, batch_a, batch_b, config)
        finally:
            w.value = saved

    fd = fd_gradient(f, w.value.copy(), h=h).reshape(w.value.shape)
    return SuiteResult("meta_gradient", rel_error(analytic, fd), tol)
