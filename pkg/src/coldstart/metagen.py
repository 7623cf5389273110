"""The ID-embedding generator, its two-phase loss, and the second-order
training loop.

The generator maps an ad's features to an initial ID embedding by pooling
the base model's (frozen) feature-embedding rows and applying a single
bias-free dense layer with tanh. Training simulates cold-start on old ads:
score a first minibatch with the generated embedding (loss l_a), take one
gradient step on the embedding, score a second disjoint minibatch with the
adapted embedding (loss l_b), and descend the weighted sum. The gradient
of that objective with respect to the generator weights contains a
Hessian-vector term, which double backprop delivers exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .data import CATEGORICAL, AdGroup, sample_meta_pair
from .models import BaseModel, batch_loss

POOLINGS = ("average", "max", "concat")


@dataclass
class MetaConfig:
    alpha: float = 0.1        # cold/warm balance in the unified loss
    inner_lr: float = 0.01    # step size of the simulated warm-up update
    outer_lr: float = 1e-3    # step size for the generator weights
    minibatch: int = 20       # K
    n_ids_per_step: int = 32
    epochs: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.inner_lr < 0:
            raise ValueError("inner_lr must be non-negative")
        if self.outer_lr < 0:
            raise ValueError("outer_lr must be non-negative")
        if self.minibatch < 1:
            raise ValueError("minibatch must be at least 1")


class Generator:
    """Feature-to-embedding network with frozen reused embedding layers.

    Only `w` (the final dense layer, stored transposed as
    pooled_width x m) is trainable; the reused tables belong to the base
    model and are never written here.
    """

    def __init__(self, model: BaseModel, pooling: str = "average",
                 l2: float = 1e-4, seed: int = 0):
        if pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if not model.u_fields:
            raise ValueError("base model has no ad-feature fields to reuse")
        self.model = model
        self.pooling = pooling
        self.l2 = l2
        m = model.m
        pooled = m * len(model.u_fields) if pooling == "concat" else m
        rng = np.random.default_rng(seed)
        s = np.sqrt(6.0 / (pooled + m))
        self.w = Parameter("gen.w", rng.uniform(-s, s, size=(pooled, m)))

    @property
    def reused_tables(self) -> list[Parameter]:
        return [self.model.tables[s.name] for s in self.model.u_fields]

    def _field_vectors(self, tape, u: dict) -> list[ad.Node]:
        vecs = []
        for spec in self.model.u_fields:
            table = tape.leaf(self.model.tables[spec.name])
            value = u[spec.name]
            if spec.kind == CATEGORICAL:
                vecs.append(ad.gather_row(table, value))
            elif value:
                vecs.append(ad.avg_pool_rows(ad.gather_rows(table, np.asarray(value, np.int64))))
            else:
                vecs.append(tape.constant(np.zeros(self.model.m)))
        return vecs

    def forward(self, tape: ad.Tape, u: dict) -> ad.Node:
        """Generated initial embedding for one ad, as an m-vector node."""
        vecs = self._field_vectors(tape, u)
        if self.pooling == "average":
            pooled = vecs[0]
            for v in vecs[1:]:
                pooled = ad.add(pooled, v)
            pooled = ad.scale(pooled, 1.0 / len(vecs))
        elif self.pooling == "max":
            pooled = vecs[0]
            for v in vecs[1:]:
                pooled = ad.maximum(pooled, v)
        else:
            pooled = ad.concat(vecs, axis=0)
        w_node = tape.leaf(self.w)
        out = ad.matmul(ad.reshape(pooled, (1, pooled.shape[0])), w_node)
        return ad.reshape(ad.tanh(out), (self.model.m,))

    def checksum_reused(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self.reused_tables:
            h.update(p.name.encode())
            h.update(p.value.tobytes())
        return h.hexdigest()


def generate_initial_embedding(generator: Generator, u: dict) -> np.ndarray:
    """tanh-bounded initial embedding for an unseen ad with features u."""
    tape = ad.Tape()
    return generator.forward(tape, u).value.copy()


def generate_rows(generator: Generator, groups: list[AdGroup]) -> np.ndarray:
    """Initial embeddings for many ads at once (forward only)."""
    return np.stack([generate_initial_embedding(generator, g.u) for g in groups])


# ---------------------------------------------------------------------------
# the two-phase objective


def _check_shared_ad(batch) -> int:
    if not batch:
        raise ValueError("batch is empty")
    ad_id = batch[0].ad_id
    if any(inst.ad_id != ad_id for inst in batch):
        raise ValueError("batch mixes ad IDs; the two-phase loss is per ad")
    return ad_id


def cold_loss(tape: ad.Tape, model: BaseModel, phi_init: ad.Node, batch) -> ad.Node:
    """Mean log-loss of the K batch instances scored with one shared
    embedding vector."""
    _check_shared_ad(batch)
    phi = ad.broadcast_row(phi_init, len(batch))
    return batch_loss(tape, model, phi, batch)


def adapt_embedding(phi_init: ad.Node, grad_phi: ad.Node, inner_lr: float) -> ad.Node:
    """One simulated warm-up step: phi' = phi_init - a * d l_a / d phi_init.
    Differentiable through both terms when grad_phi stayed connected."""
    if inner_lr < 0:
        raise ValueError("inner step size must be non-negative")
    if phi_init.shape != grad_phi.shape:
        raise ad.ShapeMismatch(
            f"adapt_embedding: {phi_init.shape} vs {grad_phi.shape}"
        )
    return ad.sub(phi_init, ad.scale(grad_phi, inner_lr))


def meta_loss(l_a, l_b, alpha: float):
    """alpha * l_a + (1 - alpha) * l_b, for floats or tape nodes."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if isinstance(l_a, ad.Node):
        return ad.add(ad.scale(l_a, alpha), ad.scale(l_b, 1.0 - alpha))
    return alpha * l_a + (1.0 - alpha) * l_b


@dataclass
class MetaGradResult:
    grad_w: np.ndarray
    l_a: float
    l_b: float
    l_meta: float


def _build_meta_graph(tape, model, generator, batch_a, batch_b, config,
                      second_order=True):
    u = batch_a[0].u
    phi_init = generator.forward(tape, u)
    l_a = cold_loss(tape, model, phi_init, batch_a)
    g_phi = ad.grad(l_a, phi_init, create_graph=second_order)
    phi_prime = adapt_embedding(phi_init, g_phi, config.inner_lr)
    l_b = cold_loss(tape, model, phi_prime, batch_b)
    l_m = meta_loss(l_a, l_b, config.alpha)
    objective = l_m
    if generator.l2:
        w_node = tape.leaf(generator.w)
        objective = ad.add(objective, ad.scale(ad.tsum(ad.square(w_node)), generator.l2))
    return phi_init, l_a, l_b, l_m, objective


def _validate_pair(batch_a, batch_b):
    id_a = _check_shared_ad(batch_a)
    id_b = _check_shared_ad(batch_b)
    if id_a != id_b:
        raise ValueError(f"batches belong to different ads ({id_a} vs {id_b})")
    if set(map(id, batch_a)) & set(map(id, batch_b)):
        raise ValueError("the two minibatches must be disjoint")


def meta_gradient(model, generator, batch_a, batch_b, config: MetaConfig,
                  second_order=True) -> MetaGradResult:
    """Exact gradient of the two-phase objective w.r.t. the generator
    weights, including the Hessian-vector term that backprop-through-the-
    inner-step produces. With second_order=False the inner gradient is
    detached (first-order approximation, used as a test reference)."""
    _validate_pair(batch_a, batch_b)
    tape = ad.Tape()
    _, l_a, l_b, l_m, objective = _build_meta_graph(
        tape, model, generator, batch_a, batch_b, config, second_order
    )
    g_w = ad.grad(objective, generator.w)
    return MetaGradResult(
        grad_w=g_w.value.copy(),
        l_a=float(l_a.value),
        l_b=float(l_b.value),
        l_meta=float(l_m.value),
    )


def meta_objective_value(model, generator, batch_a, batch_b, config) -> float:
    """Value of the objective only; what finite differences get to probe."""
    tape = ad.Tape()
    *_, objective = _build_meta_graph(tape, model, generator, batch_a, batch_b, config)
    return float(objective.value)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetaStepTrace:
    step: int
    entries: list = field(default_factory=list)  # (ad_id, l_a, l_b, l_meta)
    grad_norm: float = 0.0


def train_meta(model, generator, old_groups, config: MetaConfig) -> list[MetaStepTrace]:
    """Outer SGD over the generator weights.

    Per outer step: draw n ids, per id draw two disjoint K-batches, sum the
    per-id meta-gradients in ascending ad-id order, and take one step.
    Everything else (theta, all embedding tables) stays bitwise untouched.
    Ads with fewer than 2K samples are skipped with a warning.
    """
    rng = np.random.default_rng(config.seed)
    n = max(1, config.n_ids_per_step)
    traces = []
    warned = set()
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(old_groups))
        for lo in range(0, len(order), n):
            chunk = sorted(
                (old_groups[i] for i in order[lo:lo + n]), key=lambda g: g.ad_id
            )
            total = np.zeros_like(generator.w.value)
            trace = MetaStepTrace(step=step)
            for grp in chunk:
                pair = sample_meta_pair(grp, config.minibatch, rng)
                if pair is None:
                    if grp.ad_id not in warned:
                        warned.add(grp.ad_id)
                        warnings.warn(
                            f"ad {grp.ad_id} has fewer than 2K={2 * config.minibatch} "
                            "samples; skipped in meta-training"
                        )
                    continue
                res = meta_gradient(model, generator, pair[0], pair[1], config)
                total += res.grad_w
                trace.entries.append((grp.ad_id, res.l_a, res.l_b, res.l_meta))
            if trace.entries:
                trace.grad_norm = float(np.linalg.norm(total))
                if config.outer_lr > 0:
                    ad.sgd_step(generator.w, total, config.outer_lr)
                traces.append(trace)
            step += 1
    return traces


def warmup_update(model, embedding_row, batch, lr: float) -> np.ndarray:
    """One SGD step on a new ad's embedding row from one warm-up batch.
    Used identically for randomly initialized and generated rows; theta is
    never touched."""
    _check_shared_ad(batch)
    row = ad.as_tensor(embedding_row).copy()
    if lr == 0:
        return row
    param = Parameter("warm_row", row)
    tape = ad.Tape()
    phi = ad.broadcast_row(tape.leaf(param), len(batch))
    loss = batch_loss(tape, model, phi, batch)
    g = ad.grad(loss, param)
    ad.sgd_step(param, g, lr)
    return param.value
