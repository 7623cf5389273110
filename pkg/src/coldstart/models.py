"""The six embedding-&-MLP CTR architectures over a shared embedding layer.

Every variant exposes the same surface: a batched differentiable forward
that takes the ad-ID embedding phi explicitly, so the identical code path
serves looked-up rows (old ads), freshly drawn random rows, and generated
rows (cold-start). Dense layers use ReLU; output is always a sigmoid.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .data import (
    CATEGORICAL,
    GROUP_AD_FEATURE,
    GROUP_AD_ID,
    Instance,
    FieldSpec,
    validate_field_specs,
)

ALL_VARIANTS = ("FM", "WideDeep", "IPNN", "OPNN", "PNNstar", "DeepFM")
DEEP_VARIANTS = ("WideDeep", "IPNN", "OPNN", "PNNstar", "DeepFM")

EMBED_SIGMA = 0.01
DEFAULT_HIDDEN = [64, 32, 16]
DEFAULT_LR = 0.01
DEFAULT_BATCH = 256


class RandomInitPolicy:
    """Normal(0, sigma^2) rows for unseen-ID slots; the base-cold baseline."""

    def __init__(self, sigma: float = EMBED_SIGMA):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.sigma = sigma

    def rows(self, n: int, m: int, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, self.sigma, size=(n, m))


def _glorot(rng, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class BaseModel:
    def __init__(self, variant, field_specs, m, hidden_dims, seed):
        if variant not in ALL_VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {ALL_VARIANTS}")
        if m < 2:
            raise ValueError(f"embedding dimension must be at least 2, got {m}")
        if variant in DEEP_VARIANTS and not hidden_dims:
            raise ValueError(f"{variant} needs non-empty hidden_dims")
        ad_spec = validate_field_specs(field_specs)

        self.variant = variant
        self.field_specs = list(field_specs)
        self.m = m
        self.hidden_dims = list(hidden_dims)
        self.seed = seed
        self.ad_id_field = ad_spec.name
        self.feature_fields = [s for s in field_specs if s.group != GROUP_AD_ID]
        self.u_fields = [s for s in field_specs if s.group == GROUP_AD_FEATURE]

        rng = np.random.default_rng(seed)
        self.tables: dict[str, Parameter] = {}
        for spec in field_specs:
            self.tables[spec.name] = Parameter(
                f"emb.{spec.name}", rng.normal(0.0, EMBED_SIGMA, size=(spec.vocab_size, m))
            )
        self.theta: dict[str, Parameter] = {}
        self._build_theta(rng)
        self._outer_maps = None  # cached 0/1 matrices for outer-product features

    # -- parameter plumbing --------------------------------------------------

    def _dense(self, rng, name, fan_in, fan_out):
        self.theta[f"{name}.W"] = Parameter(f"theta.{name}.W", _glorot(rng, fan_in, fan_out))
        self.theta[f"{name}.b"] = Parameter(f"theta.{name}.b", np.zeros(fan_out))

    def _build_theta(self, rng):
        n_fields = 1 + len(self.feature_fields)
        cat_width = n_fields * self.m
        v = self.variant

        if v in ("FM", "DeepFM"):
            self.theta["fm_linear"] = Parameter("theta.fm_linear", _glorot(rng, cat_width, 1))
            self.theta["fm_bias"] = Parameter("theta.fm_bias", np.zeros(()))
        if v == "WideDeep":
            for spec in self.feature_fields:
                self.theta[f"wide.{spec.name}"] = Parameter(
                    f"theta.wide.{spec.name}", np.zeros((spec.vocab_size, 1))
                )
            self.theta["wide_bias"] = Parameter("theta.wide_bias", np.zeros(()))

        if v == "WideDeep":
            dims = [cat_width] + self.hidden_dims
            for i in range(len(self.hidden_dims)):
                self._dense(rng, f"deep{i}", dims[i], dims[i + 1])
            self._dense(rng, "out", dims[-1], 1)
        elif v == "DeepFM":
            dims = [cat_width] + self.hidden_dims
            for i in range(len(self.hidden_dims)):
                self._dense(rng, f"deep{i}", dims[i], dims[i + 1])
            self._dense(rng, "out", 1 + self.m + dims[-1], 1)
        elif v in ("IPNN", "OPNN", "PNNstar"):
            h1, rest = self.hidden_dims[0], self.hidden_dims[1:]
            self._dense(rng, "embed_dense", cat_width, h1)
            n_pairs = n_fields * (n_fields - 1) // 2
            prod_width = {"IPNN": n_pairs, "OPNN": self.m * self.m,
                          "PNNstar": n_pairs + self.m * self.m}[v]
            dims = [h1 + prod_width] + rest
            for i in range(len(rest)):
                self._dense(rng, f"hidden{i}", dims[i], dims[i + 1])
            self._dense(rng, "out", dims[-1], 1)

    def parameters(self) -> list[Parameter]:
        return list(self.tables.values()) + list(self.theta.values())

    def theta_parameters(self) -> list[Parameter]:
        return list(self.theta.values())

    def checksum(self, which="all") -> str:
        params = {
            "all": self.parameters(),
            "theta": self.theta_parameters(),
            "tables": list(self.tables.values()),
        }[which]
        h = hashlib.sha256()
        for p in sorted(params, key=lambda p: p.name):
            h.update(p.name.encode())
            h.update(p.value.tobytes())
        return h.hexdigest()

    # -- field embedding -----------------------------------------------------

    def _field_value(self, spec, inst: Instance):
        store = inst.u if spec.group == GROUP_AD_FEATURE else inst.v
        return store[spec.name]

    def batch_field_nodes(self, tape: ad.Tape, instances) -> dict[str, ad.Node]:
        """One (B, m) embedding node per non-ID field; token lists are
        average-pooled, empty lists pool to zero."""
        nodes = {}
        B = len(instances)
        for spec in self.feature_fields:
            table = tape.leaf(self.tables[spec.name])
            if spec.kind == CATEGORICAL:
                idx = np.fromiter(
                    (self._field_value(spec, i) for i in instances), np.int64, count=B
                )
                nodes[spec.name] = ad.gather_rows(table, idx)
            else:
                flat, pool = [], np.zeros((B, 0))
                lists = [self._field_value(spec, i) for i in instances]
                total = sum(len(t) for t in lists)
                if total == 0:
                    nodes[spec.name] = tape.constant(np.zeros((B, self.m)))
                    continue
                pool = np.zeros((B, total))
                pos = 0
                for b, tokens in enumerate(lists):
                    if tokens:
                        pool[b, pos:pos + len(tokens)] = 1.0 / len(tokens)
                        flat.extend(tokens)
                        pos += len(tokens)
                nodes[spec.name] = ad.matmul(
                    tape.constant(pool), ad.gather_rows(table, np.asarray(flat, np.int64))
                )
        return nodes

    def embed_fields(self, instance: Instance) -> dict[str, np.ndarray]:
        """Per-field m-vectors for one instance, including the looked-up
        ad-ID row."""
        out = {self.ad_id_field: self.tables[self.ad_id_field].value[instance.ad_id].copy()}
        for spec in self.feature_fields:
            table = self.tables[spec.name].value
            value = self._field_value(spec, instance)
            if spec.kind == CATEGORICAL:
                if not 0 <= value < table.shape[0]:
                    raise IndexError(f"{spec.name}: index {value} out of vocab")
                out[spec.name] = table[value].copy()
            elif value:
                if max(value) >= table.shape[0] or min(value) < 0:
                    raise IndexError(f"{spec.name}: token out of vocab")
                out[spec.name] = table[np.asarray(value)].mean(axis=0)
            else:
                out[spec.name] = np.zeros(self.m)
        return out

    # -- forward -------------------------------------------------------------

    def _mlp(self, tape, x, names):
        B = x.shape[0]
        for name in names:
            W = tape.leaf(self.theta[f"{name}.W"])
            b = tape.leaf(self.theta[f"{name}.b"])
            x = ad.relu(ad.add(ad.matmul(x, W), ad.broadcast_row(b, B)))
        return x

    def _dense_out(self, tape, x, name):
        W = tape.leaf(self.theta[f"{name}.W"])
        b = tape.leaf(self.theta[f"{name}.b"])
        B = x.shape[0]
        return ad.reshape(ad.add(ad.matmul(x, W), ad.broadcast_row(b, B)), (B,))

    def _fm_terms(self, tape, embs):
        total = embs[0]
        sq_total = ad.square(embs[0])
        for e in embs[1:]:
            total = ad.add(total, e)
            sq_total = ad.add(sq_total, ad.square(e))
        return ad.scale(ad.sub(ad.square(total), sq_total), 0.5), total

    def _pairwise_inner(self, tape, embs):
        B = embs[0].shape[0]
        cols = []
        for i in range(len(embs)):
            for j in range(i + 1, len(embs)):
                cols.append(ad.reshape(ad.rowsum(ad.mul(embs[i], embs[j])), (B, 1)))
        return ad.concat(cols, axis=1)

    def _outer_features(self, tape, total):
        # vec(s s^T) per row, written as (S @ R) * (S @ T) with constant
        # 0/1 maps so the whole thing stays inside the primitive set
        m = self.m
        if self._outer_maps is None:
            rep = np.zeros((m, m * m))
            tile = np.zeros((m, m * m))
            for i in range(m):
                for j in range(m):
                    rep[i, i * m + j] = 1.0
                    tile[j, i * m + j] = 1.0
            self._outer_maps = (rep, tile)
        rep, tile = self._outer_maps
        return ad.mul(
            ad.matmul(total, tape.constant(rep)), ad.matmul(total, tape.constant(tile))
        )

    def _wide_logit(self, tape, instances):
        B = len(instances)
        parts = []
        for spec in self.feature_fields:
            w = tape.leaf(self.theta[f"wide.{spec.name}"])
            if spec.kind == CATEGORICAL:
                idx = np.fromiter(
                    (self._field_value(spec, i) for i in instances), np.int64, count=B
                )
                parts.append(ad.gather_rows(w, idx))
            else:
                lists = [sorted(set(self._field_value(spec, i))) for i in instances]
                total = sum(len(t) for t in lists)
                if total == 0:
                    continue
                bag = np.zeros((B, total))
                flat, pos = [], 0
                for b, tokens in enumerate(lists):
                    bag[b, pos:pos + len(tokens)] = 1.0  # counts capped at 1
                    flat.extend(tokens)
                    pos += len(tokens)
                parts.append(
                    ad.matmul(tape.constant(bag), ad.gather_rows(w, np.asarray(flat, np.int64)))
                )
        out = parts[0]
        for p in parts[1:]:
            out = ad.add(out, p)
        bias = ad.broadcast_scalar(tape.leaf(self.theta["wide_bias"]), (B,))
        return ad.add(ad.reshape(out, (B,)), bias)

    def batch_logit(self, tape, phi, field_nodes, instances=None):
        """Raw score for a batch. `phi` is (B, m); `field_nodes` maps every
        non-ID field to its (B, m) embedding node. WideDeep additionally
        needs the raw instances for its wide component."""
        embs = [phi] + [field_nodes[s.name] for s in self.feature_fields]
        B = phi.shape[0]
        cat = ad.concat(embs, axis=1)
        v = self.variant

        if v == "FM":
            fo = ad.reshape(ad.matmul(cat, tape.leaf(self.theta["fm_linear"])), (B,))
            so_vec, _ = self._fm_terms(tape, embs)
            bias = ad.broadcast_scalar(tape.leaf(self.theta["fm_bias"]), (B,))
            return ad.add(ad.add(fo, ad.rowsum(so_vec)), bias)

        if v == "DeepFM":
            fo = ad.matmul(cat, tape.leaf(self.theta["fm_linear"]))
            so_vec, _ = self._fm_terms(tape, embs)
            deep = self._mlp(tape, cat, [f"deep{i}" for i in range(len(self.hidden_dims))])
            bias = ad.broadcast_scalar(tape.leaf(self.theta["fm_bias"]), (B,))
            joint = ad.concat([fo, so_vec, deep], axis=1)
            return ad.add(self._dense_out(tape, joint, "out"), bias)

        if v == "WideDeep":
            if instances is None:
                raise ValueError("WideDeep needs the raw instances for its wide component")
            deep = self._mlp(tape, cat, [f"deep{i}" for i in range(len(self.hidden_dims))])
            return ad.add(self._dense_out(tape, deep, "out"), self._wide_logit(tape, instances))

        # the PNN family
        d1 = self._mlp(tape, cat, ["embed_dense"])
        prods = []
        if v in ("IPNN", "PNNstar"):
            prods.append(self._pairwise_inner(tape, embs))
        if v in ("OPNN", "PNNstar"):
            _, total = self._fm_terms(tape, embs)
            prods.append(self._outer_features(tape, total))
        x = ad.concat([d1] + prods, axis=1)
        x = self._mlp(tape, x, [f"hidden{i}" for i in range(len(self.hidden_dims) - 1)])
        return self._dense_out(tape, x, "out")

    def batch_predict(self, tape, phi, instances, field_nodes=None):
        if field_nodes is None:
            field_nodes = self.batch_field_nodes(tape, instances)
        return ad.sigmoid(self.batch_logit(tape, phi, field_nodes, instances))

    def predict(self, phi, u_vectors, v_vectors, instance=None) -> float:
        """Click probability for one example from already-embedded field
        vectors. The same entry point serves looked-up and generated phi."""
        tape = ad.Tape()
        vectors = dict(u_vectors)
        vectors.update(v_vectors)
        field_nodes = {
            s.name: ad.reshape(tape.constant(vectors[s.name]), (1, self.m))
            for s in self.feature_fields
        }
        phi_node = ad.reshape(tape.constant(ad.as_tensor(phi)), (1, self.m))
        instances = [instance] if instance is not None else None
        p = ad.sigmoid(self.batch_logit(tape, phi_node, field_nodes, instances))
        return float(p.value[0])


def build_model(variant, field_specs, m, hidden_dims=None, seed=0) -> BaseModel:
    if hidden_dims is None:
        hidden_dims = list(DEFAULT_HIDDEN)
    return BaseModel(variant, field_specs, m, hidden_dims, seed)


def batch_loss(tape, model, phi, instances, field_nodes=None):
    """Mean log-loss node for a batch with an explicit phi matrix."""
    p = model.batch_predict(tape, phi, instances, field_nodes)
    return ad.bce_loss(p, [i.y for i in instances])


def evaluate_probs(model, instances, phi_rows, batch_size=4096) -> np.ndarray:
    """Forward-only predictions; phi_rows[i] is the embedding row for
    instances[i]'s ad."""
    out = np.empty(len(instances))
    for lo in range(0, len(instances), batch_size):
        chunk = instances[lo:lo + batch_size]
        tape = ad.Tape()
        phi = tape.constant(phi_rows[lo:lo + len(chunk)])
        p = model.batch_predict(tape, phi, chunk)
        out[lo:lo + len(chunk)] = p.value
    return out


def pretrain(model, dataset, epochs=1, lr=DEFAULT_LR, batch_size=DEFAULT_BATCH, seed=0):
    """Joint mini-batch SGD over theta and all embedding tables on log-loss.

    Returns the per-epoch mean training loss. lr=0 evaluates without
    stepping (the trace is then constant across epochs).
    """
    if not dataset:
        raise ValueError("pretrain: dataset is empty")
    if lr < 0:
        raise ValueError("pretrain: lr must be non-negative")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    phi_table = model.tables[model.ad_id_field]
    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for lo in range(0, len(order), batch_size):
            batch = [dataset[i] for i in order[lo:lo + batch_size]]
            tape = ad.Tape()
            ad_ids = np.fromiter((b.ad_id for b in batch), np.int64, count=len(batch))
            phi = ad.gather_rows(tape.leaf(phi_table), ad_ids)
            loss = batch_loss(tape, model, phi, batch)
            if lr > 0:
                grads = ad.grad(loss, params)
                ad.sgd_step(params, grads, lr)
            total += float(loss.value) * len(batch)
        trace.append(total / len(order))
    return trace
