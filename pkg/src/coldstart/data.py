"""Dataset loading, vocabularies, old/new ad splitting and warm-up carving.

Index 0 is reserved in every field vocabulary; real values start at 1. Ads
whose features contain values unseen at pre-training time therefore fall
back to a row that stays at its (frozen) initial state.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

CATEGORICAL = "categorical"
TOKEN_LIST = "token_list"

GROUP_AD_ID = "ad_id"
GROUP_AD_FEATURE = "ad_feature"
GROUP_OTHER = "other_feature"


@dataclass
class FieldSpec:
    name: str
    kind: str  # categorical | token_list
    vocab_size: int
    group: str  # ad_id | ad_feature | other_feature


def validate_field_specs(specs: list[FieldSpec]) -> FieldSpec:
    """Check the one-ad-id invariant; returns the ad-id spec."""
    ad_ids = [s for s in specs if s.group == GROUP_AD_ID]
    if len(ad_ids) != 1:
        raise ValueError(f"expected exactly one ad_id field, found {len(ad_ids)}")
    for s in specs:
        if s.kind not in (CATEGORICAL, TOKEN_LIST):
            raise ValueError(f"field {s.name!r}: unknown kind {s.kind!r}")
        if s.vocab_size < 1:
            raise ValueError(f"field {s.name!r}: vocab_size must be positive")
    return ad_ids[0]


@dataclass(slots=True)
class Instance:
    """One labeled example. `u` and `v` may be shared between instances of
    the same ad / user, so treat them as read-only."""

    ad_id: int
    u: dict
    v: dict
    y: int


@dataclass
class SplitSpec:
    N: int        # old-ad threshold: old means N_i > N
    N_min: int    # new-ad minimum:  new means N_min < N_i <= N
    K: int        # warm-up minibatch size

    def __post_init__(self):
        if self.N_min <= 3 * self.K:
            raise ValueError(f"N_min ({self.N_min}) must exceed 3*K ({3 * self.K})")
        if self.N <= self.N_min:
            raise ValueError(f"N ({self.N}) must exceed N_min ({self.N_min})")


@dataclass
class AdGroup:
    ad_id: int
    instances: list[Instance] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.instances)

    @property
    def u(self) -> dict:
        return self.instances[0].u


@dataclass
class WarmupCarve:
    ad_id: int
    batch_a: list[Instance]
    batch_b: list[Instance]
    batch_c: list[Instance]
    holdout: list[Instance]
    order: np.ndarray  # permutation of group positions, for the manifest


# ---------------------------------------------------------------------------
# MovieLens-1M

_TITLE_YEAR = re.compile(r"^(?P<title>.*?)\s*\((?P<year>\d{4})\)\s*$")
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def _tokenize_title(raw_title: str) -> tuple[list[str], str]:
    m = _TITLE_YEAR.match(raw_title)
    if m:
        title, year = m.group("title"), m.group("year")
    else:
        title, year = raw_title, "unknown"
    tokens = [t for t in _TOKEN_SPLIT.split(title.lower()) if t]
    return tokens, year


class _Vocab:
    """Dense value -> index map with 0 reserved."""

    def __init__(self):
        self.index = {}

    def add(self, value) -> int:
        idx = self.index.get(value)
        if idx is None:
            idx = len(self.index) + 1
            self.index[value] = idx
        return idx

    @property
    def size(self) -> int:
        return len(self.index) + 1


def _split_line(line: str, n_fields: int, path, lineno: int) -> list[str]:
    parts = line.rstrip("\n").split("::")
    if len(parts) != n_fields:
        raise ValueError(f"{path}:{lineno}: expected {n_fields} '::' fields, got {len(parts)}")
    return parts


def load_movielens(ratings_path, movies_path, users_path):
    """Load the `::`-separated MovieLens-1M files.

    Movies are the ads; title tokens, release year and genres are the ad
    features; user id, gender, age and occupation are the other features.
    Ratings of 4 or 5 become positives.
    """
    movie_vocab = _Vocab()
    title_vocab = _Vocab()
    year_vocab = _Vocab()
    genre_vocab = _Vocab()
    user_vocab = _Vocab()
    gender_vocab = _Vocab()
    age_vocab = _Vocab()
    occ_vocab = _Vocab()

    movie_u: dict[str, dict] = {}
    movie_index: dict[str, int] = {}
    with open(movies_path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            movie_id, raw_title, raw_genres = _split_line(line, 3, movies_path, lineno)
            tokens, year = _tokenize_title(raw_title)
            u = {
                "title": [title_vocab.add(t) for t in tokens],
                "year": year_vocab.add(year),
                "genres": [genre_vocab.add(g) for g in raw_genres.strip().split("|") if g],
            }
            movie_index[movie_id] = movie_vocab.add(movie_id)
            movie_u[movie_id] = u

    user_v: dict[str, dict] = {}
    with open(users_path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            user_id, gender, age, occupation, _zip = _split_line(line, 5, users_path, lineno)
            user_v[user_id] = {
                "user_id": user_vocab.add(user_id),
                "gender": gender_vocab.add(gender),
                "age": age_vocab.add(age),
                "occupation": occ_vocab.add(occupation),
            }

    instances: list[Instance] = []
    with open(ratings_path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            user_id, movie_id, rating, _ts = _split_line(line, 4, ratings_path, lineno)
            if movie_id not in movie_u:
                raise ValueError(f"{ratings_path}:{lineno}: unknown movie id {movie_id}")
            if user_id not in user_v:
                raise ValueError(f"{ratings_path}:{lineno}: unknown user id {user_id}")
            try:
                y = 1 if int(rating) >= 4 else 0
            except ValueError as exc:
                raise ValueError(f"{ratings_path}:{lineno}: bad rating {rating!r}") from exc
            instances.append(
                Instance(ad_id=movie_index[movie_id], u=movie_u[movie_id], v=user_v[user_id], y=y)
            )

    specs = [
        FieldSpec("movie_id", CATEGORICAL, movie_vocab.size, GROUP_AD_ID),
        FieldSpec("title", TOKEN_LIST, title_vocab.size, GROUP_AD_FEATURE),
        FieldSpec("year", CATEGORICAL, year_vocab.size, GROUP_AD_FEATURE),
        FieldSpec("genres", TOKEN_LIST, genre_vocab.size, GROUP_AD_FEATURE),
        FieldSpec("user_id", CATEGORICAL, user_vocab.size, GROUP_OTHER),
        FieldSpec("gender", CATEGORICAL, gender_vocab.size, GROUP_OTHER),
        FieldSpec("age", CATEGORICAL, age_vocab.size, GROUP_OTHER),
        FieldSpec("occupation", CATEGORICAL, occ_vocab.size, GROUP_OTHER),
    ]
    return specs, instances


# ---------------------------------------------------------------------------
# generic CSV + JSON schema sidecar (Tencent/KDD-shaped data)


def load_csv_dataset(csv_path, schema_path):
    """CSV with a header row plus a JSON sidecar describing each field.

    Sidecar format:
        {"label": "<column>",
         "fields": [{"name": ..., "kind": ..., "group": ...}, ...]}

    Token lists are space-separated integers within a cell. Values are
    re-indexed densely per field with index 0 reserved.
    """
    import csv

    with open(schema_path, encoding="utf-8") as fh:
        schema = json.load(fh)
    label_col = schema["label"]
    fields = schema["fields"]
    vocabs = {f["name"]: _Vocab() for f in fields}
    ad_field = next(f for f in fields if f["group"] == GROUP_AD_ID)

    instances = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, 2):
            try:
                u, v, ad_idx = {}, {}, None
                for f in fields:
                    name, kind, group = f["name"], f["kind"], f["group"]
                    cell = row[name]
                    if kind == TOKEN_LIST:
                        value = [vocabs[name].add(tok) for tok in cell.split()]
                    else:
                        value = vocabs[name].add(cell)
                    if group == GROUP_AD_ID:
                        ad_idx = value
                    elif group == GROUP_AD_FEATURE:
                        u[name] = value
                    else:
                        v[name] = value
                y = int(row[label_col])
                if y not in (0, 1):
                    raise ValueError(f"label must be 0/1, got {y}")
                instances.append(Instance(ad_id=ad_idx, u=u, v=v, y=y))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{csv_path}:{lineno}: {exc}") from exc

    specs = [
        FieldSpec(f["name"], f["kind"], vocabs[f["name"]].size, f["group"]) for f in fields
    ]
    validate_field_specs(specs)
    # ad features are shared per ad; unify dicts so downstream code can rely on it
    shared_u: dict[int, dict] = {}
    for inst in instances:
        known = shared_u.setdefault(inst.ad_id, inst.u)
        if known is not inst.u:
            if known != inst.u:
                raise ValueError(
                    f"ad {inst.ad_id} (field {ad_field['name']}) has inconsistent ad features"
                )
            inst.u = known
    return specs, instances


# ---------------------------------------------------------------------------
# splitting and carving


def group_by_ad(instances) -> list[AdGroup]:
    """Group instances by ad id, ascending id, preserving within-ad order."""
    groups: dict[int, AdGroup] = {}
    for inst in instances:
        grp = groups.get(inst.ad_id)
        if grp is None:
            grp = groups[inst.ad_id] = AdGroup(inst.ad_id)
        grp.instances.append(inst)
    return [groups[k] for k in sorted(groups)]


def split_old_new(instances, spec: SplitSpec):
    """Partition ads into old (N_i > N), new (N_min < N_i <= N) and
    discarded (everything else). Every instance lands in exactly one bucket."""
    old, new, discarded = [], [], []
    for grp in group_by_ad(instances):
        if grp.size > spec.N:
            old.append(grp)
        elif grp.size > spec.N_min:
            new.append(grp)
        else:
            discarded.append(grp)
    return old, new, discarded


def carve_warmup(new_group: AdGroup, K: int, seed: int) -> WarmupCarve:
    """Deterministically shuffle one new ad's instances and cut the first
    3K into warm-up batches a/b/c; the remainder is the hold-out."""
    n = new_group.size
    if n <= 3 * K:
        raise ValueError(f"ad {new_group.ad_id}: {n} instances cannot cover 3*K={3 * K}")
    rng = np.random.default_rng([seed, new_group.ad_id])
    order = rng.permutation(n)
    inst = new_group.instances
    picks = [inst[i] for i in order]
    return WarmupCarve(
        ad_id=new_group.ad_id,
        batch_a=picks[:K],
        batch_b=picks[K:2 * K],
        batch_c=picks[2 * K:3 * K],
        holdout=picks[3 * K:],
        order=order,
    )


def sample_meta_pair(group: AdGroup, K: int, rng: np.random.Generator):
    """Draw two disjoint K-sample minibatches from one old ad, or None as a
    skip signal when the ad has fewer than 2K samples."""
    if group.size < 2 * K:
        return None
    idx = rng.choice(group.size, size=2 * K, replace=False)
    inst = group.instances
    return [inst[i] for i in idx[:K]], [inst[i] for i in idx[K:]]


def remap_unseen_u(new_groups, old_groups, field_specs):
    """Map ad-feature values that never occur in the old-ad data to the
    reserved index 0. The embedding tables are frozen after pre-training,
    so rows for values first seen on new ads would just be initial noise.

    Returns new AdGroups; the inputs are left untouched.
    """
    u_specs = [s for s in field_specs if s.group == GROUP_AD_FEATURE]
    seen: dict[str, set] = {s.name: set() for s in u_specs}
    for grp in old_groups:
        u = grp.u
        for s in u_specs:
            if s.kind == TOKEN_LIST:
                seen[s.name].update(u[s.name])
            else:
                seen[s.name].add(u[s.name])

    remapped = []
    for grp in new_groups:
        u = grp.u
        new_u = {}
        for s in u_specs:
            if s.kind == TOKEN_LIST:
                new_u[s.name] = [t if t in seen[s.name] else 0 for t in u[s.name]]
            else:
                new_u[s.name] = u[s.name] if u[s.name] in seen[s.name] else 0
        out = AdGroup(grp.ad_id)
        out.instances = [
            Instance(ad_id=i.ad_id, u=new_u, v=i.v, y=i.y) for i in grp.instances
        ]
        remapped.append(out)
    return remapped


# ---------------------------------------------------------------------------
# synthetic oracle dataset


def synth_generate(
    n_ads: int,
    samples_per_ad,
    n_ad_features: int,
    n_user_features: int,
    seed: int,
    *,
    ad_vocab: int = 12,
    user_vocab: int = 12,
    beta_scale: float = 1.2,
    gamma_scale: float = 0.5,
    tau_scale: float = 0.3,
    tokens_per_ad: int = 0,
):
    """Synthetic CTR data with a known generating process.

    True logit per sample: beta . onehot(u) plus gamma . onehot(v) plus a
    per-ad offset tau. The returned parameter dict makes oracle checks
    possible. With tokens_per_ad > 0 the ad features become one token-list
    field of that many tokens (onehot(u) is then the multi-hot token
    vector), which mimics title/genre-style inputs: the pooled embedding
    dilutes each token's gradient, so per-ad CTR levels are slow to reach
    through the feature pathway and concentrate in the ID embedding.

    `samples_per_ad` may be an int (same for all ads), a (lo, hi) pair for
    uniform draws, or a sequence with one count per ad.
    """
    if min(n_ads, n_ad_features, n_user_features) < 1:
        raise ValueError("all counts must be positive")
    rng = np.random.default_rng(seed)

    if isinstance(samples_per_ad, int):
        counts = np.full(n_ads, samples_per_ad)
    elif len(samples_per_ad) == 2 and not hasattr(samples_per_ad, "shape"):
        lo, hi = samples_per_ad
        counts = rng.integers(lo, hi + 1, size=n_ads)
    else:
        counts = np.asarray(samples_per_ad, dtype=np.int64)
        if counts.shape != (n_ads,):
            raise ValueError("samples_per_ad sequence must have one entry per ad")
    if counts.min() < 1:
        raise ValueError("samples_per_ad must be positive")

    beta = rng.normal(0.0, beta_scale, size=(n_ad_features, ad_vocab + 1))
    gamma = rng.normal(0.0, gamma_scale, size=(n_user_features, user_vocab + 1))
    tau = rng.normal(0.0, tau_scale, size=n_ads + 1)
    beta[:, 0] = 0.0
    gamma[:, 0] = 0.0
    tau[0] = 0.0

    specs = [FieldSpec("ad_id", CATEGORICAL, n_ads + 1, GROUP_AD_ID)]
    if tokens_per_ad:
        token_lists = np.stack([
            rng.choice(np.arange(1, ad_vocab + 1), size=tokens_per_ad, replace=False)
            for _ in range(n_ads + 1)
        ])
        ad_features = token_lists
        ad_effect = beta[0, token_lists].sum(axis=1)
        specs.append(FieldSpec("ad_tokens", TOKEN_LIST, ad_vocab + 1, GROUP_AD_FEATURE))
        u_for = lambda a: {"ad_tokens": [int(t) for t in token_lists[a]]}
    else:
        ad_features = rng.integers(1, ad_vocab + 1, size=(n_ads + 1, n_ad_features))
        ad_effect = beta[np.arange(n_ad_features), ad_features].sum(axis=1)
        specs += [
            FieldSpec(f"ad_f{j}", CATEGORICAL, ad_vocab + 1, GROUP_AD_FEATURE)
            for j in range(n_ad_features)
        ]
        u_for = lambda a: {f"ad_f{j}": int(ad_features[a, j]) for j in range(n_ad_features)}
    specs += [
        FieldSpec(f"user_f{j}", CATEGORICAL, user_vocab + 1, GROUP_OTHER)
        for j in range(n_user_features)
    ]

    instances = []
    for a in range(1, n_ads + 1):
        u = u_for(a)
        base = tau[a] + ad_effect[a]
        n_i = int(counts[a - 1])
        user_vals = rng.integers(1, user_vocab + 1, size=(n_i, n_user_features))
        logits = base + gamma[np.arange(n_user_features), user_vals].sum(axis=1)
        ys = rng.random(n_i) < 1.0 / (1.0 + np.exp(-logits))
        for s in range(n_i):
            v = {f"user_f{j}": int(user_vals[s, j]) for j in range(n_user_features)}
            instances.append(Instance(ad_id=a, u=u, v=v, y=int(ys[s])))

    params = {"beta": beta, "gamma": gamma, "tau": tau, "ad_features": ad_features}
    return specs, instances, params


# ---------------------------------------------------------------------------
# manifests: make splits and carves exactly re-runnable


def split_manifest(spec: SplitSpec, old, new, discarded, carves=None) -> dict:
    manifest = {
        "split": {"N": spec.N, "N_min": spec.N_min, "K": spec.K},
        "old_ids": [g.ad_id for g in old],
        "new_ids": [g.ad_id for g in new],
        "discarded_ids": [g.ad_id for g in discarded],
    }
    if carves is not None:
        manifest["carves"] = {
            str(c.ad_id): [int(i) for i in c.order] for c in carves
        }
    return manifest


def write_split_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def carve_from_manifest(group: AdGroup, K: int, order) -> WarmupCarve:
    picks = [group.instances[i] for i in order]
    return WarmupCarve(
        ad_id=group.ad_id,
        batch_a=picks[:K],
        batch_b=picks[K:2 * K],
        batch_c=picks[2 * K:3 * K],
        holdout=picks[3 * K:],
        order=np.asarray(order),
    )
