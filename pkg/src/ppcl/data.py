"""Dataset schema, preprocessing, temporal split, synthetic generation.

Posts carry pre-extracted image/text feature vectors, a hierarchical category
path, a publisher id and view/day counts from which the popularity label is
computed. Users carry 9 categorical and 11 numerical profile fields.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .tensor import stream

CATEGORICAL_FIELDS = (
    "user_id", "ispro", "canbuy_pro", "ispublic", "timezone_id",
    "timezone_offset", "post_hour", "post_day", "post_month",
)
NUMERICAL_FIELDS = (
    "totalViews", "totalTags", "totalGeotagged", "totalFaves",
    "totalInGroup", "photoCount", "followerCount", "followingCount",
    "geo_acc", "pfirst_year", "pfirst_taken_year",
)

FEAT_MAGIC = b"PPCLFEAT"
UNK_ID = 0


@dataclass
class PostRecord:
    post_id: str
    user_id: str
    timestamp: int
    image_feat: np.ndarray
    text_feat: np.ndarray
    category_path: tuple  # ids per level, coarse to fine
    views: int
    days: int


@dataclass
class UserRecord:
    user_id: str
    categorical: dict  # field -> raw category value
    numerical: dict    # field -> float

    def __post_init__(self):
        missing = set(CATEGORICAL_FIELDS) - set(self.categorical)
        if missing:
            raise DataError(f"user {self.user_id} missing categorical fields {sorted(missing)}")
        missing = set(NUMERICAL_FIELDS) - set(self.numerical)
        if missing:
            raise DataError(f"user {self.user_id} missing numerical fields {sorted(missing)}")


def popularity_label(r: int, d: int, smoothing: bool = True) -> float:
    """log2(views/days) + 1, optionally with +1 view smoothing for r=0."""
    if d <= 0:
        raise DataError(f"days must be positive, got {d}")
    if r < 0:
        raise DataError(f"views must be nonnegative, got {r}")
    if smoothing:
        return float(np.log2((r + 1) / d) + 1)
    if r == 0:
        raise DataError("r=0 undefined without smoothing")
    return float(np.log2(r / d) + 1)


def augment_numerical(d: np.ndarray) -> np.ndarray:
    """[D, D^2, sqrt(D)]; negative entries clamped to zero first."""
    d = np.asarray(d, dtype=np.float64)
    if (d < 0).any():
        warnings.warn("negative numerical fields clamped to 0")
        d = np.maximum(d, 0.0)
    return np.concatenate([d, d ** 2, np.sqrt(d)], axis=-1)


def fit_minmax(rows: np.ndarray):
    """Per-dimension (min, max) over training rows."""
    rows = np.asarray(rows, dtype=np.float64)
    return rows.min(axis=0), rows.max(axis=0)


def minmax_normalize(x: np.ndarray, stats) -> np.ndarray:
    """(x - min) / (max - min), constant dims -> 0, clamped into [0, 1]."""
    lo, hi = stats
    span = hi - lo
    out = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def temporal_split(posts, ratios=(8, 1, 1)):
    """Sort by (timestamp, post_id) and cut contiguously by count."""
    if len(posts) < 10:
        raise DataError(f"need at least 10 posts to split, got {len(posts)}")
    order = sorted(posts, key=lambda p: (p.timestamp, p.post_id))
    n = len(order)
    total = sum(ratios)
    n_train = int(n * ratios[0] / total)
    n_val = int(n * ratios[1] / total)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


@dataclass
class Arrays:
    """A split materialized as dense numpy arrays, model-ready."""
    image: np.ndarray       # n x d_r
    text: np.ndarray        # n x d_r
    cat_levels: np.ndarray  # n x L
    user_cat: np.ndarray    # n x M (vocab ids)
    user_dense: np.ndarray  # n x 3N (augmented + normalized)
    labels: np.ndarray      # n
    user_index: np.ndarray  # n (dense per-user int for UID labels)
    follower_log: np.ndarray  # n, log2(1 + followerCount)
    post_ids: list

    def __len__(self):
        return len(self.labels)


class Dataset:
    """Posts + users plus vocabularies and normalization fitted on train."""

    def __init__(self, posts, users, level_sizes=None, smoothing=True):
        self.posts = list(posts)
        self.users = dict(users)
        for p in self.posts:
            if p.user_id not in self.users:
                raise DataError(f"post {p.post_id} references unknown user {p.user_id}")
        if level_sizes is None:
            L = len(self.posts[0].category_path) if self.posts else 0
            level_sizes = [max(p.category_path[l] for p in self.posts) + 1
                           for l in range(L)]
        self.level_sizes = list(level_sizes)
        self.smoothing = smoothing
        self.cat_vocabs = None   # field -> {value: id}, UNK_ID reserved
        self.norm_stats = None
        self.user_ids = None     # train-ordered user id list
        self._user_dense = {}
        self._user_cats = {}

    # -- preprocessing ------------------------------------------------------

    def prepare(self, train_posts):
        """Fit categorical vocabularies and min-max stats on the train split."""
        train_users = []
        seen = set()
        for p in train_posts:
            if p.user_id not in seen:
                seen.add(p.user_id)
                train_users.append(p.user_id)
        self.user_ids = train_users
        self.cat_vocabs = {}
        for f in CATEGORICAL_FIELDS:
            vocab = {}
            for uid in train_users:
                v = self.users[uid].categorical[f]
                if v not in vocab:
                    vocab[v] = len(vocab) + 1  # 0 reserved for UNK
            self.cat_vocabs[f] = vocab
        rows = np.stack([self._augmented(self.users[uid]) for uid in train_users])
        self.norm_stats = fit_minmax(rows)
        self._user_dense.clear()
        self._user_cats.clear()

    @staticmethod
    def _augmented(user: UserRecord) -> np.ndarray:
        raw = np.array([user.numerical[f] for f in NUMERICAL_FIELDS], dtype=np.float64)
        return augment_numerical(raw)

    def field_vocab_sizes(self):
        return {f: len(self.cat_vocabs[f]) + 1 for f in CATEGORICAL_FIELDS}

    def user_dense_vec(self, uid: str) -> np.ndarray:
        if uid not in self._user_dense:
            self._user_dense[uid] = minmax_normalize(
                self._augmented(self.users[uid]), self.norm_stats)
        return self._user_dense[uid]

    def user_cat_ids(self, uid: str) -> np.ndarray:
        if uid not in self._user_cats:
            u = self.users[uid]
            self._user_cats[uid] = np.array(
                [self.cat_vocabs[f].get(u.categorical[f], UNK_ID)
                 for f in CATEGORICAL_FIELDS], dtype=np.intp)
        return self._user_cats[uid]

    def materialize(self, posts) -> Arrays:
        if self.cat_vocabs is None:
            raise ConfigError("call prepare(train_posts) before materialize()")
        uindex = {uid: i for i, uid in enumerate(self.user_ids)}
        n = len(posts)
        image = np.stack([p.image_feat for p in posts])
        text = np.stack([p.text_feat for p in posts])
        cat = np.array([p.category_path for p in posts], dtype=np.intp)
        ucat = np.stack([self.user_cat_ids(p.user_id) for p in posts])
        udense = np.stack([self.user_dense_vec(p.user_id) for p in posts])
        labels = np.array([popularity_label(p.views, p.days, self.smoothing)
                           for p in posts])
        uidx = np.array([uindex.get(p.user_id, -1) for p in posts], dtype=np.intp)
        flog = np.array([np.log2(1 + max(0.0, self.users[p.user_id].numerical["followerCount"]))
                         for p in posts])
        return Arrays(image, text, cat, ucat, udense, labels, uidx, flog,
                      [p.post_id for p in posts])

    def split(self, ratios=(8, 1, 1)):
        tr, va, te = temporal_split(self.posts, ratios)
        self.prepare(tr)
        return tr, va, te


# -- synthetic data ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_posts: int = 2000
    n_users: int = 200
    branching: tuple = (5, 3, 3)   # level sizes are the cumulative products
    sigma: float = 0.5             # label noise
    cat_effect: float = 0.8        # scale of per-leaf popularity offsets
    user_effect: float = 1.0       # scale of per-user latent offsets
    beta: float = 0.3              # slope on log2(1 + followerCount)
    base: float = 6.4              # global mean label
    d_r: int = 64
    proto_spread: float = 0.6      # feature jitter around the leaf prototype
    seed: int = 0

    def __post_init__(self):
        if self.n_posts <= 0 or self.n_users <= 0:
            raise ConfigError("counts must be positive")
        if any(b <= 0 for b in self.branching):
            raise ConfigError("branching factors must be positive")
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")

    @property
    def level_sizes(self):
        return list(np.cumprod(self.branching))


def _leaf_path(leaf: int, branching) -> tuple:
    """Ancestor ids at every level for a leaf index."""
    path = []
    sizes = list(np.cumprod(branching))
    for l in range(len(branching)):
        stride = int(np.prod(branching[l + 1:]))
        path.append(leaf // stride)
    assert path[-1] == leaf and all(p < s for p, s in zip(path, sizes))
    return tuple(path)


def _solve_views_days(y: float, rng) -> tuple:
    """Back-solve (views, days) so the smoothed label reproduces y closely."""
    d = int(rng.integers(64, 366))
    # keep the rounded quantity large enough that rounding moves the
    # label by less than 0.01
    min_d = int(np.ceil(128.0 * 2.0 ** (1.0 - y)))
    d = max(d, min_d)
    r = max(0, int(round(d * 2.0 ** (y - 1.0))) - 1)
    return r, d


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Build a dataset with planted category, user and influence factors."""
    rng = stream(spec.seed, "synth")
    n_leaves = spec.level_sizes[-1]

    protos = rng.normal(size=(n_leaves, spec.d_r))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    # Category effects are hierarchical: every tree node contributes a draw,
    # coarse levels carrying most of the variance, and a leaf's effect is the
    # sum down its path. Sibling leaves therefore share most of their effect,
    # while the feature prototypes below stay independent per leaf, so the
    # sibling structure is observable only through the category labels.
    levels = len(spec.branching)
    var_share = 2.0 ** np.arange(levels)[::-1]
    scales = spec.cat_effect * np.sqrt(var_share / var_share.sum())
    cat_eff = np.zeros(n_leaves)
    for l, n_nodes in enumerate(spec.level_sizes):
        # signed effects rather than gaussian: every category either boosts
        # or suppresses popularity, so category knowledge moves the typical
        # error, not just the tail
        node_eff = rng.choice([-1.0, 1.0], size=n_nodes) * scales[l]
        stride = int(np.prod(spec.branching[l + 1:]))
        for leaf in range(n_leaves):
            cat_eff[leaf] += node_eff[leaf // stride]
    user_eff = rng.normal(0.0, 1.0, size=spec.n_users) * spec.user_effect
    follower = np.maximum(0, np.round(2.0 ** rng.normal(8.0, 3.0, size=spec.n_users))).astype(np.int64)

    users = {}
    for u in range(spec.n_users):
        uid = f"u{u:06d}"
        categorical = {
            "user_id": uid,
            "ispro": int(rng.integers(0, 2)),
            "canbuy_pro": int(rng.integers(0, 2)),
            "ispublic": int(rng.integers(0, 2)),
            "timezone_id": int(rng.integers(0, 24)),
            "timezone_offset": int(rng.integers(-12, 13)),
            "post_hour": int(rng.integers(0, 24)),
            "post_day": int(rng.integers(0, 7)),
            "post_month": int(rng.integers(0, 12)),
        }
        numerical = {
            "totalViews": float(np.round(2.0 ** rng.normal(12.0, 3.0))),
            "totalTags": float(np.round(2.0 ** rng.normal(8.0, 2.0))),
            "totalGeotagged": float(np.round(2.0 ** rng.normal(5.0, 2.0))),
            "totalFaves": float(np.round(2.0 ** rng.normal(7.0, 2.5))),
            "totalInGroup": float(np.round(2.0 ** rng.normal(6.0, 2.0))),
            "photoCount": float(np.round(2.0 ** rng.normal(9.0, 2.0))),
            "followerCount": float(follower[u]),
            "followingCount": float(np.round(2.0 ** rng.normal(7.0, 2.5))),
            "geo_acc": float(rng.integers(0, 17)),
            "pfirst_year": float(rng.integers(2004, 2016)),
            "pfirst_taken_year": float(rng.integers(2000, 2016)),
        }
        users[uid] = UserRecord(uid, categorical, numerical)

    base_ts = 1_420_070_400  # 2015-01-01
    posts = []
    leaf_of = rng.integers(0, n_leaves, size=spec.n_posts)
    user_of = rng.integers(0, spec.n_users, size=spec.n_posts)
    for i in range(spec.n_posts):
        leaf = int(leaf_of[i])
        u = int(user_of[i])
        y = (spec.base + cat_eff[leaf] + user_eff[u]
             + spec.beta * np.log2(1 + follower[u])
             + rng.normal(0.0, spec.sigma))
        r, d = _solve_views_days(y, rng)
        feats = []
        for _ in range(2):
            f = protos[leaf] + spec.proto_spread * rng.normal(size=spec.d_r) / np.sqrt(spec.d_r)
            feats.append(f / np.linalg.norm(f))
        posts.append(PostRecord(
            post_id=f"p{i:08d}",
            user_id=f"u{u:06d}",
            timestamp=base_ts + i * 600,
            image_feat=feats[0],
            text_feat=feats[1],
            category_path=_leaf_path(leaf, spec.branching),
            views=r,
            days=d,
        ))
    return Dataset(posts, users, level_sizes=spec.level_sizes, smoothing=True)


# -- factor statistics ------------------------------------------------------

def _quartiles(values):
    v = np.asarray(values, dtype=np.float64)
    return [float(v.min()), float(np.percentile(v, 25)), float(np.median(v)),
            float(np.percentile(v, 75)), float(v.max()), int(v.size)]


def factor_stats(dataset: Dataset, n_groups: int = 20, seed: int = 0) -> dict:
    """Plot-ready popularity statistics by category, influence and user."""
    if not dataset.posts:
        raise DataError("empty dataset")
    rng = stream(seed, "factor_stats")
    labels = {p.post_id: popularity_label(p.views, p.days, dataset.smoothing)
              for p in dataset.posts}

    by_cat, by_user = {}, {}
    for p in dataset.posts:
        by_cat.setdefault(p.category_path[-1], []).append(labels[p.post_id])
        by_user.setdefault(p.user_id, []).append(labels[p.post_id])

    cats = sorted(by_cat)
    cat_pick = sorted(rng.choice(len(cats), size=min(n_groups, len(cats)),
                                 replace=False).tolist())
    cat_rows = [[cats[i]] + _quartiles(by_cat[cats[i]]) for i in cat_pick]

    uids = sorted(by_user)
    user_pick = sorted(rng.choice(len(uids), size=min(n_groups, len(uids)),
                                  replace=False).tolist())
    user_rows = [[uids[i]] + _quartiles(by_user[uids[i]]) for i in user_pick]

    influence_rows = [
        [float(np.log2(1 + max(0.0, dataset.users[p.user_id].numerical["followerCount"]))),
         labels[p.post_id]]
        for p in dataset.posts]

    return {"category": cat_rows, "user": user_rows, "influence": influence_rows}


STATS_HEADERS = {
    "category": ["category_id", "min", "q1", "median", "q3", "max", "count"],
    "user": ["user_id", "min", "q1", "median", "q3", "max", "count"],
    "influence": ["log2_followers", "label"],
}


def write_table(path: str, header, rows):
    """Tab-separated table with a one-line header."""
    with open(path, "w") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


# -- file formats -----------------------------------------------------------

def write_feature_matrix(path: str, mat: np.ndarray):
    mat = np.asarray(mat, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<III", 1, mat.shape[0], mat.shape[1]))
        f.write(mat.astype("<f4").tobytes())


def read_feature_matrix(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FEAT_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        version, rows, dim = struct.unpack("<III", f.read(12))
        if version != 1:
            raise DataError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(rows * dim * 4), dtype="<f4")
    return data.reshape(rows, dim).astype(np.float64)


def write_posts(posts, path: str, inline_features: bool = False):
    """JSON-lines posts; feature vectors inline or in a sidecar matrix."""
    feat_file = None
    if not inline_features:
        feat_file = os.path.splitext(os.path.basename(path))[0] + ".feat.bin"
        mat = np.empty((2 * len(posts), len(posts[0].image_feat)), dtype=np.float64)
        for i, p in enumerate(posts):
            mat[2 * i] = p.image_feat
            mat[2 * i + 1] = p.text_feat
        write_feature_matrix(os.path.join(os.path.dirname(path) or ".", feat_file), mat)
    with open(path, "w") as f:
        for i, p in enumerate(posts):
            rec = {
                "post_id": p.post_id,
                "user_id": p.user_id,
                "timestamp": p.timestamp,
                "category_path": list(int(c) for c in p.category_path),
                "views": int(p.views),
                "days": int(p.days),
            }
            if inline_features:
                rec["image_feat"] = [float(x) for x in p.image_feat]
                rec["text_feat"] = [float(x) for x in p.text_feat]
            else:
                rec["image_ref"] = {"file": feat_file, "row": 2 * i}
                rec["text_ref"] = {"file": feat_file, "row": 2 * i + 1}
            f.write(json.dumps(rec) + "\n")


def read_posts(path: str):
    base = os.path.dirname(path) or "."
    matrices = {}

    def resolve(ref):
        fname = ref["file"]
        if fname not in matrices:
            matrices[fname] = read_feature_matrix(os.path.join(base, fname))
        return matrices[fname][ref["row"]]

    posts = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            if "image_feat" in rec:
                img = np.asarray(rec["image_feat"], dtype=np.float64)
                txt = np.asarray(rec["text_feat"], dtype=np.float64)
            else:
                img = resolve(rec["image_ref"])
                txt = resolve(rec["text_ref"])
            posts.append(PostRecord(
                post_id=rec["post_id"],
                user_id=rec["user_id"],
                timestamp=int(rec["timestamp"]),
                image_feat=img,
                text_feat=txt,
                category_path=tuple(rec["category_path"]),
                views=int(rec["views"]),
                days=int(rec["days"]),
            ))
    return posts


def write_users(users, path: str):
    with open(path, "w") as f:
        for uid in sorted(users):
            u = users[uid]
            f.write(json.dumps({"user_id": u.user_id,
                                "categorical": u.categorical,
                                "numerical": u.numerical}) + "\n")


def read_users(path: str):
    users = {}
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            users[rec["user_id"]] = UserRecord(
                rec["user_id"], rec["categorical"], rec["numerical"])
    return users


def save_dataset(dataset: Dataset, out_dir: str, inline_features: bool = False):
    os.makedirs(out_dir, exist_ok=True)
    write_posts(dataset.posts, os.path.join(out_dir, "posts.jsonl"),
                inline_features=inline_features)
    write_users(dataset.users, os.path.join(out_dir, "users.jsonl"))
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump({"level_sizes": [int(s) for s in dataset.level_sizes],
                   "smoothing": dataset.smoothing}, f)


def load_dataset(data_dir: str) -> Dataset:
    posts = read_posts(os.path.join(data_dir, "posts.jsonl"))
    users = read_users(os.path.join(data_dir, "users.jsonl"))
    meta_path = os.path.join(data_dir, "meta.json")
    level_sizes, smoothing = None, True
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        level_sizes = meta.get("level_sizes")
        smoothing = meta.get("smoothing", True)
    return Dataset(posts, users, level_sizes=level_sizes, smoothing=smoothing)
