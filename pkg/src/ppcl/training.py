"""Joint training loop, metrics, ablation harness and checkpoints."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import rankdata

from . import contrastive as cl
from .data import Dataset
from .errors import ConfigError, DataError, TrainError
from .model import ModelConfig, PPCLModel, make_views
from .sampler import (BatchReport, HierarchyIndex, sample_hierarchical_batch,
                      sample_random_batch)
from .tensor import Tensor, stream

CKPT_MAGIC = b"PPCLCKPT"


@dataclass
class TrainConfig:
    lam: float = 0.9
    alphas: tuple = (3.0, 1.0, 0.1)
    tau: float = 0.1
    k_clusters: int = 40
    batch_size: int = 512
    lr: float = 0.002
    weight_decay: float = 1e-4
    dropout: float = 0.1
    d_b: int = 64
    l_cross: int = 4
    d_M: int = 32
    d_h: int = 512
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    # ablation switches
    use_crd: bool = True
    use_uisd: bool = True
    use_uid: bool = True
    random_sampling: bool = False
    augmentation: bool = True
    rnc_mode: bool = False
    rnc_tau: float = 2.0
    cluster_transform: str = "log2"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0,1], got {self.lam}")
        if any(a < 0 for a in self.alphas):
            raise ConfigError("alpha weights must be nonnegative")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    @property
    def contrastive_enabled(self):
        return self.rnc_mode or self.use_crd or self.use_uisd or self.use_uid


@dataclass
class LossReport:
    l_reg: float
    l_crd: float = 0.0
    l_uisd: float = 0.0
    l_uid: float = 0.0
    l_rnc: float = 0.0
    total: float = 0.0


@dataclass
class EvalReport:
    mae: float
    mse: float
    src: float
    predictions: np.ndarray


def regression_loss(pred: Tensor, labels: np.ndarray) -> Tensor:
    """Mean squared error (batch-size independent)."""
    if pred.data.size == 0:
        raise DataError("regression loss on empty batch")
    diff = pred - Tensor(np.asarray(labels, dtype=np.float64))
    return (diff * diff).mean()


def joint_loss(l_reg, l_crd, l_uisd, l_uid, lam, alphas) -> float:
    for name, v in [("reg", l_reg), ("crd", l_crd), ("uisd", l_uisd), ("uid", l_uid)]:
        if not math.isfinite(v):
            raise TrainError(f"non-finite loss component {name}: {v}")
    a1, a2, a3 = alphas
    return lam * l_reg + (1 - lam) * (a1 * l_crd + a2 * l_uisd + a3 * l_uid)


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of average ranks (tied values get mean rank)."""
    ra, rb = rankdata(a), rankdata(b)
    sa, sb = ra.std(), rb.std()
    if sa == 0 or sb == 0:
        return 0.0
    return float(np.corrcoef(ra, rb)[0, 1])


def evaluate(model: PPCLModel, arrays, chunk: int = 2048) -> EvalReport:
    if len(arrays) == 0:
        raise DataError("evaluate on empty split")
    preds = np.concatenate([
        model.forward_eval(arrays, np.arange(i, min(i + chunk, len(arrays))))
        for i in range(0, len(arrays), chunk)])
    err = preds - arrays.labels
    return EvalReport(mae=float(np.abs(err).mean()),
                      mse=float((err ** 2).mean()),
                      src=spearman(preds, arrays.labels),
                      predictions=preds)


@dataclass
class TrainResult:
    model: PPCLModel
    history: list                 # per-epoch dicts
    best_epoch: int
    best_val: float
    clustering: object
    arrays: dict                  # split name -> Arrays
    cluster_ids: dict             # split name -> per-post cluster ids
    config: TrainConfig


def _cluster_ids_for(posts, dataset, clustering):
    out = np.empty(len(posts), dtype=np.intp)
    for i, p in enumerate(posts):
        uid = p.user_id
        if uid in clustering.assignment:
            out[i] = clustering.assignment[uid]
        else:
            out[i] = clustering.assign_value(
                dataset.users[uid].numerical["followerCount"])
    return out


def _step_losses(model, arrays, idx, cluster_ids, cfg: TrainConfig, step: int):
    """Forward passes and all enabled losses for one batch. Returns
    (total Tensor, LossReport)."""
    if not cfg.contrastive_enabled:
        views = make_views(model, arrays, idx, cluster_ids, cfg.seed, step,
                           augment=False)
        l_reg_t = regression_loss(views.y_pred, views.labels)
        total_t = l_reg_t * cfg.lam if cfg.lam != 1.0 else l_reg_t
        rep = LossReport(l_reg=float(l_reg_t.data), total=float(total_t.data))
        return total_t, rep

    views = make_views(model, arrays, idx, cluster_ids, cfg.seed, step,
                       augment=cfg.augmentation,
                       pop_barrier=not cfg.rnc_mode)
    l_reg_t = regression_loss(views.y_pred, views.labels)
    total_t = l_reg_t * cfg.lam
    rep = LossReport(l_reg=float(l_reg_t.data))

    def paired(pair, labels):
        if cfg.augmentation:
            return cl.pair_views(pair[0], pair[1]), cl.pair_labels(labels)
        return pair[0], labels

    if cfg.rnc_mode:
        feats, labels = paired(views.f_pop_uid, views.labels)
        l_rnc_t = cl.rnc_loss(feats, labels, cfg.rnc_tau)
        rep.l_rnc = float(l_rnc_t.data)
        total_t = total_t + l_rnc_t * (1 - cfg.lam)
    else:
        a1, a2, a3 = cfg.alphas
        if cfg.use_crd:
            feats, labels = paired(views.f_p, views.cat_levels)
            l_t = cl.crd_loss(feats, labels, cfg.tau)
            rep.l_crd = float(l_t.data)
            total_t = total_t + l_t * ((1 - cfg.lam) * a1)
        if cfg.use_uisd:
            feats, labels = paired(views.f_u, views.cluster_ids)
            l_t = cl.uisd_loss(feats, labels, cfg.tau)
            rep.l_uisd = float(l_t.data)
            total_t = total_t + l_t * ((1 - cfg.lam) * a2)
        if cfg.use_uid:
            feats, labels = paired(views.f_pop_uid, views.user_index)
            l_t = cl.uid_loss(feats, labels, cfg.tau)
            rep.l_uid = float(l_t.data)
            total_t = total_t + l_t * ((1 - cfg.lam) * a3)
    rep.total = float(total_t.data)
    return total_t, rep


def train(dataset: Dataset, cfg: TrainConfig, log=None) -> TrainResult:
    tr, va, te = dataset.split()
    arrays = {"train": dataset.materialize(tr),
              "val": dataset.materialize(va),
              "test": dataset.materialize(te)}

    followers = {uid: dataset.users[uid].numerical["followerCount"]
                 for uid in dataset.user_ids}
    clustering = cl.cluster_influence(followers, cfg.k_clusters, seed=cfg.seed,
                                      transform=cfg.cluster_transform)
    cluster_ids = {name: _cluster_ids_for(split, dataset, clustering)
                   for name, split in (("train", tr), ("val", va), ("test", te))}

    d_r = arrays["train"].image.shape[1]
    d_b = cfg.d_b
    if d_b >= d_r:
        d_b = max(1, d_r // 2)
        warnings.warn(f"bottleneck d_b clamped to {d_b} (< d_r={d_r})")
    model = PPCLModel(ModelConfig(d_r=d_r, d_b=d_b, d_h=cfg.d_h, d_M=cfg.d_M,
                                  l_cross=cfg.l_cross, dropout=cfg.dropout),
                      dataset.field_vocab_sizes(), seed=cfg.seed)
    opt = model.make_optimizer(lr=cfg.lr, weight_decay=cfg.weight_decay)

    n_train = len(arrays["train"])
    steps_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    hier = HierarchyIndex(arrays["train"].cat_levels)
    sampler_rng = stream(cfg.seed, "sampler")

    history = []
    best_val = math.inf
    best_epoch = -1
    best_params = None
    bad_epochs = 0
    step = 0

    for epoch in range(cfg.max_epochs):
        epoch_report = BatchReport()
        sums = LossReport(l_reg=0.0)
        for _ in range(steps_per_epoch):
            if cfg.random_sampling:
                idx = sample_random_batch(n_train, min(cfg.batch_size, n_train),
                                          sampler_rng)
            else:
                idx, rep = sample_hierarchical_batch(hier, cfg.batch_size,
                                                     sampler_rng)
                epoch_report.merge(rep)
            model.zero_grad()
            total_t, rep = _step_losses(model, arrays["train"], idx,
                                        cluster_ids["train"], cfg, step)
            total_t.backward()
            opt.step()
            for f in ("l_reg", "l_crd", "l_uisd", "l_uid", "l_rnc", "total"):
                setattr(sums, f, getattr(sums, f) + getattr(rep, f))
            step += 1

        val_pred = np.concatenate([
            model.forward_eval(arrays["val"], np.arange(i, min(i + 2048, len(arrays["val"]))))
            for i in range(0, len(arrays["val"]), 2048)])
        val_loss = cfg.lam * float(((val_pred - arrays["val"].labels) ** 2).mean())
        if not math.isfinite(val_loss):
            raise TrainError(f"validation loss diverged at epoch {epoch}")

        entry = {"epoch": epoch, "val_loss": val_loss,
                 "fallback_relaxed": epoch_report.relaxed,
                 "fallback_self_dup": epoch_report.self_dup}
        for f in ("l_reg", "l_crd", "l_uisd", "l_uid", "l_rnc", "total"):
            entry[f] = getattr(sums, f) / steps_per_epoch
        history.append(entry)
        if log:
            log("epoch %d total %.4f reg %.4f val %.4f fallbacks %d/%d" % (
                epoch, entry["total"], entry["l_reg"], val_loss,
                epoch_report.relaxed, epoch_report.self_dup))

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {p.name: p.data.copy() for p in model.param_list()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    if best_params is not None:
        for p in model.param_list():
            p.data = best_params[p.name]
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_val=best_val, clustering=clustering,
                       arrays=arrays, cluster_ids=cluster_ids, config=cfg)


ABLATION_ROWS = [
    ("w/o CL", dict(use_crd=False, use_uisd=False, use_uid=False, lam=1.0)),
    ("+CRD", dict(use_uisd=False, use_uid=False)),
    ("+UISD", dict(use_crd=False, use_uid=False)),
    ("+UID", dict(use_crd=False, use_uisd=False)),
    ("+CRD+UISD", dict(use_uid=False)),
    ("+CRD+UID", dict(use_uisd=False)),
    ("+UISD+UID", dict(use_crd=False)),
    ("Random Sampling", dict(random_sampling=True)),
    ("w/o Augmentation", dict(augmentation=False)),
    ("PPCL", dict()),
]


def ablate(dataset: Dataset, cfg: TrainConfig, batch_sizes=(), log=None):
    """Run the ablation row set plus an optional batch-size sweep.

    Returns a list of (row name, EvalReport on the test split).
    """
    results = []
    for name, overrides in ABLATION_ROWS:
        row_cfg = replace(cfg, **overrides)
        if log:
            log(f"ablation row: {name}")
        res = train(dataset, row_cfg, log=log)
        results.append((name, evaluate(res.model, res.arrays["test"])))
    for B in batch_sizes:
        row_cfg = replace(cfg, batch_size=B)
        if log:
            log(f"batch-size row: B={B}")
        res = train(dataset, row_cfg, log=log)
        results.append((f"B={B}", evaluate(res.model, res.arrays["test"])))
    return results


def results_table(results):
    header = ["method", "mae", "mse", "src"]
    rows = [[name, r.mae, r.mse, r.src] for name, r in results]
    return header, rows


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(model: PPCLModel, path: str):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            p = model.params[name]
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(p.data.astype("<f8").tobytes())


def load_checkpoint(model: PPCLModel, path: str):
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != 1:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        seen = set()
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            data = np.frombuffer(f.read(8 * int(np.prod(shape))), dtype="<f8")
            if name not in model.params:
                raise DataError(f"{path}: unknown param {name}")
            if model.params[name].data.shape != shape:
                raise DataError(f"{path}: shape mismatch for {name}: "
                                f"{shape} vs {model.params[name].data.shape}")
            model.params[name].data = data.reshape(shape)
            seen.add(name)
        missing = set(model.params) - seen
        if missing:
            raise DataError(f"{path}: missing params {sorted(missing)[:3]}...")
