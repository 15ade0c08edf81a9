"""Post encoder, user encoder and popularity predictor.

The post encoder adapts frozen pre-extracted image/text features through
per-branch bottlenecks and fuses them with a two-layer MLP. The user encoder
combines explicit feature crossing over dense and sparse fields with an
implicit MLP path. The predictor fuses both representations and regresses a
scalar popularity value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CATEGORICAL_FIELDS, NUMERICAL_FIELDS
from .errors import ConfigError
from .tensor import (ENC_P, ENC_POP, ENC_U, HEAD, Adam, Param, Tensor, concat,
                     dropout, embedding_lookup, init_bias, init_embedding,
                     init_linear, linear, stop_gradient, stream)


@dataclass
class ModelConfig:
    d_r: int = 512          # raw feature dim from the frozen extractor
    d_b: int = 64           # bottleneck dim, must be < d_r
    d_h: int = 512          # common hidden dim
    d_M: int = 32           # categorical embedding dim
    l_cross: int = 4        # dense cross-layers
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_b >= self.d_r:
            raise ConfigError(f"bottleneck d_b={self.d_b} must be < d_r={self.d_r}")
        if self.d_h % 2:
            raise ConfigError(f"d_h={self.d_h} must be even (two halves)")
        if self.l_cross < 1:
            raise ConfigError("need at least one dense cross-layer")


def cross(xa: Tensor, xb: Tensor, w: Param, b: Param) -> Tensor:
    """Explicit interaction: row-wise <xa, xb> scales w, plus b."""
    if xa.data.shape != xb.data.shape:
        raise ConfigError(f"cross shape mismatch: {xa.data.shape} vs {xb.data.shape}")
    inner = (xa * xb).sum(axis=-1, keepdims=True)
    return inner * w.tensor + b.tensor


class PPCLModel:
    """All parameters plus the forward paths of the three encoders."""

    M = len(CATEGORICAL_FIELDS)
    N = len(NUMERICAL_FIELDS)
    d_N = 3 * N  # after the [D, D^2, sqrt(D)] augmentation

    def __init__(self, config: ModelConfig, field_vocab_sizes: dict, seed: int = 0):
        self.config = config
        self.field_vocab_sizes = dict(field_vocab_sizes)
        self.params = {}
        c = config
        rng = stream(seed, "init")

        def lin(name, owner, d_in, d_out, bias=True):
            self._add(init_linear(d_in, d_out, f"{name}.w", owner, rng))
            if bias:
                self._add(init_bias(d_in, d_out, f"{name}.b", owner, rng))

        def crossp(name, owner, d_c):
            # cross-layer weight and bias are d_c vectors
            bound = 1.0 / np.sqrt(d_c)
            self._add(Param(rng.uniform(-bound, bound, size=(d_c,)), f"{name}.w", owner))
            self._add(Param(rng.uniform(-bound, bound, size=(d_c,)), f"{name}.b", owner))

        # post encoder: per-branch bottlenecks (no bias) + fusion MLP
        for branch in ("v", "t"):
            lin(f"enc_p.bottleneck_{branch}.1", ENC_P, c.d_r, c.d_b, bias=False)
            lin(f"enc_p.bottleneck_{branch}.2", ENC_P, c.d_b, c.d_h, bias=False)
        lin("enc_p.fuse.1", ENC_P, 2 * c.d_h, c.d_h)
        lin("enc_p.fuse.2", ENC_P, c.d_h, c.d_h)

        # user encoder
        for f in CATEGORICAL_FIELDS:
            self._add(init_embedding(self.field_vocab_sizes[f], c.d_M,
                                     f"enc_u.embed.{f}", ENC_U, rng))
        for i in range(1, c.l_cross + 1):
            crossp(f"enc_u.dense_cross.{i}", ENC_U, self.d_N)
        for i in range(self.M):
            for j in range(i + 1, self.M):
                crossp(f"enc_u.sparse_cross.{i}_{j}", ENC_U, c.d_M)
        d_od = (c.l_cross + 1) * self.d_N
        d_os = (self.M * (self.M + 1) // 2) * c.d_M
        self.d_ou1 = d_od + d_os
        crossp("enc_u.combine_cross", ENC_U, self.d_ou1)
        lin("enc_u.out", ENC_U, 2 * self.d_ou1, c.d_h // 2)
        lin("enc_u.mlp.1", ENC_U, self.d_N + self.M * c.d_M, c.d_h)
        lin("enc_u.mlp.2", ENC_U, c.d_h, c.d_h // 2)

        # popularity encoder + regression head
        lin("enc_pop.1", ENC_POP, 2 * c.d_h, c.d_h)
        lin("enc_pop.2", ENC_POP, c.d_h, c.d_h)
        lin("head", HEAD, c.d_h, 1)

    def _add(self, p: Param):
        if p.name in self.params:
            raise ConfigError(f"duplicate param {p.name}")
        self.params[p.name] = p

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def param_list(self):
        return list(self.params.values())

    def owned(self, owner: str):
        return [p for p in self.params.values() if p.owner == owner]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- forward paths ------------------------------------------------------

    def _mlp2(self, x: Tensor, prefix: str, rng, training: bool) -> Tensor:
        h = linear(x, self[f"{prefix}.1.w"], self[f"{prefix}.1.b"]).relu()
        h = dropout(h, self.config.dropout, rng, training)
        return linear(h, self[f"{prefix}.2.w"], self[f"{prefix}.2.b"])

    def adapt(self, f_raw: Tensor, branch: str) -> Tensor:
        """Bottleneck adapter for one branch, 'v' (image) or 't' (text)."""
        h = linear(f_raw, self[f"enc_p.bottleneck_{branch}.1.w"]).relu()
        return linear(h, self[f"enc_p.bottleneck_{branch}.2.w"])

    def encode_post(self, image, text, view_rng, training=True) -> Tensor:
        fv = self.adapt(Tensor(image), "v")
        ft = self.adapt(Tensor(text), "t")
        return self._mlp2(concat([fv, ft]), "enc_p.fuse", view_rng, training)

    def dense_crossing(self, d: Tensor) -> Tensor:
        outs = [d]
        for i in range(1, self.config.l_cross + 1):
            outs.append(cross(d, outs[-1],
                              self[f"enc_u.dense_cross.{i}.w"],
                              self[f"enc_u.dense_cross.{i}.b"]))
        return concat(outs)

    def sparse_crossing(self, user_cat) -> tuple:
        """Returns (O^s, E list). user_cat is n x M vocab ids."""
        embeds = [embedding_lookup(self[f"enc_u.embed.{f}"], user_cat[:, k])
                  for k, f in enumerate(CATEGORICAL_FIELDS)]
        crossed = []
        for i in range(self.M):
            for j in range(i + 1, self.M):
                crossed.append(cross(embeds[i], embeds[j],
                                     self[f"enc_u.sparse_cross.{i}_{j}.w"],
                                     self[f"enc_u.sparse_cross.{i}_{j}.b"]))
        return concat(embeds + crossed), embeds

    def encode_user(self, user_cat, user_dense, view_rng, training=True) -> Tensor:
        d = Tensor(user_dense)
        o_d = self.dense_crossing(d)
        o_s, embeds = self.sparse_crossing(user_cat)
        o_u1 = concat([o_d, o_s])
        o_u2 = cross(o_u1, o_u1, self["enc_u.combine_cross.w"],
                     self["enc_u.combine_cross.b"])
        f_cross = linear(concat([o_u1, o_u2]), self["enc_u.out.w"], self["enc_u.out.b"])
        f_mlp = self._mlp2(concat([d] + embeds), "enc_u.mlp", view_rng, training)
        return concat([f_cross, f_mlp])

    def encode_pop(self, f_p: Tensor, f_u: Tensor, view_rng, training=True,
                   barrier=False) -> Tensor:
        x = concat([f_p, f_u])
        if barrier:
            x = stop_gradient(x)
        return self._mlp2(x, "enc_pop", view_rng, training)

    def predict(self, f_pop: Tensor) -> Tensor:
        return linear(f_pop, self["head.w"], self["head.b"]).reshape(-1)

    def forward_eval(self, arrays, idx=None) -> np.ndarray:
        """Deterministic inference path (dropout off), returns predictions."""
        img, txt, ucat, uden = _slice(arrays, idx)
        rng = stream(0, "eval")  # unused with training=False
        f_p = self.encode_post(img, txt, rng, training=False)
        f_u = self.encode_user(ucat, uden, rng, training=False)
        f_pop = self.encode_pop(f_p, f_u, rng, training=False)
        return self.predict(f_pop).data

    def f_pop_eval(self, arrays, idx=None) -> np.ndarray:
        img, txt, ucat, uden = _slice(arrays, idx)
        rng = stream(0, "eval")
        f_p = self.encode_post(img, txt, rng, training=False)
        f_u = self.encode_user(ucat, uden, rng, training=False)
        return self.encode_pop(f_p, f_u, rng, training=False).data

    def make_optimizer(self, lr=0.002, weight_decay=1e-4) -> Adam:
        return Adam(self.param_list(), lr=lr, weight_decay=weight_decay)


def _slice(arrays, idx):
    if idx is None:
        return arrays.image, arrays.text, arrays.user_cat, arrays.user_dense
    return (arrays.image[idx], arrays.text[idx],
            arrays.user_cat[idx], arrays.user_dense[idx])


@dataclass
class Views:
    """Per-stage dropout views of one sampled batch plus label channels."""
    f_p: tuple        # (view1, view2) post representations
    f_u: tuple        # (view1, view2) user representations
    f_pop_uid: tuple  # (view1, view2) barriered popularity representations
    f_pop_live: Tensor  # view-1 live popularity representation (regression)
    y_pred: Tensor
    labels: np.ndarray        # regression targets
    cat_levels: np.ndarray    # n x L
    cluster_ids: np.ndarray   # n
    user_index: np.ndarray    # n


def make_views(model: PPCLModel, arrays, idx, cluster_ids, seed, step,
               augment=True, pop_barrier=True) -> Views:
    """Two full forward passes with independent dropout masks.

    UID views come from two extra barriered popularity-encoder passes over the
    view-1 representations; the regression path reuses view 1 live. With
    augment=False the second views are omitted (w/o-augmentation ablation);
    pop_barrier=False produces live pair views for the rank-contrast baseline.
    """
    img, txt, ucat, uden = _slice(arrays, idx)
    rngs = {tag: stream(seed, "views", step, tag)
            for tag in ("p1", "p2", "u1", "u2", "pop1", "pop2", "reg")}
    f_p1 = model.encode_post(img, txt, rngs["p1"])
    f_u1 = model.encode_user(ucat, uden, rngs["u1"])
    f_p2 = f_u2 = pop2 = None
    if augment:
        f_p2 = model.encode_post(img, txt, rngs["p2"])
        f_u2 = model.encode_user(ucat, uden, rngs["u2"])
    pop1 = model.encode_pop(f_p1, f_u1, rngs["pop1"], barrier=pop_barrier)
    if augment:
        pop2 = model.encode_pop(f_p1, f_u1, rngs["pop2"], barrier=pop_barrier)
    live = model.encode_pop(f_p1, f_u1, rngs["reg"], barrier=False)
    return Views(
        f_p=(f_p1, f_p2),
        f_u=(f_u1, f_u2),
        f_pop_uid=(pop1, pop2),
        f_pop_live=live,
        y_pred=model.predict(live),
        labels=arrays.labels[idx],
        cat_levels=arrays.cat_levels[idx],
        cluster_ids=cluster_ids[idx],
        user_index=arrays.user_index[idx],
    )
