"""Cluster-contrastive network: encoder + predictor stacks, the stop-gradient
loss, its decorrelation regularizer, and exact reverse-mode gradients.

Column convention throughout: data matrices are (dim, n_samples), one sample
per column. The loss for a batch grouped into clusters is

    sum_c 1/(k n_c^2) sum_ij -cos(p_i^c, stopgrad(z_j^c))
  + sum_c lam/(k n_c) sum_i  -cos(p_i^c, stopgrad(p_i^gc))
  + eta_reg/d'^2 * ||cov(Z_batch)||_F^2

where p = predictor(encoder(x)), z = encoder(x), p^g comes from the frozen
global model, and k is the configured cluster count (a cluster absent from
the batch simply contributes nothing). Stop-gradient branches contribute no
gradient; everything else is differentiated exactly, normalization included.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import covariance

DEGENERATE_NORM = 1e-12

_ACTIVATIONS = ("identity", "relu")


@dataclass
class DenseLayer:
    W: np.ndarray  # (out_dim, in_dim)
    b: np.ndarray  # (out_dim,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.shape[0] != self.b.shape[0]:
            raise ValueError("bias length must match output dimension")


@dataclass
class DenseStack:
    layers: list[DenseLayer]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.W.shape[1] != prev.W.shape[0]:
                raise ValueError(
                    f"layer dims do not chain: {prev.W.shape} -> {nxt.W.shape}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def is_linear(self) -> bool:
        return all(
            layer.activation == "identity" and not layer.b.any() for layer in self.layers
        )

    def product(self) -> np.ndarray:
        """End-to-end weight product W_L ... W_1 (meaningful in linear mode)."""
        out = self.layers[0].W
        for layer in self.layers[1:]:
            out = layer.W @ out
        return out

    def forward(self, X: np.ndarray) -> np.ndarray:
        a = np.asarray(X, dtype=np.float64)
        if a.shape[0] != self.in_dim:
            raise ValueError(f"input has {a.shape[0]} rows, stack expects {self.in_dim}")
        for layer in self.layers:
            a = layer.W @ a + layer.b[:, None]
            if layer.activation == "relu":
                a = np.maximum(a, 0.0)
        return a

    def forward_cached(self, X: np.ndarray):
        """Forward pass keeping per-layer pre-activations for the backward pass."""
        acts = [np.asarray(X, dtype=np.float64)]
        pre = []
        for layer in self.layers:
            h = layer.W @ acts[-1] + layer.b[:, None]
            pre.append(h)
            acts.append(np.maximum(h, 0.0) if layer.activation == "relu" else h)
        return acts, pre

    def backward(self, acts, pre, d_out: np.ndarray):
        """Backprop d(loss)/d(output) through the stack.

        Returns ([(dW, db) per layer], d_input).
        """
        grads = [None] * len(self.layers)
        g = d_out
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            if layer.activation == "relu":
                g = g * (pre[idx] > 0.0)
            grads[idx] = (g @ acts[idx].T, g.sum(axis=1))
            g = layer.W.T @ g
        return grads, g

    def copy(self) -> "DenseStack":
        return DenseStack(
            [DenseLayer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers]
        )


@dataclass
class ClusterContrastiveModel:
    encoder: DenseStack
    predictor: DenseStack
    d_latent: int

    def __post_init__(self):
        ok = (
            self.encoder.out_dim == self.d_latent
            and self.predictor.in_dim == self.d_latent
            and self.predictor.out_dim == self.d_latent
        )
        if not ok:
            raise ValueError("encoder/predictor dimensions must agree on d_latent")

    def copy(self) -> "ClusterContrastiveModel":
        return ClusterContrastiveModel(
            self.encoder.copy(), self.predictor.copy(), self.d_latent
        )


def new_model(
    d_in: int,
    d_latent: int,
    hidden_encoder: int,
    hidden_predictor: int,
    seed: int,
    linear: bool = False,
    init_gain: float = 1.0,
) -> ClusterContrastiveModel:
    """Desk-scale dense model: d_in -> hidden -> d_latent encoder and
    d_latent -> hidden -> d_latent predictor. `linear` drops activations and
    biases so the end-to-end maps are pure matrix products."""
    rng = np.random.default_rng(seed)
    act = "identity" if linear else "relu"

    def layer(out_dim, in_dim, activation):
        w = init_gain * rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
        return DenseLayer(w, np.zeros(out_dim), activation)

    encoder = DenseStack([layer(hidden_encoder, d_in, act), layer(d_latent, hidden_encoder, "identity")])
    predictor = DenseStack(
        [layer(hidden_predictor, d_latent, act), layer(d_latent, hidden_predictor, "identity")]
    )
    return ClusterContrastiveModel(encoder, predictor, d_latent)


def forward(model: ClusterContrastiveModel, X: np.ndarray):
    """Representations and predictions for a column batch: Z = f(X), P = h(Z)."""
    Z = model.encoder.forward(X)
    P = model.predictor.forward(Z)
    return Z, P


def neg_cosine(a, b) -> float:
    """Negative cosine similarity -a.b / (|a||b|); rejects near-zero vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        raise ValueError("neg_cosine: degenerate input with near-zero norm")
    return float(-(a @ b) / (na * nb))


def assign_labels(encoder: DenseStack, centroids: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Nearest-centroid labels of f(X) in representation space.

    Ties break toward the smaller centroid index.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2 or centroids.shape[0] < 1:
        raise ValueError("centroids must be a non-empty (k, d') matrix")
    Z = encoder.forward(X)
    d2 = np.sum((Z.T[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


@dataclass
class TrainConfig:
    lam: float  # global-proximity tradeoff; no default on purpose
    eta_reg: float  # decorrelation tradeoff; 0 disables the regularizer term
    lr: float
    local_epochs: int
    batch_size: int
    seed: int

    def __post_init__(self):
        if self.lam < 0 or self.eta_reg < 0:
            raise ValueError("lam and eta_reg must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


def _normalize_columns(M: np.ndarray):
    norms = np.linalg.norm(M, axis=0)
    ok = norms >= DEGENERATE_NORM
    safe = np.where(ok, norms, 1.0)
    return M / safe, norms, ok


@dataclass
class ClusterCache:
    """Per-cluster forward state; hatted matrices hold unit columns except
    where the raw norm fell below 1e-12 (see the ok_* masks)."""

    X: np.ndarray
    Z: np.ndarray
    P: np.ndarray
    P_g: np.ndarray
    z_hat: np.ndarray
    p_hat: np.ndarray
    pg_hat: np.ndarray
    p_norm: np.ndarray
    ok_z: np.ndarray
    ok_p: np.ndarray
    ok_pg: np.ndarray


@dataclass
class ForwardCache:
    k: int
    clusters: dict[int, ClusterCache]
    enc_acts: list = field(repr=False, default=None)
    enc_pre: list = field(repr=False, default=None)
    pred_acts: list = field(repr=False, default=None)
    pred_pre: list = field(repr=False, default=None)
    slices: dict[int, slice] = field(default_factory=dict)
    n_total: int = 0

    @property
    def skipped(self) -> int:
        return sum(
            int(np.sum(~(c.ok_z & c.ok_p & c.ok_pg))) for c in self.clusters.values()
        )


def build_cache(
    model: ClusterContrastiveModel,
    global_model: ClusterContrastiveModel,
    batch_by_cluster: dict[int, np.ndarray],
    k: int,
) -> ForwardCache:
    """One pooled forward pass over all clusters in the batch."""
    if not batch_by_cluster:
        raise ValueError("batch contains no clusters")
    order = sorted(batch_by_cluster)
    X_all = np.concatenate([batch_by_cluster[c] for c in order], axis=1)
    enc_acts, enc_pre = model.encoder.forward_cached(X_all)
    Z_all = enc_acts[-1]
    pred_acts, pred_pre = model.predictor.forward_cached(Z_all)
    P_all = pred_acts[-1]
    Pg_all = global_model.predictor.forward(global_model.encoder.forward(X_all))

    clusters: dict[int, ClusterCache] = {}
    slices: dict[int, slice] = {}
    start = 0
    for c in order:
        n_c = batch_by_cluster[c].shape[1]
        sl = slice(start, start + n_c)
        start += n_c
        Z, P, Pg = Z_all[:, sl], P_all[:, sl], Pg_all[:, sl]
        z_hat, _, ok_z = _normalize_columns(Z)
        p_hat, p_norm, ok_p = _normalize_columns(P)
        pg_hat, _, ok_pg = _normalize_columns(Pg)
        clusters[c] = ClusterCache(
            X=batch_by_cluster[c], Z=Z, P=P, P_g=Pg,
            z_hat=z_hat, p_hat=p_hat, pg_hat=pg_hat,
            p_norm=p_norm, ok_z=ok_z, ok_p=ok_p, ok_pg=ok_pg,
        )
        slices[c] = sl
    return ForwardCache(
        k=k, clusters=clusters,
        enc_acts=enc_acts, enc_pre=enc_pre,
        pred_acts=pred_acts, pred_pre=pred_pre,
        slices=slices, n_total=X_all.shape[1],
    )


def ccfc_loss(
    model: ClusterContrastiveModel,
    global_model: ClusterContrastiveModel,
    cache: ForwardCache,
    cfg: TrainConfig,
) -> float:
    """Scalar loss over a cached batch; eta_reg=0 reproduces the unregularized
    value exactly (the regularizer term is not evaluated at all).

    `cache` must have been built from (model, global_model); the models are
    accepted so call sites read like the math, but all tensors come from the
    cache.
    """
    if not cache.clusters:
        raise ValueError("empty cluster set")
    k = cache.k
    total = 0.0
    for cc in cache.clusters.values():
        n_c = cc.X.shape[1]
        s_z = cc.z_hat[:, cc.ok_z].sum(axis=1)
        anchors = cc.p_hat[:, cc.ok_p]
        total += -(anchors.sum(axis=1) @ s_z) / (k * n_c**2)
        both = cc.ok_p & cc.ok_pg
        total += -cfg.lam / (k * n_c) * float(
            np.sum(cc.p_hat[:, both] * cc.pg_hat[:, both])
        )
    if cfg.eta_reg != 0.0:
        Z_all = cache.enc_acts[-1]
        d_lat = Z_all.shape[0]
        sigma = covariance(Z_all)
        total += cfg.eta_reg / d_lat**2 * float(np.sum(sigma * sigma))
    return float(total)


@dataclass
class Gradients:
    encoder: list  # [(dW, db)] per encoder layer
    predictor: list

    def scaled(self, factor: float) -> "Gradients":
        return Gradients(
            [(dw * factor, db * factor) for dw, db in self.encoder],
            [(dw * factor, db * factor) for dw, db in self.predictor],
        )


@dataclass
class BackwardResult:
    grads: Gradients
    loss: float
    skipped: int


def backward(
    model: ClusterContrastiveModel,
    global_model: ClusterContrastiveModel,
    batch_by_cluster: dict[int, np.ndarray],
    cfg: TrainConfig,
    k: int | None = None,
) -> BackwardResult:
    """Exact reverse-mode gradients of the loss for one batch.

    Stop-gradient branches (the hatted representation targets and the global
    predictions) contribute nothing; the normalization of the local
    predictions is differentiated in full. Samples with a near-zero-norm
    prediction column are skipped and counted. `k` is the configured cluster
    count; it defaults to the number of clusters present in the batch.
    """
    if k is None:
        k = len(batch_by_cluster)
    cache = build_cache(model, global_model, batch_by_cluster, k=k)
    loss = ccfc_loss(model, global_model, cache, cfg)

    d_lat = model.d_latent
    dP_all = np.zeros((d_lat, cache.n_total))
    for c, cc in cache.clusters.items():
        n_c = cc.X.shape[1]
        s_z = cc.z_hat[:, cc.ok_z].sum(axis=1)
        # constant target per anchor: 1/(k n_c^2) * sum_j z_hat_j (+ lam/(k n_c) * pg_hat_i)
        A = np.tile(s_z[:, None] / (k * n_c**2), (1, n_c))
        both = cc.ok_p & cc.ok_pg
        A[:, both] += cfg.lam / (k * n_c) * cc.pg_hat[:, both]
        # d/dp of -(p_hat . a) = -(a - (p_hat.a) p_hat)/|p|
        proj = np.sum(cc.p_hat * A, axis=0)
        G = -(A - cc.p_hat * proj[None, :]) / np.where(cc.ok_p, cc.p_norm, 1.0)[None, :]
        G[:, ~cc.ok_p] = 0.0
        dP_all[:, cache.slices[c]] = G

    pred_grads, dZ_from_pred = model.predictor.backward(
        cache.pred_acts, cache.pred_pre, dP_all
    )

    dZ_all = dZ_from_pred
    if cfg.eta_reg != 0.0:
        Z_all = cache.enc_acts[-1]
        n = cache.n_total
        centered = Z_all - Z_all.mean(axis=1, keepdims=True)
        sigma = centered @ centered.T / n
        dZ_all = dZ_all + (4.0 * cfg.eta_reg / (n * d_lat**2)) * (sigma @ centered)

    enc_grads, _ = model.encoder.backward(cache.enc_acts, cache.enc_pre, dZ_all)
    return BackwardResult(
        grads=Gradients(encoder=enc_grads, predictor=pred_grads),
        loss=loss,
        skipped=cache.skipped,
    )


def sgd_step(model: ClusterContrastiveModel, grads: Gradients, lr: float) -> ClusterContrastiveModel:
    """Plain gradient step W <- W - lr * dW on a fresh copy of the model."""
    out = model.copy()
    for stack, stack_grads in ((out.encoder, grads.encoder), (out.predictor, grads.predictor)):
        for layer, (dW, db) in zip(stack.layers, stack_grads):
            layer.W -= lr * dW
            layer.b -= lr * db
    return out


# --- checkpoint serialization -------------------------------------------------

def stack_to_json(stack: DenseStack) -> dict:
    return {
        "layers": [
            {
                "rows": layer.W.shape[0],
                "cols": layer.W.shape[1],
                "w": layer.W.ravel().tolist(),
                "b": layer.b.tolist(),
                "act": layer.activation,
            }
            for layer in stack.layers
        ]
    }


def stack_from_json(doc: dict) -> DenseStack:
    layers = []
    for spec in doc["layers"]:
        w = np.array(spec["w"], dtype=np.float64).reshape(spec["rows"], spec["cols"])
        layers.append(DenseLayer(w, np.array(spec["b"], dtype=np.float64), spec["act"]))
    return DenseStack(layers)


def save_checkpoint(model: ClusterContrastiveModel, path) -> None:
    doc = {
        "encoder": stack_to_json(model.encoder),
        "predictor": stack_to_json(model.predictor),
        "d_latent": model.d_latent,
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> ClusterContrastiveModel:
    with open(path) as f:
        doc = json.load(f)
    return ClusterContrastiveModel(
        encoder=stack_from_json(doc["encoder"]),
        predictor=stack_from_json(doc["predictor"]),
        d_latent=doc["d_latent"],
    )
