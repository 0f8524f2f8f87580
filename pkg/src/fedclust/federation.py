"""Communication-round orchestration: broadcast, local training, centroid
extraction, weighted aggregation, device failures, and final assignment.

Each client's round depends only on (server state, shard, seeds), so clients
may run on any number of workers; aggregation folds updates in client_id
order, which makes the run schedule-invariant.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ClientShard, LabeledDataset
from .metrics import collapse_report, kappa, nmi
from .model import (
    ClusterContrastiveModel,
    Gradients,
    TrainConfig,
    assign_labels,
    backward,
    sgd_step,
)
from .numerics import kmeans


@dataclass
class FailureConfig:
    rate: float = 0.0  # fraction of clients disconnected for the whole run
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"disconnection rate must be in [0, 1), got {self.rate}")


@dataclass
class FederationConfig:
    rounds: int
    k: int
    train: TrainConfig
    failure: FailureConfig = field(default_factory=FailureConfig)

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class ServerState:
    global_model: ClusterContrastiveModel
    global_centroids: np.ndarray  # (k, d_latent)
    round: int = 0


@dataclass
class ClientUpdate:
    model: ClusterContrastiveModel
    local_centroids: np.ndarray
    n_samples: int
    client_id: int


@dataclass
class RoundRecord:
    round: int
    nmi: float
    kappa: float
    effective_rank: float
    mean_abs_offdiag_corr: float
    loss_mean: float
    labels: np.ndarray = field(repr=False, default=None)
    skipped_samples: int = 0


@dataclass
class FederationResult:
    history: list[RoundRecord]
    final_labels: np.ndarray
    server: ServerState


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def init_server(
    ds: LabeledDataset,
    shards: list[ClientShard],
    model_template: ClusterContrastiveModel,
    k: int,
    seed: int,
) -> ServerState:
    """Server state before round 1: the template model plus centroids from
    k-means over the untrained encoder's view of all shard samples."""
    if not shards:
        raise ValueError("need at least one shard")
    probe_idx = np.concatenate([shard.indices for shard in shards])
    if len(probe_idx) < k:
        raise ValueError(f"k={k} exceeds probe size {len(probe_idx)}")
    Z = model_template.encoder.forward(ds.X[:, probe_idx])
    result = kmeans(Z.T, k=k, seed=_derived_seed(seed, 0xB002))
    return ServerState(
        global_model=model_template.copy(), global_centroids=result.centroids, round=0
    )


def client_round(
    ds: LabeledDataset,
    shard: ClientShard,
    server: ServerState,
    cfg: FederationConfig,
    round_idx: int,
) -> tuple[ClientUpdate, float, int]:
    """One client's local work for a round.

    Labels are assigned once from the broadcast model, then the local copy is
    trained for the configured epochs of seeded mini-batches, and local
    centroids are extracted from the trained representations. Returns the
    update plus (mean batch loss, skipped-sample count) for the round report.
    Deterministic given (train.seed, client_id, round_idx).
    """
    if len(shard.indices) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    tc = cfg.train
    X = ds.X[:, shard.indices]
    labels = assign_labels(server.global_model.encoder, server.global_centroids, X)

    local = server.global_model.copy()
    rng = np.random.default_rng([tc.seed, shard.client_id, round_idx, 0])
    n = X.shape[1]
    losses: list[float] = []
    skipped = 0
    for _ in range(tc.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, tc.batch_size):
            batch_idx = order[start : start + tc.batch_size]
            batch = {
                int(c): X[:, batch_idx[labels[batch_idx] == c]]
                for c in np.unique(labels[batch_idx])
            }
            result = backward(local, server.global_model, batch, tc, k=cfg.k)
            local = sgd_step(local, result.grads, tc.lr)
            losses.append(result.loss)
            skipped += result.skipped

    Z_local = local.encoder.forward(X)
    centroids = kmeans(
        Z_local.T, k=cfg.k, seed=_derived_seed(tc.seed, shard.client_id, round_idx, 1)
    ).centroids
    update = ClientUpdate(
        model=local, local_centroids=centroids, n_samples=n, client_id=shard.client_id
    )
    return update, float(np.mean(losses)) if losses else float("nan"), skipped


def aggregate_models(updates: list[ClientUpdate]) -> ClusterContrastiveModel:
    """Sample-count-weighted average of every parameter across updates."""
    if not updates:
        raise ValueError("no updates to aggregate")
    total = sum(u.n_samples for u in updates)
    weights = [u.n_samples / total for u in updates]
    out = updates[0].model.copy()
    for stack_name in ("encoder", "predictor"):
        out_stack = getattr(out, stack_name)
        for li, layer in enumerate(out_stack.layers):
            acc_w = np.zeros_like(layer.W)
            acc_b = np.zeros_like(layer.b)
            for u, wt in zip(updates, weights):
                src = getattr(u.model, stack_name).layers[li]
                if src.W.shape != layer.W.shape or src.activation != layer.activation:
                    raise ValueError("cannot aggregate models with mismatched architectures")
                acc_w += wt * src.W
                acc_b += wt * src.b
            layer.W = acc_w
            layer.b = acc_b
    return out


def aggregate_centroids(updates: list[ClientUpdate], k: int, seed: int) -> np.ndarray:
    """k-means over the pooled local centroids (each counted once)."""
    pool = np.concatenate([u.local_centroids for u in updates], axis=0)
    if pool.shape[0] < k:
        raise ValueError(f"pooled centroids ({pool.shape[0]}) fewer than k={k}")
    return kmeans(pool, k=k, seed=seed).centroids


def apply_failures(m: int, rate: float, seed: int) -> list[int]:
    """Sorted ids of the clients that stay connected for the whole run.

    floor(rate * m) clients are removed, chosen uniformly by seed.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    n_drop = int(np.floor(rate * m))
    rng = np.random.default_rng(seed)
    dropped = set(rng.choice(m, size=n_drop, replace=False).tolist())
    survivors = [i for i in range(m) if i not in dropped]
    if not survivors:
        raise ValueError("all clients removed")
    return survivors


def run_federation(
    ds: LabeledDataset,
    shards: list[ClientShard],
    cfg: FederationConfig,
    model_template: ClusterContrastiveModel,
    workers: int = 1,
) -> FederationResult:
    """Full training run: rounds of broadcast -> client training -> weighted
    aggregation, with per-round quality and collapse diagnostics on the whole
    dataset. The disconnected-client set is drawn once and held fixed."""
    survivors = apply_failures(len(shards), cfg.failure.rate, cfg.failure.seed)
    active = [shards[i] for i in survivors]
    server = init_server(ds, active, model_template, cfg.k, cfg.train.seed)

    history: list[RoundRecord] = []
    for round_idx in range(1, cfg.rounds + 1):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outs = list(
                    pool.map(
                        lambda sh: client_round(ds, sh, server, cfg, round_idx), active
                    )
                )
        else:
            outs = [client_round(ds, sh, server, cfg, round_idx) for sh in active]
        outs.sort(key=lambda t: t[0].client_id)
        updates = [t[0] for t in outs]

        new_model = aggregate_models(updates)
        new_centroids = aggregate_centroids(
            updates, cfg.k, seed=_derived_seed(cfg.train.seed, round_idx, 0xA66)
        )
        server = ServerState(
            global_model=new_model, global_centroids=new_centroids, round=round_idx
        )

        labels = assign_labels(server.global_model.encoder, server.global_centroids, ds.X)
        Z_full = server.global_model.encoder.forward(ds.X)
        report = collapse_report(Z_full)
        history.append(
            RoundRecord(
                round=round_idx,
                nmi=nmi(labels, ds.y),
                kappa=kappa(labels, ds.y),
                effective_rank=report.effective_rank,
                mean_abs_offdiag_corr=report.mean_abs_offdiag,
                loss_mean=float(np.mean([t[1] for t in outs])),
                labels=labels,
                skipped_samples=sum(t[2] for t in outs),
            )
        )

    final_labels = assign_labels(server.global_model.encoder, server.global_centroids, ds.X)
    return FederationResult(history=history, final_labels=final_labels, server=server)


# --- artifact emission --------------------------------------------------------

HISTORY_FIELDS = ("round", "nmi", "kappa", "effective_rank", "mean_abs_offdiag_corr", "loss_mean")


def write_history_csv(history: list[RoundRecord], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_FIELDS)
        for rec in history:
            writer.writerow(
                [rec.round]
                + [f"{getattr(rec, name):.17g}" for name in HISTORY_FIELDS[1:]]
            )


def write_labels_csv(labels: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("index", "label"))
        for i, lab in enumerate(labels):
            writer.writerow((i, int(lab)))


def write_run_manifest(config_doc: dict, path) -> None:
    """Echo the resolved configuration; no volatile fields, so reruns are
    byte-identical."""
    with open(path, "w") as f:
        json.dump(config_doc, f, indent=2, sort_keys=True)
        f.write("\n")
