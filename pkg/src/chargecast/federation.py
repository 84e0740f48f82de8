"""Hub clustering and federated training over charging-site neighborhoods.

EVSEs are grouped into geographic hubs; each hub trains on its own data and
only parameter vectors travel. Two aggregation families live here:

* gradient models (the recurrent nets): FedAvg / FedProx over flat parameter
  vectors, orchestrated by :func:`run_federation` against any trainer that
  speaks the minibatch-trainer protocol;
* boosted trees: clients each fit a small standalone ensemble, the server
  concatenates them, and a per-tree weight layer is then trained federatedly
  on the pooled ensemble's outputs.

Every client participates in every round. Communication cost is out of
scope; the energy ledger only meters local computation.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .energy import EnergyLedger, OpCountMeter
from .forecasters.gbt import BoostedTreesModel, Tree
from .forecasters.optim import MinibatchTrainer
from .forecasters.pinball import pinball_grad, pinball_loss

MAX_LLOYD_ITERS = 100
STRATEGIES = ("fedavg", "fedprox")

# reference schedules: a heavy round runs five local epochs, a light one runs one
HEAVY_LOCAL_EPOCHS = 5
LIGHT_LOCAL_EPOCHS = 1
DEFAULT_ROUNDS = 50
DEFAULT_LOCAL_PATIENCE = 2
DEFAULT_PROX_MU = 0.1


# ---------------------------------------------------------------------------
# hub clustering

@dataclass(frozen=True)
class HubAssignment:
    """k-means result mapping every EVSE to its nearest hub centroid."""

    k: int
    centroids: np.ndarray              # (k, 2) lat/lon
    assignment: dict                   # evse_id -> hub index in [0, k)

    def members(self, hub: int) -> list:
        return sorted(e for e, h in self.assignment.items() if h == hub)

    def hubs(self) -> list:
        return list(range(self.k))


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++: first centroid uniform, then proportional to squared distance."""
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(len(points)))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        centroids[j] = points[int(rng.choice(len(points), p=d2 / d2.sum()))]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def cluster_hubs(locations: Mapping[str, tuple], k: int, seed: int = 0) -> HubAssignment:
    """Groups EVSEs into ``k`` hubs by location (k-means++ then Lloyd's).

    Iterates to an assignment fixpoint or ``MAX_LLOYD_ITERS`` sweeps. A hub
    that loses all members is reseeded to the point currently farthest from
    its own centroid, so no hub comes back empty.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    ids = sorted(locations)
    if not ids:
        raise ValueError("no locations to cluster")
    points = np.array([locations[e] for e in ids], dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("each location must be a (lat, lon) pair")
    n_distinct = len(np.unique(points, axis=0))
    if k > n_distinct:
        raise ValueError(
            f"k={k} exceeds the {n_distinct} distinct locations; hubs would start empty"
        )

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    assign = None
    rows = np.arange(len(points))
    for _ in range(MAX_LLOYD_ITERS):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)          # ties resolve to the lowest hub id
        own = d2[rows, new_assign]
        for hub in range(k):
            if not np.any(new_assign == hub):
                far = int(np.argmax(own))
                new_assign[far] = hub
                own[far] = -1.0                 # a point repairs at most one hub
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        centroids = np.stack([points[assign == hub].mean(axis=0) for hub in range(k)])
    return HubAssignment(k=k, centroids=centroids,
                         assignment={e: int(h) for e, h in zip(ids, assign)})


# ---------------------------------------------------------------------------
# federated averaging over flat parameter vectors

@dataclass(frozen=True)
class FederationPlan:
    """Schedule and strategy for one federated training run.

    ``local_patience`` stops a client's in-round epochs once its own
    validation loss stalls; ``None`` disables that and always runs
    ``local_epochs``. ``round_patience`` (off by default) stops the round
    loop when the sample-weighted global validation loss stalls.
    """

    rounds: int = DEFAULT_ROUNDS
    local_epochs: int = HEAVY_LOCAL_EPOCHS
    local_patience: int | None = DEFAULT_LOCAL_PATIENCE
    strategy: str = "fedavg"
    mu: float = DEFAULT_PROX_MU
    seed: int = 0
    round_patience: int | None = None

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be at least 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        for name in ("local_patience", "round_patience"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be positive or None")

    @property
    def phase(self) -> str:
        return "fed-heavy" if self.local_epochs > 1 else "fed-light"


@dataclass(frozen=True)
class ClientUpdate:
    """One client's message back to the server after local training."""

    hub_id: int
    params: np.ndarray
    n_samples: int
    train_loss: float
    valid_loss: float
    epochs_run: int
    joules: float


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    client_train_loss: dict
    client_valid_loss: dict
    client_update_norm: dict
    client_epochs: dict
    client_joules: dict
    global_valid_loss: float
    global_param_hash: str

    def to_json(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and not math.isfinite(x) else x

        clients = {}
        for hub in sorted(self.client_train_loss):
            clients[str(hub)] = {
                "train_loss": clean(self.client_train_loss[hub]),
                "valid_loss": clean(self.client_valid_loss[hub]),
                "update_norm": clean(self.client_update_norm[hub]),
                "epochs": self.client_epochs[hub],
                "joules": clean(self.client_joules[hub]),
            }
        return {
            "round": self.round_index,
            "clients": clients,
            "global_valid_loss": clean(self.global_valid_loss),
            "global_param_hash": self.global_param_hash,
        }


@dataclass
class FederationResult:
    params: np.ndarray
    rounds: list
    init_hub: int
    stop_reason: str | None = None


def param_hash(params: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype=float).tobytes()).hexdigest()


def write_round_log(records: Sequence[RoundRecord], stream) -> None:
    """Line-delimited JSON, one round per line."""
    for rec in records:
        stream.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def fedavg_aggregate(updates: Sequence[tuple]) -> np.ndarray:
    """Sample-count-weighted mean of parameter vectors.

    ``updates`` is a sequence of (vector, n_samples) in ascending hub order.
    Weights are normalized first and the weighted vectors summed in the given
    order, so a single client aggregates to exactly its own vector.
    """
    if not updates:
        raise ValueError("no client updates to aggregate")
    vectors = [np.asarray(v, dtype=float) for v, _ in updates]
    counts = np.array([float(n) for _, n in updates])
    if np.any(counts <= 0):
        raise ValueError("client sample counts must be positive")
    width = vectors[0].shape
    for vec in vectors[1:]:
        if vec.shape != width:
            raise ValueError(
                f"parameter layouts differ across clients: {vec.shape} vs {width}"
            )
    weights = counts / counts.sum()
    out = np.zeros_like(vectors[0])
    for w, vec in zip(weights, vectors):
        out = out + w * vec
    return out


def _local_fit(trainer, epochs: int, patience: int | None):
    """Runs a client's in-round epochs, optionally early-stopped on its own
    validation loss (best parameters restored). Returns (last train loss,
    epochs actually run)."""
    if patience is None:
        return trainer.train_epochs(epochs), epochs
    best_loss = math.inf
    best_params = None
    stale = 0
    last = math.nan
    run = 0
    for _ in range(epochs):
        last = trainer.train_epochs(1)
        run += 1
        valid = trainer.valid_loss()
        if valid < best_loss:
            best_loss, best_params, stale = valid, trainer.get_params(), 0
        else:
            stale += 1
            if stale >= patience:
                break
    if best_params is not None:
        trainer.set_params(best_params)
    return last, run


def _global_valid_loss(clients: Mapping, hub_ids: Sequence[int], params: np.ndarray) -> float:
    num = 0.0
    den = 0
    for hub in hub_ids:
        trainer = clients[hub]
        n = getattr(trainer, "n_valid_samples", 0)
        if n:
            num += n * trainer.evaluate_params(params)
            den += n
    return num / den if den else math.nan


def run_federation(plan: FederationPlan, clients: Mapping[int, Any], *,
                   ledger: EnergyLedger | None = None,
                   meter: OpCountMeter | None = None,
                   model_tag: str = "",
                   phase: str | None = None) -> FederationResult:
    """Synchronous federated training over per-hub trainer objects.

    The initial global model is the local initialization of one seeded-randomly
    chosen participant. Each round pushes the global vector to every client,
    runs local epochs, then aggregates the returned vectors by sample count
    over ascending hub ids. Any client
    failure aborts the round with a diagnostic rather than aggregating a
    partial set of updates.

    Trainers keep their optimizer state between rounds, so with one client,
    FedAvg reproduces centralized training exactly.
    """
    if not clients:
        raise ValueError("no clients to federate")
    hub_ids = sorted(int(h) for h in clients)
    rng = np.random.default_rng(plan.seed)
    init_hub = int(hub_ids[int(rng.integers(len(hub_ids)))])
    global_params = clients[init_hub].get_params()
    if meter is None:
        meter = OpCountMeter()
    if phase is None:
        phase = plan.phase

    records: list[RoundRecord] = []
    stop_reason = None
    best_valid = math.inf
    best_global = global_params.copy()
    stale = 0
    for rnd in range(plan.rounds):
        updates: list[ClientUpdate] = []
        for hub in hub_ids:
            trainer = clients[hub]
            trainer.set_params(global_params)
            if plan.strategy == "fedprox":
                trainer.set_prox(plan.mu, global_params)
            try:
                train_loss, epochs_run = _local_fit(trainer, plan.local_epochs,
                                                    plan.local_patience)
            except Exception as exc:
                raise RuntimeError(
                    f"round {rnd}: client hub{hub} failed before aggregation: {exc}"
                ) from exc
            joules = meter.joules(epochs_run * trainer.ops_per_epoch)
            if ledger is not None:
                ledger.record(phase, f"hub{hub}", rnd, epochs_run, joules, model=model_tag)
            has_valid = getattr(trainer, "n_valid_samples", 0) > 0
            updates.append(ClientUpdate(
                hub_id=hub, params=trainer.get_params(), n_samples=trainer.n_samples,
                train_loss=train_loss,
                valid_loss=trainer.valid_loss() if has_valid else math.nan,
                epochs_run=epochs_run, joules=joules,
            ))
        norms = {u.hub_id: float(np.linalg.norm(u.params - global_params)) for u in updates}
        global_params = fedavg_aggregate([(u.params, u.n_samples) for u in updates])
        global_valid = _global_valid_loss(clients, hub_ids, global_params)
        records.append(RoundRecord(
            round_index=rnd,
            client_train_loss={u.hub_id: u.train_loss for u in updates},
            client_valid_loss={u.hub_id: u.valid_loss for u in updates},
            client_update_norm=norms,
            client_epochs={u.hub_id: u.epochs_run for u in updates},
            client_joules={u.hub_id: u.joules for u in updates},
            global_valid_loss=global_valid,
            global_param_hash=param_hash(global_params),
        ))
        if plan.round_patience is not None and math.isfinite(global_valid):
            if global_valid < best_valid:
                best_valid, best_global, stale = global_valid, global_params.copy(), 0
            else:
                stale += 1
                if stale >= plan.round_patience:
                    stop_reason = (
                        f"global validation loss stalled for {plan.round_patience} "
                        f"rounds; stopped after round {rnd}"
                    )
                    global_params = best_global
                    break
    return FederationResult(params=global_params, rounds=records,
                            init_hub=init_hub, stop_reason=stop_reason)


# ---------------------------------------------------------------------------
# federated boosted trees: concatenate client ensembles, learn per-tree weights

@dataclass(frozen=True)
class FedXgbPlan:
    """Schedule for the tree-ensemble route: per-client fits, then the
    federated training of the per-tree combine weights."""

    trees_per_client: int = 37
    rounds: int = 40
    local_epochs: int = 10
    local_patience: int | None = 3
    strategy: str = "fedavg"
    mu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.trees_per_client < 1:
            raise ValueError("trees_per_client must be at least 1")
        # reuse the schedule validation
        self.federation_plan()

    def federation_plan(self) -> FederationPlan:
        return FederationPlan(rounds=self.rounds, local_epochs=self.local_epochs,
                              local_patience=self.local_patience, strategy=self.strategy,
                              mu=self.mu, seed=self.seed)


@dataclass
class AggregatedEnsemble:
    """All clients' trees concatenated hub-major (hub id, then tree index)."""

    trees: list
    hub_ids: list
    trees_per_client: int
    client_inits: dict
    learning_rate: float
    feature_names: tuple

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_clients(self) -> int:
        return len(self.hub_ids)

    def tree_outputs(self, X: np.ndarray) -> np.ndarray:
        """Raw per-tree predictions, one column per tree."""
        X = np.asarray(X, dtype=float)
        if self.feature_names and X.shape[1] != len(self.feature_names):
            raise ValueError(
                f"expected {len(self.feature_names)} feature columns, got {X.shape[1]}"
            )
        return np.column_stack([tree.predict(X) for tree in self.trees])


def fedxgb_aggregate_ensembles(client_models: Mapping[int, BoostedTreesModel]) -> AggregatedEnsemble:
    """Concatenates per-client tree ensembles into one pooled ensemble.

    Clients must have contributed the same number of trees over the same
    feature set; their constant initial values ride along for the combine
    layer's bias.
    """
    if not client_models:
        raise ValueError("no client ensembles to aggregate")
    hub_ids = sorted(int(h) for h in client_models)
    first = client_models[hub_ids[0]]
    n_each = first.n_trees
    trees: list[Tree] = []
    inits = {}
    for hub in hub_ids:
        model = client_models[hub]
        if model.n_trees != n_each:
            raise ValueError(
                f"clients contributed different tree counts: hub{hub} has "
                f"{model.n_trees}, hub{hub_ids[0]} has {n_each}"
            )
        if model.config.learning_rate != first.config.learning_rate:
            raise ValueError("clients trained with different learning rates")
        if tuple(model.feature_names) != tuple(first.feature_names):
            raise ValueError("clients trained on different feature sets")
        trees.extend(model.trees)
        inits[hub] = float(model.init_value)
    return AggregatedEnsemble(trees=trees, hub_ids=hub_ids, trees_per_client=n_each,
                              client_inits=inits,
                              learning_rate=float(first.config.learning_rate),
                              feature_names=tuple(first.feature_names))


@dataclass
class TreeWeightModel:
    """Linear combine layer over the pooled ensemble's raw tree outputs.

    One scalar weight per tree plus a bias: with all weights zero the model
    predicts the constant bias; at the initial weights it reproduces the
    plain average of the clients' standalone predictions.
    """

    weights: np.ndarray
    bias: float

    def predict(self, tree_matrix: np.ndarray) -> np.ndarray:
        tree_matrix = np.asarray(tree_matrix, dtype=float)
        if tree_matrix.shape[1] != len(self.weights):
            raise ValueError(
                f"expected {len(self.weights)} tree columns, got {tree_matrix.shape[1]}"
            )
        return tree_matrix @ self.weights + self.bias

    def predict_kw(self, tree_matrix: np.ndarray, nominal_power_kw: float) -> np.ndarray:
        return np.clip(self.predict(tree_matrix), 0.0, None) * nominal_power_kw

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.bias]])

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "TreeWeightModel":
        flat = np.asarray(flat, dtype=float)
        return cls(weights=flat[:-1].copy(), bias=float(flat[-1]))

    def to_payload(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}

    @classmethod
    def from_payload(cls, payload: dict) -> "TreeWeightModel":
        return cls(weights=np.asarray(payload["weights"], dtype=float),
                   bias=float(payload["bias"]))


def initial_combine_weights(ensemble: AggregatedEnsemble) -> np.ndarray:
    """Flat [weights..., bias] that reproduces the average of client predictions.

    Each client predicts init_c + lr * sum of its trees; averaging over N
    clients means every tree enters at lr / N and the bias is the mean of the
    client constants.
    """
    weights = np.full(ensemble.n_trees, ensemble.learning_rate / ensemble.n_clients)
    bias = float(np.mean([ensemble.client_inits[h] for h in ensemble.hub_ids]))
    return np.concatenate([weights, [bias]])


class TreeWeightTrainer(MinibatchTrainer):
    """Minibatch trainer for the combine layer; rows are precomputed raw tree
    outputs for one hub's local samples."""

    def __init__(self, tree_matrix: np.ndarray, targets: np.ndarray,
                 valid_matrix: np.ndarray | None = None,
                 valid_targets: np.ndarray | None = None,
                 init: np.ndarray | None = None, seed: int = 0,
                 lr: float = 1e-3, batch_size: int = 32):
        self.X = np.asarray(tree_matrix, dtype=float)
        self.y = np.asarray(targets, dtype=float)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError("tree output matrix and targets disagree on sample count")
        if len(self.y) == 0:
            raise ValueError("training set is empty")
        if valid_matrix is None:
            self.X_valid = None
            self.y_valid = None
        else:
            self.X_valid = np.asarray(valid_matrix, dtype=float)
            self.y_valid = np.asarray(valid_targets, dtype=float)
        params = np.zeros(self.X.shape[1] + 1) if init is None else np.asarray(init, dtype=float)
        if len(params) != self.X.shape[1] + 1:
            raise ValueError("initial vector must hold one weight per tree plus a bias")
        super().__init__(params, seed, lr, batch_size)

    @property
    def n_samples(self) -> int:
        return len(self.y)

    @property
    def n_valid_samples(self) -> int:
        return 0 if self.y_valid is None else len(self.y_valid)

    @property
    def ops_per_epoch(self) -> float:
        return float(len(self.y)) * float(len(self.params))

    def _batch_loss_grad(self, idx: np.ndarray):
        Xb = self.X[idx]
        yb = self.y[idx]
        pred = Xb @ self.params[:-1] + self.params[-1]
        loss = pinball_loss(yb, pred)
        dpred = pinball_grad(yb, pred)
        return loss, np.concatenate([Xb.T @ dpred, [dpred.sum()]])

    def evaluate_params(self, flat: np.ndarray, data=None) -> float:
        if data is None:
            if self.X_valid is None:
                raise ValueError("trainer has no validation data")
            data = (self.X_valid, self.y_valid)
        X, y = data
        flat = np.asarray(flat, dtype=float)
        return pinball_loss(y, np.asarray(X, dtype=float) @ flat[:-1] + flat[-1])

    def valid_loss(self) -> float:
        return self.evaluate_params(self.params)

    def model(self) -> TreeWeightModel:
        return TreeWeightModel.from_flat(self.params)


def fedxgb_train_weights(ensemble: AggregatedEnsemble,
                         client_data: Mapping[int, tuple],
                         plan: FedXgbPlan, *,
                         ledger: EnergyLedger | None = None,
                         meter: OpCountMeter | None = None,
                         model_tag: str = "gbt",
                         phase: str | None = None) -> tuple:
    """Federated fit of the combine layer on each hub's local tree outputs.

    ``client_data`` maps hub id to (train matrix, train targets, valid matrix,
    valid targets), where matrices hold the pooled ensemble's raw tree outputs
    for that hub's rows. Returns (TreeWeightModel, FederationResult).
    """
    if set(client_data) != set(ensemble.hub_ids):
        raise ValueError("client data does not cover the aggregated hubs")
    expected = ensemble.n_trees
    init = initial_combine_weights(ensemble)
    trainers = {}
    for hub in ensemble.hub_ids:
        X_train, y_train, X_valid, y_valid = client_data[hub]
        if np.asarray(X_train).shape[1] != expected:
            raise ValueError(
                f"hub{hub} supplied {np.asarray(X_train).shape[1]} tree columns, "
                f"ensemble has {expected}"
            )
        trainers[hub] = TreeWeightTrainer(X_train, y_train, X_valid, y_valid,
                                          init=init.copy(), seed=plan.seed + hub)
    result = run_federation(plan.federation_plan(), trainers, ledger=ledger,
                            meter=meter, model_tag=model_tag, phase=phase)
    return TreeWeightModel.from_flat(result.params), result
