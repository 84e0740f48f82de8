"""Recurrent sequence forecasters (GRU/LSTM) in plain numpy, trained by BPTT.

The whole parameter set lives in one flat float64 vector with a named layout,
which keeps federated averaging, serialization, and finite-difference checks
trivial. The head combines the final recurrent state with a station embedding,
a model-type embedding, and the normalized nominal power, then applies
(inverted) dropout, one tanh dense layer, and a linear output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .optim import MinibatchTrainer
from .pinball import pinball_grad, pinball_loss

DEFAULT_BATCH_SIZE = 32
DEFAULT_SEQ_LEN = 48


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class RnnConfig:
    cell: str = "gru"              # "gru" or "lstm"
    hidden_size: int = 12
    bidirectional: bool = False
    step_input: int = 12           # per-step feature count
    n_locations: int = 1
    n_models: int = 1
    loc_emb_dim: int = 15
    model_emb_dim: int = 3
    dense_size: int = 12
    dropout: float = 0.13
    seq_len: int = DEFAULT_SEQ_LEN

    def __post_init__(self):
        if self.cell not in ("gru", "lstm"):
            raise ValueError(f"cell must be 'gru' or 'lstm', got {self.cell!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if min(self.hidden_size, self.step_input, self.dense_size, self.seq_len,
               self.n_locations, self.n_models, self.loc_emb_dim, self.model_emb_dim) < 1:
            raise ValueError("all size parameters must be at least 1")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def gates(self) -> int:
        return 3 if self.cell == "gru" else 4

    @property
    def head_input(self) -> int:
        return self.directions * self.hidden_size + self.loc_emb_dim + self.model_emb_dim + 1


class ParamLayout:
    """Named (offset, shape, fanin) views over one flat parameter vector."""

    def __init__(self):
        self._entries: dict[str, tuple[int, tuple, int]] = {}
        self.size = 0

    def add(self, name: str, shape: tuple, fanin: int) -> None:
        count = int(np.prod(shape))
        self._entries[name] = (self.size, shape, fanin)
        self.size += count

    def names(self):
        return list(self._entries)

    def slot(self, name: str) -> tuple[int, tuple, int]:
        return self._entries[name]

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        offset, shape, _ = self._entries[name]
        return flat[offset : offset + int(np.prod(shape))].reshape(shape)

    def init(self, seed: int) -> np.ndarray:
        """Uniform(-1/sqrt(fanin), +1/sqrt(fanin)) per slot, in layout order."""
        rng = np.random.default_rng(seed)
        flat = np.empty(self.size)
        for name, (offset, shape, fanin) in self._entries.items():
            bound = 1.0 / math.sqrt(fanin)
            count = int(np.prod(shape))
            flat[offset : offset + count] = rng.uniform(-bound, bound, count)
        return flat


def _build_layout(config: RnnConfig) -> ParamLayout:
    layout = ParamLayout()
    g, h, d = config.gates, config.hidden_size, config.step_input
    for direction in range(config.directions):
        layout.add(f"W{direction}", (g * h, d), fanin=d)
        layout.add(f"U{direction}", (g * h, h), fanin=h)
        layout.add(f"b{direction}", (g * h,), fanin=h)
    layout.add("E_loc", (config.n_locations, config.loc_emb_dim), fanin=config.loc_emb_dim)
    layout.add("E_model", (config.n_models, config.model_emb_dim), fanin=config.model_emb_dim)
    layout.add("W_dense", (config.dense_size, config.head_input), fanin=config.head_input)
    layout.add("b_dense", (config.dense_size,), fanin=config.head_input)
    layout.add("W_out", (1, config.dense_size), fanin=config.dense_size)
    layout.add("b_out", (1,), fanin=config.dense_size)
    return layout


@dataclass
class SequenceData:
    """A batch (or whole block) of fixed-length windows with static side inputs."""

    X: np.ndarray        # (n, seq_len, step_input)
    loc: np.ndarray      # (n,) int station index
    model: np.ndarray    # (n,) int model-type index
    nominal: np.ndarray  # (n,) normalized nominal power
    y: np.ndarray        # (n,) normalized next-bin demand

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "SequenceData":
        return SequenceData(self.X[idx], self.loc[idx], self.model[idx],
                            self.nominal[idx], self.y[idx])

    @staticmethod
    def concat(parts: list) -> "SequenceData":
        return SequenceData(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.loc for p in parts]),
            np.concatenate([p.model for p in parts]),
            np.concatenate([p.nominal for p in parts]),
            np.concatenate([p.y for p in parts]),
        )


def _gru_forward(X, W, U, b, h0):
    S = X.shape[1]
    H = U.shape[1]
    h = h0
    steps = []
    for t in range(S):
        x = X[:, t]
        a = x @ W.T + b
        z = _sigmoid(a[:, :H] + h @ U[:H].T)
        r = _sigmoid(a[:, H : 2 * H] + h @ U[H : 2 * H].T)
        rh = r * h
        n = np.tanh(a[:, 2 * H :] + rh @ U[2 * H :].T)
        h_new = (1.0 - z) * n + z * h
        steps.append((x, h, z, r, n, rh))
        h = h_new
    return h, steps


def _gru_backward(steps, U, dh, dW, dU, db):
    H = U.shape[1]
    for x, h_prev, z, r, n, rh in reversed(steps):
        d_sz = dh * (h_prev - n) * z * (1.0 - z)
        d_n = dh * (1.0 - z) * (1.0 - n * n)
        dh_prev = dh * z
        dW[2 * H :] += d_n.T @ x
        dU[2 * H :] += d_n.T @ rh
        db[2 * H :] += d_n.sum(axis=0)
        drh = d_n @ U[2 * H :]
        dh_prev += drh * r
        d_sr = drh * h_prev * r * (1.0 - r)
        dW[:H] += d_sz.T @ x
        dU[:H] += d_sz.T @ h_prev
        db[:H] += d_sz.sum(axis=0)
        dh_prev += d_sz @ U[:H]
        dW[H : 2 * H] += d_sr.T @ x
        dU[H : 2 * H] += d_sr.T @ h_prev
        db[H : 2 * H] += d_sr.sum(axis=0)
        dh_prev += d_sr @ U[H : 2 * H]
        dh = dh_prev


def _lstm_forward(X, W, U, b, h0):
    S = X.shape[1]
    H = U.shape[1]
    h = h0
    c = np.zeros_like(h0)
    steps = []
    for t in range(S):
        x = X[:, t]
        s = x @ W.T + h @ U.T + b
        i = _sigmoid(s[:, :H])
        f = _sigmoid(s[:, H : 2 * H])
        g = np.tanh(s[:, 2 * H : 3 * H])
        o = _sigmoid(s[:, 3 * H :])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        steps.append((x, h, c, i, f, g, o, c_new))
        h, c = h_new, c_new
    return h, steps


def _lstm_backward(steps, U, dh, dW, dU, db):
    H = U.shape[1]
    dc = np.zeros_like(dh)
    for x, h_prev, c_prev, i, f, g, o, c_new in reversed(steps):
        tc = np.tanh(c_new)
        d_so = dh * tc * o * (1.0 - o)
        dc = dc + dh * o * (1.0 - tc * tc)
        d_si = dc * g * i * (1.0 - i)
        d_sf = dc * c_prev * f * (1.0 - f)
        d_sg = dc * i * (1.0 - g * g)
        ds = np.concatenate([d_si, d_sf, d_sg, d_so], axis=1)
        dW += ds.T @ x
        dU += ds.T @ h_prev
        db += ds.sum(axis=0)
        dh = ds @ U
        dc = dc * f


class RnnModel:
    """Stateless network definition; parameters travel as flat vectors."""

    def __init__(self, config: RnnConfig):
        self.config = config
        self.layout = _build_layout(config)

    @property
    def n_params(self) -> int:
        return self.layout.size

    def recurrent_param_count(self) -> int:
        c = self.config
        per_direction = c.gates * c.hidden_size * (c.step_input + c.hidden_size + 1)
        return c.directions * per_direction

    def init_params(self, seed: int) -> np.ndarray:
        return self.layout.init(seed)

    def forward(self, params: np.ndarray, batch: SequenceData,
                train: bool = False, rng: np.random.Generator | None = None):
        c = self.config
        view = self.layout.view
        B = len(batch)
        H = c.hidden_size
        h0 = np.zeros((B, H))
        cell_fwd = _gru_forward if c.cell == "gru" else _lstm_forward

        h_parts = []
        caches = []
        for direction in range(c.directions):
            X = batch.X if direction == 0 else batch.X[:, ::-1]
            h_final, steps = cell_fwd(X, view(params, f"W{direction}"),
                                      view(params, f"U{direction}"),
                                      view(params, f"b{direction}"), h0)
            h_parts.append(h_final)
            caches.append(steps)

        u = np.concatenate(
            h_parts
            + [view(params, "E_loc")[batch.loc],
               view(params, "E_model")[batch.model],
               batch.nominal[:, None]],
            axis=1,
        )
        if train and c.dropout > 0.0:
            if rng is None:
                raise ValueError("training-mode forward needs an rng for dropout")
            mask = (rng.random(u.shape) >= c.dropout) / (1.0 - c.dropout)
        else:
            mask = np.ones_like(u)
        u_drop = u * mask
        dense = np.tanh(u_drop @ view(params, "W_dense").T + view(params, "b_dense"))
        yhat = (dense @ view(params, "W_out").T + view(params, "b_out"))[:, 0]
        cache = {"caches": caches, "u": u, "mask": mask, "u_drop": u_drop, "dense": dense}
        return yhat, cache

    def backward(self, params: np.ndarray, batch: SequenceData, cache: dict,
                 d_yhat: np.ndarray) -> np.ndarray:
        c = self.config
        view = self.layout.view
        grad = np.zeros_like(params)
        gview = lambda name: self.layout.view(grad, name)  # noqa: E731

        dense = cache["dense"]
        gview("W_out")[:] = d_yhat[None, :] @ dense
        gview("b_out")[:] = d_yhat.sum()
        d_dense = d_yhat[:, None] @ view(params, "W_out")
        d_pre = d_dense * (1.0 - dense * dense)
        gview("W_dense")[:] = d_pre.T @ cache["u_drop"]
        gview("b_dense")[:] = d_pre.sum(axis=0)
        du = (d_pre @ view(params, "W_dense")) * cache["mask"]

        H = c.hidden_size
        rnn_dim = c.directions * H
        d_loc = du[:, rnn_dim : rnn_dim + c.loc_emb_dim]
        d_model = du[:, rnn_dim + c.loc_emb_dim : rnn_dim + c.loc_emb_dim + c.model_emb_dim]
        np.add.at(gview("E_loc"), batch.loc, d_loc)
        np.add.at(gview("E_model"), batch.model, d_model)

        cell_bwd = _gru_backward if c.cell == "gru" else _lstm_backward
        for direction in range(c.directions):
            dh = du[:, direction * H : (direction + 1) * H].copy()
            cell_bwd(cache["caches"][direction], view(params, f"U{direction}"), dh,
                     gview(f"W{direction}"), gview(f"U{direction}"), gview(f"b{direction}"))
        return grad

    def loss_and_grad(self, params: np.ndarray, batch: SequenceData,
                      train: bool = False, rng: np.random.Generator | None = None):
        yhat, cache = self.forward(params, batch, train=train, rng=rng)
        loss = pinball_loss(batch.y, yhat)
        grad = self.backward(params, batch, cache, pinball_grad(batch.y, yhat))
        return loss, grad

    def predict(self, params: np.ndarray, batch: SequenceData) -> np.ndarray:
        yhat, _ = self.forward(params, batch, train=False)
        return yhat


class RnnTrainer(MinibatchTrainer):
    """Owns parameters, the Adam state, and the shuffling/dropout stream.

    One trainer object survives across federation rounds, so resuming local
    training continues the exact optimizer trajectory; this is what makes a
    single-client federation reproduce centralized training to the last bit
    of floating point noise.
    """

    def __init__(self, model: RnnModel, train_data: SequenceData,
                 valid_data: SequenceData | None = None, seed: int = 0,
                 lr: float = 1e-3, batch_size: int = DEFAULT_BATCH_SIZE):
        if len(train_data) == 0:
            raise ValueError("training set is empty")
        self.model = model
        self.train_data = train_data
        self.valid_data = valid_data
        super().__init__(model.init_params(seed), seed, lr, batch_size)

    @property
    def n_samples(self) -> int:
        return len(self.train_data)

    @property
    def n_valid_samples(self) -> int:
        return 0 if self.valid_data is None else len(self.valid_data)

    @property
    def ops_per_epoch(self) -> float:
        # coarse work proxy: every sample touches every parameter once per epoch
        return float(len(self.train_data)) * float(self.model.n_params)

    def _batch_loss_grad(self, idx: np.ndarray):
        batch = self.train_data.subset(idx)
        return self.model.loss_and_grad(self.params, batch, train=True, rng=self.rng)

    def evaluate(self, data: SequenceData) -> float:
        return pinball_loss(data.y, self.model.predict(self.params, data))

    def evaluate_params(self, flat: np.ndarray, data: SequenceData | None = None) -> float:
        """Loss of an arbitrary parameter vector, without touching trainer state."""
        if data is None:
            data = self.valid_data
        if data is None or len(data) == 0:
            raise ValueError("trainer has no validation data")
        return pinball_loss(data.y, self.model.predict(np.asarray(flat, dtype=float), data))

    def valid_loss(self) -> float:
        if self.valid_data is None or len(self.valid_data) == 0:
            raise ValueError("trainer has no validation data")
        return self.evaluate(self.valid_data)


def train_early_stopping(trainer: RnnTrainer, max_epochs: int = 100,
                         patience: int | None = 10) -> dict:
    """Epoch loop with validation-loss early stopping; restores the best parameters.

    ``patience=None`` disables stopping and the best-epoch restore: the loop
    always runs ``max_epochs`` and keeps the final parameters, which makes the
    trajectory comparable to an uninterrupted ``train_epochs`` call.
    """
    best_loss = math.inf
    best_params = trainer.get_params()
    history = {"train_loss": [], "valid_loss": [], "stopped_epoch": max_epochs}
    stale = 0
    for epoch in range(max_epochs):
        train_loss = trainer.train_epochs(1)
        valid_loss = trainer.valid_loss()
        history["train_loss"].append(train_loss)
        history["valid_loss"].append(valid_loss)
        if valid_loss < best_loss:
            best_loss = valid_loss
            best_params = trainer.get_params()
            stale = 0
        elif patience is not None:
            stale += 1
            if stale >= patience:
                history["stopped_epoch"] = epoch + 1
                break
    if patience is not None:
        trainer.set_params(best_params)
    history["best_valid_loss"] = best_loss
    return history


def fit_rnn(config: RnnConfig, train_data: SequenceData, valid_data: SequenceData,
            seed: int = 0, max_epochs: int = 100, patience: int | None = 10,
            lr: float = 1e-3, batch_size: int = DEFAULT_BATCH_SIZE):
    """Centralized fit: minibatch Adam with early stopping on validation loss."""
    model = RnnModel(config)
    trainer = RnnTrainer(model, train_data, valid_data, seed=seed, lr=lr,
                         batch_size=batch_size)
    history = train_early_stopping(trainer, max_epochs=max_epochs, patience=patience)
    return trainer, history


def build_sequence_dataset(
    frames: dict,
    split,
    loc_vocab: dict,
    model_vocab: dict,
    evse_models: dict,
    nominal_scale: dict,
    seq_len: int = DEFAULT_SEQ_LEN,
) -> dict:
    """Sliding windows (stride 1) over each feature frame, pooled per split block.

    A window's block membership follows the bin it predicts, same as frame
    rows. ``nominal_scale`` maps evse id to nominal power divided by the fleet
    maximum; ``evse_models`` maps evse id to its model label.
    """
    from ..features import RNN_STEP_FEATURE_NAMES

    parts: dict[str, list] = {"train": [], "valid": [], "test": []}
    for evse_id in sorted(frames):
        frame = frames[evse_id]
        steps = frame.columns(RNN_STEP_FEATURE_NAMES)
        n_rows = len(frame)
        if n_rows < seq_len:
            continue
        ends = np.arange(seq_len - 1, n_rows)
        X = np.stack([steps[e - seq_len + 1 : e + 1] for e in ends])
        data = SequenceData(
            X=X,
            loc=np.full(len(ends), loc_vocab[evse_id], dtype=np.int64),
            model=np.full(len(ends), model_vocab[evse_models[evse_id]], dtype=np.int64),
            nominal=np.full(len(ends), nominal_scale[evse_id]),
            y=frame.target[ends],
        )
        for block in parts:
            mask = frame.block_mask(split, block)[ends]
            if np.any(mask):
                parts[block].append(data.subset(np.flatnonzero(mask)))
    return {
        block: SequenceData.concat(items) if items else SequenceData(
            np.zeros((0, seq_len, len(RNN_STEP_FEATURE_NAMES))),
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
            np.zeros(0), np.zeros(0))
        for block, items in parts.items()
    }
