import math

import numpy as np
import pytest

from chargecast import features, ingest
from chargecast.forecasters.rnn import (
    RnnConfig,
    RnnModel,
    RnnTrainer,
    SequenceData,
    build_sequence_dataset,
    train_early_stopping,
)

TOY = dict(hidden_size=5, step_input=4, n_locations=3, n_models=2,
           loc_emb_dim=4, model_emb_dim=2, dense_size=6, seq_len=7)


def toy_batch(model, seed=0, n=6, margin=1e-3):
    """Random batch whose residuals sit safely off the pinball kink."""
    c = model.config
    rng = np.random.default_rng(seed)
    batch = SequenceData(
        X=rng.normal(size=(n, c.seq_len, c.step_input)),
        loc=rng.integers(0, c.n_locations, n),
        model=rng.integers(0, c.n_models, n),
        nominal=rng.random(n),
        y=rng.random(n) * 2.0,
    )
    params = model.init_params(seed)
    yhat, _ = model.forward(params, batch)
    assert np.min(np.abs(batch.y - yhat)) > margin
    return params, batch


def max_gradcheck_error(cell, bidirectional, seed=0):
    model = RnnModel(RnnConfig(cell=cell, bidirectional=bidirectional, dropout=0.13, **TOY))
    params, batch = toy_batch(model, seed=seed)
    _, grad = model.loss_and_grad(params, batch)  # eval mode: dropout off
    eps = 1e-6
    worst = 0.0
    for i in range(len(params)):
        p = params.copy()
        p[i] += eps
        up, _ = model.loss_and_grad(p, batch)
        p[i] -= 2 * eps
        down, _ = model.loss_and_grad(p, batch)
        fd = (up - down) / (2 * eps)
        # relative error with a unit floor; FD noise dominates tiny coordinates
        worst = max(worst, abs(grad[i] - fd) / max(1.0, abs(fd)))
    return worst


@pytest.mark.parametrize("cell", ["gru", "lstm"])
@pytest.mark.parametrize("bidirectional", [False, True])
def test_gradient_matches_finite_differences(cell, bidirectional):
    assert max_gradcheck_error(cell, bidirectional) <= 1e-4


def test_parameter_layout_covers_vector_without_overlap():
    model = RnnModel(RnnConfig(**TOY))
    layout = model.layout
    seen = np.zeros(layout.size, dtype=bool)
    for name in layout.names():
        offset, shape, fanin = layout.slot(name)
        count = int(np.prod(shape))
        assert not seen[offset : offset + count].any()
        seen[offset : offset + count] = True
        assert fanin >= 1
    assert seen.all()


def test_init_respects_fanin_bounds():
    model = RnnModel(RnnConfig(**TOY))
    params = model.init_params(1234)
    for name in model.layout.names():
        _, shape, fanin = model.layout.slot(name)
        block = model.layout.view(params, name)
        assert np.max(np.abs(block)) <= 1.0 / math.sqrt(fanin)


def test_recurrent_param_count():
    h, d = TOY["hidden_size"], TOY["step_input"]
    gru = RnnModel(RnnConfig(cell="gru", **TOY))
    assert gru.recurrent_param_count() == 3 * h * (d + h + 1)
    lstm = RnnModel(RnnConfig(cell="lstm", **TOY))
    assert lstm.recurrent_param_count() == 4 * h * (d + h + 1)
    bi = RnnModel(RnnConfig(cell="gru", bidirectional=True, **TOY))
    assert bi.recurrent_param_count() == 2 * gru.recurrent_param_count()


def test_dropout_only_active_in_training():
    model = RnnModel(RnnConfig(dropout=0.5, **TOY))
    params, batch = toy_batch(model, seed=3)
    a = model.predict(params, batch)
    b = model.predict(params, batch)
    assert np.array_equal(a, b)
    rng = np.random.default_rng(0)
    trained, _ = model.forward(params, batch, train=True, rng=rng)
    assert not np.array_equal(a, trained)
    with pytest.raises(ValueError, match="rng"):
        model.forward(params, batch, train=True)


def test_training_is_deterministic_without_dropout():
    model = RnnModel(RnnConfig(dropout=0.0, **TOY))
    _, batch = toy_batch(model, seed=5)

    def run():
        trainer = RnnTrainer(model, batch, seed=7)
        trainer.train_epochs(3)
        return trainer.get_params()

    assert np.array_equal(run(), run())


def test_training_reduces_loss_toward_zero_target():
    model = RnnModel(RnnConfig(dropout=0.0, **TOY))
    _, batch = toy_batch(model, seed=1, n=24)
    batch = SequenceData(batch.X, batch.loc, batch.model, batch.nominal,
                         np.zeros(len(batch)))
    trainer = RnnTrainer(model, batch, seed=2, lr=3e-3)
    loss0 = trainer.evaluate(batch)
    trainer.train_epochs(40)
    loss1 = trainer.evaluate(batch)
    assert loss1 <= loss0
    assert np.mean(np.abs(model.predict(trainer.params, batch))) < np.mean(
        np.abs(model.predict(model.init_params(2), batch))
    )


def test_trainer_epochs_compose():
    # 2 epochs in one call and 1+1 across calls must agree exactly: the
    # trainer persists its optimizer moments and rng stream between calls
    model = RnnModel(RnnConfig(dropout=0.13, **TOY))
    _, batch = toy_batch(model, seed=6, n=20)
    a = RnnTrainer(model, batch, seed=3)
    a.train_epochs(2)
    b = RnnTrainer(model, batch, seed=3)
    b.train_epochs(1)
    b.train_epochs(1)
    assert np.array_equal(a.get_params(), b.get_params())


def test_prox_zero_is_bit_identical_to_plain_training():
    model = RnnModel(RnnConfig(dropout=0.13, **TOY))
    _, batch = toy_batch(model, seed=8, n=20)
    plain = RnnTrainer(model, batch, seed=4)
    plain.train_epochs(2)
    proxed = RnnTrainer(model, batch, seed=4)
    proxed.set_prox(0.0, np.zeros(model.n_params))
    proxed.train_epochs(2)
    assert np.array_equal(plain.get_params(), proxed.get_params())


def test_prox_pull_toward_center():
    model = RnnModel(RnnConfig(dropout=0.0, **TOY))
    _, batch = toy_batch(model, seed=9, n=20)
    center = model.init_params(99)
    free = RnnTrainer(model, batch, seed=5)
    free.train_epochs(5)
    anchored = RnnTrainer(model, batch, seed=5)
    anchored.set_prox(1e4, center)
    anchored.train_epochs(5)
    d_free = np.linalg.norm(free.get_params() - center)
    d_anchored = np.linalg.norm(anchored.get_params() - center)
    assert d_anchored < d_free


def test_nan_loss_raises_with_diagnostic():
    model = RnnModel(RnnConfig(dropout=0.0, **TOY))
    _, batch = toy_batch(model, seed=10)
    trainer = RnnTrainer(model, batch, seed=1)
    trainer.params[0] = np.nan
    with pytest.raises(RuntimeError, match="diverged"):
        trainer.train_epochs(1)


def test_empty_training_set_is_rejected():
    model = RnnModel(RnnConfig(**TOY))
    empty = SequenceData(np.zeros((0, TOY["seq_len"], TOY["step_input"])),
                         np.zeros(0, dtype=int), np.zeros(0, dtype=int),
                         np.zeros(0), np.zeros(0))
    with pytest.raises(ValueError, match="empty"):
        RnnTrainer(model, empty)


def test_early_stopping_restores_best_parameters():
    model = RnnModel(RnnConfig(dropout=0.13, **TOY))
    _, train = toy_batch(model, seed=11, n=30)
    _, valid = toy_batch(model, seed=12, n=12)
    trainer = RnnTrainer(model, train, valid, seed=6)
    history = train_early_stopping(trainer, max_epochs=25, patience=3)
    assert history["stopped_epoch"] <= 25
    assert trainer.valid_loss() == pytest.approx(history["best_valid_loss"], abs=1e-12)
    assert min(history["valid_loss"]) == history["best_valid_loss"]


def test_config_validation():
    with pytest.raises(ValueError):
        RnnConfig(cell="tcn")
    with pytest.raises(ValueError):
        RnnConfig(dropout=1.0)
    with pytest.raises(ValueError):
        RnnConfig(hidden_size=0)


# ------------------------------------------------------------- sequence data

def build_frames(n_evse=2, days=120, seed=21):
    txs = ingest.generate_synthetic(n_evse, days, seed=seed)
    series_map = ingest.resample_demand(txs)
    split = ingest.split_temporal(len(next(iter(series_map.values()))))
    meta = ingest.evse_metadata(txs)
    spec = features.compute_normalization(
        series_map, split, {k: m.nominal_power_kw for k, m in meta.items()}
    )
    frames = {
        evse_id: features.build_feature_frame(series, spec, split)
        for evse_id, series in series_map.items()
    }
    return frames, split, spec, meta


def test_sequence_dataset_blocks_and_shapes():
    frames, split, spec, meta = build_frames()
    ids = sorted(frames)
    loc_vocab = {evse_id: i for i, evse_id in enumerate(ids)}
    models = sorted({m.evse_model for m in meta.values()})
    model_vocab = {name: i for i, name in enumerate(models)}
    data = build_sequence_dataset(
        frames, split,
        loc_vocab, model_vocab,
        {k: meta[k].evse_model for k in ids},
        {k: spec.nominal_for(k) / spec.nominal_max_kw for k in ids},
        seq_len=48,
    )
    total = sum(len(data[b]) for b in ("train", "valid", "test"))
    expected = sum(max(0, len(f) - 47) for f in frames.values())
    assert total == expected
    assert data["train"].X.shape[1:] == (48, len(features.RNN_STEP_FEATURE_NAMES))
    assert len(data["train"]) > len(data["valid"]) > 0
    assert len(data["test"]) > 0
    # window content: the last step of each window is the frame row that owns the target
    frame = frames[ids[0]]
    step_cols = frame.columns(features.RNN_STEP_FEATURE_NAMES)
    first = data["train"].subset([0])
    assert np.array_equal(first.X[0, -1], step_cols[47])
    assert first.y[0] == frame.target[47]


def test_sequence_data_concat_and_subset():
    a = SequenceData(np.ones((2, 3, 4)), np.zeros(2, dtype=int),
                     np.zeros(2, dtype=int), np.ones(2), np.ones(2))
    b = SequenceData(np.zeros((1, 3, 4)), np.ones(1, dtype=int),
                     np.ones(1, dtype=int), np.zeros(1), np.zeros(1))
    both = SequenceData.concat([a, b])
    assert len(both) == 3
    sub = both.subset([2])
    assert sub.y[0] == 0.0
