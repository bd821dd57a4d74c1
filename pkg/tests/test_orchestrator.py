import numpy as np
import pytest

from splitwing import model as M
from splitwing import orchestrator as TR
from splitwing.data import Dataset, partition_by_ratio, synthetic_dataset
from splitwing.errors import ValidationError
from splitwing.ops import LayerParams
from splitwing.orchestrator import RunConfig, evaluate, train, train_monolithic


@pytest.fixture(scope="module")
def data64():
    return synthetic_dataset(64, 1)


def constant_server(bias):
    s = M.init_server(0, dtype=np.float64)
    return M.ServerModel(s.blocks, s.hidden, LayerParams(np.zeros((128, 1)), np.array([bias])), s.input_shape)


@pytest.mark.parametrize("kwargs", [
    dict(n_clients=3, ratio="7:2"), dict(epochs=0), dict(lr=0), dict(lr=-1.0), dict(batch=0),
    dict(n_clients=17, ratio=(1,) * 17), dict(transport="carrier-pigeon"), dict(precision="f16"),
])
def test_run_config_validation(kwargs):
    base = dict(n_clients=3, ratio=(1, 1, 1))
    base.update(kwargs)
    with pytest.raises(ValidationError):
        RunConfig(**base)


def test_run_config_defaults():
    c = RunConfig()
    assert (c.epochs, c.batch, c.lr, c.client_trainable, c.transport) == (50, 32, 0.01, False, "inprocess")


def test_one_epoch_on_32_samples_is_one_round(monkeypatch):
    calls = []
    real = TR.SplitServer.exchange

    def spy(self, rnd, train):
        calls.append((train, sum(rnd.sizes)))
        return real(self, rnd, train)

    monkeypatch.setattr(TR.SplitServer, "exchange", spy)
    cfg = RunConfig(n_clients=1, ratio=(1,), epochs=1, seed=0)
    result = train(cfg, synthetic_dataset(40, 2))  # 32 training samples after the 80/20 split
    assert [c for c in calls if c[0]] == [(True, 32)]
    assert len(result.history) == 1


def test_frozen_clients_unchanged_and_run_deterministic(data64):
    cfg = RunConfig(n_clients=3, ratio="7:2:1", epochs=2, seed=3)
    a = train(cfg, data64)
    ref = M.init_client(3)
    assert all(c.conv.kernels.tobytes() == ref.conv.kernels.tobytes() for c in a.clients)
    assert all(c.conv.bias.tobytes() == ref.conv.bias.tobytes() for c in a.clients)
    b = train(cfg, data64)
    assert a.history.to_csv() == b.history.to_csv()
    for r in a.history.records:
        assert 0 <= r.train_acc <= 1 and 0 <= r.test_acc <= 1
        assert r.train_loss >= 0 and r.test_loss >= 0


def test_trainable_f32_close_to_monolithic(data64):
    cfg = RunConfig(n_clients=3, ratio="7:2:1", epochs=2, seed=0, client_trainable=True)
    split = train(cfg, data64)
    mono = train_monolithic(cfg, data64)
    for c, first in zip(split.clients, mono.model.first):
        assert c.conv.allclose(first, atol=1e-4)
    for a, b in zip(split.server.params(), mono.model.server.params()):
        assert a.allclose(b, atol=1e-4)


def test_trainable_clients_diverge_from_each_other(data64):
    cfg = RunConfig(n_clients=2, ratio="3:1", epochs=1, seed=0, client_trainable=True, precision="f64")
    res = train(cfg, data64)
    assert not res.clients[0].conv.equal(res.clients[1].conv)
    assert not res.clients[0].conv.equal(M.init_client(0, dtype=np.float64).conv)


def test_monolithic_seed_sensitivity(data64):
    a = train_monolithic(RunConfig(n_clients=1, ratio=(1,), epochs=1, seed=0), data64)
    b = train_monolithic(RunConfig(n_clients=1, ratio=(1,), epochs=1, seed=1), data64)
    assert not a.model.server.hidden.equal(b.model.server.hidden)


def test_on_epoch_can_stop_early(data64):
    res = train(RunConfig(n_clients=1, ratio=(1,), epochs=10), data64, on_epoch=lambda r: r.epoch == 2)
    assert len(res.history) == 2


def test_metrics_csv_layout(data64):
    res = train_monolithic(RunConfig(n_clients=1, ratio=(1,), epochs=2), data64)
    lines = res.history.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,test_loss,test_acc,wall_ms"
    assert len(lines) == 3 and all(line.endswith(",0") for line in lines[1:])
    timed = res.history.to_csv(wall_clock=True).splitlines()
    assert timed[0] == lines[0]


# ---------------------------------------------------------------- evaluate

def ones_dataset(n, label):
    return Dataset(np.zeros((n, 64, 64, 1), np.float32), np.full(n, label, np.uint8))


def test_evaluate_all_correct():
    ds = ones_dataset(5, 1)
    shards = partition_by_ratio(ds, (1,), 0)
    loss, acc = evaluate([M.init_client(0, dtype=np.float64)], constant_server(40.0), ds, shards)
    assert acc == 1.0 and loss < 1e-6


def test_evaluate_tie_counts_as_flame():
    ds = ones_dataset(4, 1)
    shards = partition_by_ratio(ds, (1,), 0)
    _, acc = evaluate([M.init_client(0, dtype=np.float64)], constant_server(0.0), ds, shards)
    assert acc == 1.0
    _, acc0 = evaluate([M.init_client(0, dtype=np.float64)], constant_server(0.0), ones_dataset(4, 0),
                       shards)
    assert acc0 == 0.0


def test_evaluate_untrained_seed1_is_chance_level():
    ds = synthetic_dataset(100, 1)
    shards = partition_by_ratio(ds, (7, 2, 1), 1)
    _, acc = evaluate([M.init_client(1)] * 3, M.init_server(1), ds, shards)
    assert 0.3 <= acc <= 0.7


def test_evaluate_routes_by_owner():
    ds = ones_dataset(4, 1)
    shards = partition_by_ratio(ds, (1, 1), 0)
    zero = M.ClientModel(LayerParams(np.zeros((3, 3, 1, 16)), np.zeros(16)))
    server = constant_server(0.0)
    assert evaluate([zero, zero], server, ds, shards)[1] == 1.0
    with pytest.raises(ValidationError):
        evaluate([zero], server, ds, [shards[0]._replace(indices=np.array([], np.intp))])


def test_client_failure_is_reported(data64, monkeypatch):
    def broken(*a, **k):
        raise RuntimeError("sensor offline")

    monkeypatch.setattr(M, "client_forward", broken)
    with pytest.raises(Exception, match="sensor offline"):
        train(RunConfig(n_clients=2, ratio=(1, 1), epochs=1, timeout=5), data64)
