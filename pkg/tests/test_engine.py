import logging

import numpy as np
import pytest

from splitnn import nn_core as nn
from splitnn.data import synthetic
from splitnn.engine import (ClientData, FederatedTrainer, LargeBatchTrainer, MonolithicNet, SplitTrainer,
                            fedavg, make_states, run_split_epoch, run_split_step, segment_weights)
from splitnn.metering import StepSlot
from splitnn.protocol import FrameType
from splitnn.topology import build_plan, name_layers

from oracles import ReferenceMLP, mlp


def blobs(n=200, dims=10, classes=2, seed=0):
    s = synthetic(n, dims, classes, seed)
    return s.features, s.labels


def shards(x, y, k):
    parts = np.array_split(np.arange(len(y)), k)
    return [ClientData(x[p], y[p]) for p in parts]


def vanilla(k=1, widths=(10, 16), classes=2, **kw):
    return build_plan("vanilla", mlp(list(widths), classes), [2], k, **kw)


def initial_params(trainer):
    ws = segment_weights([trainer.runtimes[s.owner if not s.replicated else trainer.plan.clients[0]].states[s.id]
                          for s in trainer.plan.segments])
    return [(ws[i].astype(np.float64), ws[i + 1].astype(np.float64)) for i in range(0, len(ws), 2)]


def test_vanilla_matches_reference_mlp():
    x, y = blobs()
    trainer = SplitTrainer(vanilla(), [ClientData(x, y)], lr=0.1, seed=3, batch=20)
    ref = ReferenceMLP(initial_params(trainer))
    for epoch in range(5):
        for r in trainer.run_epoch():
            lo = (r.step % 10) * 20
            expected = ref.step(x[lo:lo + 20].astype(np.float64), y[lo:lo + 20], 0.1)
            assert r.loss == pytest.approx(expected, abs=1e-5)


def test_zero_learning_rate_leaves_weights_and_matches_untrained_losses():
    x, y = blobs()
    trainer = SplitTrainer(vanilla(), [ClientData(x, y)], lr=0.0, seed=1, batch=32)
    before = [w.copy() for w in trainer.client_weights("client0")]
    server = [w.copy() for st in trainer.runtimes["server"].states["server.body"] for w in st.weights]
    mono = MonolithicNet.from_plan(trainer.plan, seed=1)
    for i in range(3):
        r = run_split_step(trainer, StepSlot(0, 0, 32 * i, 32 * i + 32))
        assert r.loss == mono.train_step(x[32 * i:32 * i + 32], y[32 * i:32 * i + 32], 0.0)[0]
    for a, b in zip(before, trainer.client_weights("client0")):
        np.testing.assert_array_equal(a, b)
    after = [w for st in trainer.runtimes["server"].states["server.body"] for w in st.weights]
    for a, b in zip(server, after):
        np.testing.assert_array_equal(a, b)


def test_three_clients_one_batch_each_make_two_handoffs():
    x, y = blobs(96)
    trainer = SplitTrainer(vanilla(3), shards(x, y, 3), batch=32)
    reports = run_split_epoch(trainer)
    assert len(reports) == 3 and trainer.handoffs == 2
    assert [r.handoff for r in reports] == [False, True, True]


def test_identical_shards_match_one_client_on_the_interleaved_shard():
    x, y = blobs(64)
    two = SplitTrainer(vanilla(2), [ClientData(x, y), ClientData(x, y)], lr=0.1, seed=5, batch=32)
    two.run_epoch()
    order = np.concatenate([np.arange(0, 32), np.arange(0, 32), np.arange(32, 64), np.arange(32, 64)])
    one = SplitTrainer(vanilla(1), [ClientData(x[order], y[order])], lr=0.1, seed=5, batch=32)
    one.run_epoch()
    for a, b in zip(two.client_weights(two.last_client), one.client_weights("client0")):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(segment_weights([two.runtimes["server"].states["server.body"]]),
                    segment_weights([one.runtimes["server"].states["server.body"]])):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("sync_mode", ["server", "p2p"])
def test_sync_modes_agree(sync_mode):
    x, y = blobs(150)
    trainer = SplitTrainer(vanilla(3), shards(x, y, 3), sync_mode=sync_mode, lr=0.1, seed=2, batch=16)
    losses = [r.loss for r in trainer.run_epoch()]
    ref = SplitTrainer(vanilla(3), shards(x, y, 3), sync_mode="server", lr=0.1, seed=2, batch=16)
    assert losses == [r.loss for r in ref.run_epoch()]
    types = {e.frame_type for e in trainer.fabric.transcript if "coordinator" in (e.src, e.dst)}
    assert types == ({FrameType.WEIGHTS} if sync_mode == "server" else set())


def test_disabled_sync_lets_clients_diverge():
    x, y = blobs(128)
    trainer = SplitTrainer(vanilla(2), shards(x, y, 2), sync_mode=None, lr=0.1, batch=32)
    trainer.run_epoch()
    a, b = trainer.client_weights("client0"), trainer.client_weights("client1")
    assert any(not np.array_equal(p, q) for p, q in zip(a, b))
    assert trainer.handoffs == 0


def test_turn_ended_early_is_reported():
    x, y = blobs(100)
    trainer = SplitTrainer(vanilla(2), shards(x, y, 2), batches_per_turn=2, batch=20)
    reports = trainer.run_epoch()
    assert [(r.client, r.batch) for r in reports] == [
        ("client0", 20), ("client0", 20), ("client1", 20), ("client1", 20), ("client0", 10), ("client1", 10)]
    assert [r.turn_ended_early for r in reports] == [False] * 4 + [True] * 2


def test_ushaped_keeps_labels_and_matches_monolithic():
    x, y = blobs()
    net = [nn.Dense(10, 16), nn.ReLU(), nn.Dense(16, 16), nn.ReLU(), nn.Dense(16, 2), nn.SoftmaxCrossEntropy(2)]
    plan = build_plan("ushaped", net, [2, 4], 1)
    trainer = SplitTrainer(plan, [ClientData(x, y)], lr=0.1, seed=4, batch=25)
    mono = MonolithicNet.from_plan(plan, seed=4)
    for r in trainer.run_epoch():
        lo = r.step * 25
        assert r.loss == mono.train_step(x[lo:lo + 25], y[lo:lo + 25], 0.1)[0]
    assert all(e.frame_type != FrameType.LABELS for e in trainer.fabric.transcript)


def test_vertical_matches_monolithic():
    x, y = blobs(120, dims=10)
    towers = [[nn.Dense(4, 8), nn.ReLU()], [nn.Dense(6, 8), nn.ReLU()]]
    plan = build_plan("vertical", [nn.Concat(2), nn.Dense(16, 2), nn.SoftmaxCrossEntropy(2)], [], 2, towers=towers)
    data = [ClientData(x[:, :4], y), ClientData(x[:, 4:])]
    trainer = SplitTrainer(plan, data, lr=0.1, seed=6, batch=30)
    mono = MonolithicNet.from_plan(plan, seed=6)
    for _ in range(3):
        for r in trainer.run_epoch():
            lo = (r.step % 4) * 30
            assert r.loss == mono.train_step(x[lo:lo + 30], y[lo:lo + 30], 0.1)[0]


def test_split_evaluate_equals_monolithic_evaluate():
    x, y = blobs()
    trainer = SplitTrainer(vanilla(), [ClientData(x, y)], lr=0.1, seed=8, batch=32)
    mono = MonolithicNet.from_plan(trainer.plan, seed=8)
    for _ in range(3):
        for lo in range(0, 200, 32):
            mono.train_step(x[lo:lo + 32], y[lo:lo + 32], 0.1)
        trainer.run_epoch()
    sent = trainer.ledgers["client0"].bytes_sent
    assert trainer.evaluate(x, y) == mono.evaluate(x, y)
    np.testing.assert_array_equal(trainer.predict(x)[0], mono.logits(x)[0])
    assert trainer.ledgers["client0"].bytes_sent == sent


def test_untrained_accuracy_is_near_chance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1000, 10)).astype(np.float32)
    y = np.repeat([0, 1], 500)
    for seed in range(10):
        trainer = SplitTrainer(vanilla(), [ClientData(x, y)], seed=seed)
        assert 0.40 <= trainer.evaluate(x, y)[0] <= 0.60


def test_separable_set_reaches_full_accuracy():
    x, y = blobs(200, dims=4, seed=2)
    trainer = SplitTrainer(vanilla(widths=(4, 8)), [ClientData(x, y)], lr=0.2, batch=20)
    for _ in range(20):
        trainer.run_epoch()
    assert trainer.evaluate(x, y) == [1.0]


def test_fedavg_weighted_mean():
    out = fedavg([[np.array([1.0], np.float32)], [np.array([4.0], np.float32)]], [10, 30])
    assert out[0].tolist() == [3.25]


def test_fedavg_of_equal_weights_is_identity():
    w = [np.random.default_rng(1).normal(size=(3, 2)).astype(np.float32)]
    np.testing.assert_array_equal(fedavg([w, w], [7, 9])[0], w[0])


def test_federated_single_client_equals_local_training():
    x, y = blobs(100)
    net = mlp([10, 8], 2)
    fed = FederatedTrainer(net, [ClientData(x, y)], local_epochs=2, lr=0.1, seed=9, batch=16)
    fed.run_round()
    local = make_states(name_layers(net), 9)
    for _ in range(2):
        for lo in range(0, 100, 16):
            mono = MonolithicNet(net, seed=9)
            mono.trunk = local
            mono.train_step(x[lo:lo + 16], y[lo:lo + 16], 0.1)
    for a, b in zip(segment_weights([fed.global_model]), segment_weights([local])):
        np.testing.assert_array_equal(a, b)


def test_federated_skips_empty_shard(caplog):
    x, y = blobs(40)
    fed = FederatedTrainer(mlp([10, 8], 2), [ClientData(x, y), ClientData(x[:0], y[:0])], batch=16)
    with caplog.at_level(logging.WARNING):
        fed.run_round()
    assert "client1" in caplog.text
    assert fed.ledgers["client1"].bytes_sent == 0


def test_largebatch_single_client_is_plain_sgd():
    x, y = blobs(64)
    net = mlp([10, 8], 2)
    lb = LargeBatchTrainer(net, [ClientData(x, y)], lr=0.1, seed=3, batch=32)
    lb.run_epoch()
    mono = MonolithicNet(net, seed=3)
    mono.trunk = make_states(name_layers(net), 3)
    for lo in (0, 32):
        mono.train_step(x[lo:lo + 32], y[lo:lo + 32], 0.1)
    for a, b in zip(segment_weights([lb.global_model]), mono.all_weights()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)


def test_largebatch_identical_batches_match_one_client():
    x, y = blobs(64)
    net = mlp([10, 8], 2)
    one = LargeBatchTrainer(net, [ClientData(x, y)], lr=0.1, seed=3, batch=32)
    two = LargeBatchTrainer(net, [ClientData(x, y)] * 2, lr=0.1, seed=3, batch=32)
    three = LargeBatchTrainer(net, [ClientData(x, y)] * 3, lr=0.1, seed=3, batch=32)
    for t in (one, two, three):
        t.run_epoch()
    for a, b, c in zip(*(segment_weights([t.global_model]) for t in (one, two, three))):
        np.testing.assert_array_equal(a, b)
        # (g + g + g) / 3 rounds in float32, so three copies agree to within an ulp
        np.testing.assert_allclose(a, c, rtol=0, atol=1e-7)


def test_largebatch_zero_lr_still_meters_gradients():
    x, y = blobs(64)
    lb = LargeBatchTrainer(mlp([10, 8], 2), shards(x, y, 2), lr=0.0, batch=32)
    before = segment_weights([lb.global_model])
    lb.run_epoch()
    for a, b in zip(before, segment_weights([lb.global_model])):
        np.testing.assert_array_equal(a, b)
    assert lb.ledgers["client0"].sent_by_type["GRADIENT"] > 0
