
import pytest

from splitnn import nn_core as nn
from splitnn.data import synthetic
from splitnn.engine import ClientData, FederatedTrainer, LargeBatchTrainer, SplitTrainer
from splitnn.errors import IncompatibleRuns
from splitnn.metering import (REFERENCE_GB, REFERENCE_TFLOPS, RunSummary, comparison_table,
                              format_reference_block, num_params, predict, predict_federated,
                              predict_largebatch, reconcile, weight_frame_bytes)
from splitnn.topology import build_plan

from oracles import mlp


def data(n=96, dims=784):
    s = synthetic(n, dims, 2, seed=1)
    return s.features, s.labels


def test_vanilla_cut_traffic_per_step():
    net = [nn.Dense(20, 16), nn.ReLU(), nn.Dense(16, 2), nn.SoftmaxCrossEntropy(2)]
    plan = build_plan("vanilla", net, [2], 1)
    pred = predict(plan, [32], 32, 1)
    c = pred["client0"]
    # activation out, gradient back: 2 * (16 + 4 + 8 + 32*16*4); labels: 16 + 4 + 2*32
    assert c.sent_by_type["ACTIVATION"] + c.received_by_type["GRADIENT"] == 4152
    assert c.sent_by_type["LABELS"] == 84
    assert c.bytes_sent + c.bytes_received == 4152 + 84


def test_client_segment_flops_per_step():
    net = [nn.Dense(784, 128), nn.ReLU(), nn.Dense(128, 2), nn.SoftmaxCrossEntropy(2)]
    pred = predict(build_plan("vanilla", net, [2], 1), [32], 32, 1)
    assert pred["client0"].flops_forward == (200704 + 128) * 32
    assert pred["client0"].flops_backward == (401408 + 128) * 32


def test_weight_frame_bytes_formula():
    net = mlp([784, 64], 2)
    p = 784 * 64 + 64 + 64 * 2 + 2
    assert num_params(net) == p
    # header + per tensor (rank + dims) + 4 bytes per value
    assert weight_frame_bytes(net) == 16 + 4 * p + (4 + 8) + (4 + 4) + (4 + 8) + (4 + 4)


def test_federated_prediction_matches_measurement():
    x, y = data(90, 20)
    net = mlp([20, 8], 2)
    fed = FederatedTrainer(net, [ClientData(x[:50], y[:50]), ClientData(x[50:], y[50:])], batch=16)
    fed.run_round()
    pred = predict_federated(net, (20,), [50, 40], 16, 1)
    assert reconcile(fed.ledgers, pred) == []
    assert fed.ledgers["client0"].bytes_sent == weight_frame_bytes(net)
    assert fed.ledgers["client0"].bytes_received == weight_frame_bytes(net)


def test_largebatch_prediction_matches_measurement():
    x, y = data(90, 20)
    net = mlp([20, 8], 2)
    lb = LargeBatchTrainer(net, [ClientData(x[:50], y[:50]), ClientData(x[50:], y[50:])], batch=16)
    lb.run_epoch()
    assert reconcile(lb.ledgers, predict_largebatch(net, (20,), [50, 40], 16, 1)) == []


def vanilla_run():
    x, y = data(96, 30)
    plan = build_plan("vanilla", mlp([30, 8], 2), [2], 2)
    trainer = SplitTrainer(plan, [ClientData(x[:48], y[:48]), ClientData(x[48:], y[48:])], batch=16)
    trainer.run_epoch()
    return plan, trainer


def test_reconcile_passes_on_a_real_run():
    plan, trainer = vanilla_run()
    assert reconcile(trainer.ledgers, predict(plan, [48, 48], 16, 1)) == []


def test_reconcile_names_tampered_counter():
    plan, trainer = vanilla_run()
    trainer.ledgers["server"].bytes_received += 1
    diffs = reconcile(trainer.ledgers, predict(plan, [48, 48], 16, 1))
    assert [(d.role, d.counter) for d in diffs] == [("server", "bytes_received")]
    assert "server.bytes_received" in str(diffs[0])


def test_reconcile_flags_wrong_batch_size_with_first_step():
    plan, trainer = vanilla_run()
    diffs = reconcile(trainer.ledgers, predict(plan, [48, 48], 12, 1))
    assert diffs
    assert min(d.first_divergent_step for d in diffs if d.first_divergent_step is not None) == 0


def test_split_client_flops_ratio_is_segment_over_network():
    x, y = data(64, 30)
    net = mlp([30, 16], 2)
    shards = [ClientData(x[:32], y[:32]), ClientData(x[32:], y[32:])]
    split = SplitTrainer(build_plan("vanilla", net, [2], 2), shards, batch=16)
    split.run_epoch()
    fed = FederatedTrainer(net, shards, batch=16)
    fed.run_round()
    client = (2 * 30 * 16 + 16) + (4 * 30 * 16 + 16)
    full = client + (2 * 16 * 2 + 5 * 2) + 4 * 16 * 2
    assert split.ledgers["client0"].flops * full == fed.ledgers["client0"].flops * client


def test_reference_values():
    assert REFERENCE_TFLOPS["splitnn"] == (0.1548, 0.03)
    assert REFERENCE_TFLOPS["largebatch"][0] == REFERENCE_TFLOPS["federated"][0] == 29.4
    assert REFERENCE_GB["largebatch"][0] == 13 and REFERENCE_GB["federated"][0] == 3
    assert REFERENCE_GB["splitnn"] == (6, 1.2)
    block = format_reference_block()
    for v in ("0.1548", "0.03", "29.4", "6", "1.2", "not reproduced"):
        assert v in block


def test_comparison_table_refuses_mismatched_runs():
    a = RunSummary("a", "splitnn", "vanilla", "d1", 2, {"c": 1}, {"c": 1}, {"c": 1})
    b = RunSummary("b", "federated", "-", "d2", 2, {"c": 1}, {"c": 1}, {"c": 1})
    with pytest.raises(IncompatibleRuns):
        comparison_table([a, b])
    rows = comparison_table([a, RunSummary("b", "federated", "-", "d1", 2, {"c": 5, "d": 6}, {"c": 0, "d": 0},
                                           {"c": 10**9, "d": 0})])
    assert rows[1]["per_client_flops"] * 2 == 11 and rows[1]["per_client_gb"] * 2 == 1
