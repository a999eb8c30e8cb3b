import math

import numpy as np
import pytest

from fedpr.data import ClientShard, Dataset
from fedpr.errors import DimensionError
from fedpr.nn import LayerParams, ModelParams, build_mlp2, model_forward
from fedpr.prototypes import (
    GlobalPrototypeSet,
    Prototype,
    aggregate_global_prototypes,
    compute_local_prototypes,
    proto_distance,
)


def identity_extractor(dim, num_classes=2):
    rng = np.random.default_rng(100)
    return ModelParams(
        [
            LayerParams("fe", "dense", np.eye(dim), np.zeros(dim)),
            LayerParams("fd", "dense", rng.normal(size=(num_classes, dim)), np.zeros(num_classes)),
        ],
        1,
    )


# --- local prototypes -------------------------------------------------------


def test_single_sample_prototype_is_its_embedding():
    params = identity_extractor(3)
    ds = Dataset(np.array([[0.5, -1.0, 2.0]]), np.array([2]), 3)
    protos = compute_local_prototypes(params, ds, ClientShard(0, [0]))
    assert len(protos) == 1
    assert protos[0].class_id == 2 and protos[0].support == 1
    assert np.array_equal(protos[0].vector, ds.images[0])


def test_opposite_embeddings_cancel():
    params = identity_extractor(4)
    x = np.array([1.0, -2.0, 3.0, 0.5])
    ds = Dataset(np.stack([x, -x]), np.array([0, 0]), 1)
    protos = compute_local_prototypes(params, ds, ClientShard(0, [0, 1]))
    assert np.array_equal(protos[0].vector, np.zeros(4))
    assert protos[0].support == 2


def test_local_prototypes_match_bruteforce_mean():
    rng = np.random.default_rng(101)
    params = build_mlp2(rng, 6, 2, hidden=7)
    images = rng.normal(size=(5, 6))
    labels = np.array([0, 1, 0, 1, 0])
    ds = Dataset(images, labels, 2)
    protos = compute_local_prototypes(params, ds, ClientShard(0, np.arange(5)))
    emb, _ = model_forward(params, images)
    for proto in protos:
        expect = emb[labels == proto.class_id].sum(axis=0) / proto.support
        assert np.abs(proto.vector - expect).max() <= 1e-12


def test_prototypes_recombine_across_disjoint_split():
    rng = np.random.default_rng(102)
    params = build_mlp2(rng, 5, 3, hidden=6)
    images = rng.normal(size=(12, 5))
    labels = rng.integers(0, 3, size=12)
    ds = Dataset(images, labels, 3)
    full = {p.class_id: p for p in compute_local_prototypes(params, ds, ClientShard(0, np.arange(12)))}
    left = {p.class_id: p for p in compute_local_prototypes(params, ds, ClientShard(0, np.arange(6)))}
    right = {p.class_id: p for p in compute_local_prototypes(params, ds, ClientShard(0, np.arange(6, 12)))}
    for cls, proto in full.items():
        num = np.zeros_like(proto.vector)
        den = 0
        for part in (left, right):
            if cls in part:
                num += part[cls].support * part[cls].vector
                den += part[cls].support
        assert den == proto.support
        assert np.abs(num / den - proto.vector).max() <= 1e-10


def test_empty_shard_rejected():
    params = identity_extractor(2)
    ds = Dataset(np.zeros((3, 2)), np.zeros(3, dtype=np.int64), 1)
    with pytest.raises(ValueError, match="empty"):
        compute_local_prototypes(params, ds, ClientShard(4, []))


def test_prototype_support_validation():
    with pytest.raises(ValueError, match="support"):
        Prototype(0, np.zeros(3), 0)


# --- aggregation ------------------------------------------------------------


def test_single_client_aggregation_is_identity():
    protos = [Prototype(0, np.array([1.0, 2.0]), 3), Prototype(2, np.array([0.0, -1.0]), 1)]
    agg = aggregate_global_prototypes([protos])
    assert agg.classes() == [0, 2]
    assert np.array_equal(agg.entries[0].vector, [1.0, 2.0])
    assert np.array_equal(agg.entries[2].vector, [0.0, -1.0])
    assert agg.entries[0].contributors == 1


def test_identical_vectors_average_to_themselves():
    v = np.array([0.3, -0.7, 1.1])
    clients = [[Prototype(1, v.copy(), 2)] for _ in range(3)]
    agg = aggregate_global_prototypes(clients)
    assert np.allclose(agg.entries[1].vector, v, atol=1e-15)
    assert agg.entries[1].contributors == 3


def test_hand_mean_over_three_clients():
    clients = [
        [Prototype(4, np.array([1.0, 0.0]), 1)],
        [Prototype(4, np.array([0.0, 1.0]), 1)],
        [Prototype(4, np.array([1.0, 1.0]), 1)],
    ]
    agg = aggregate_global_prototypes(clients)
    assert np.allclose(agg.entries[4].vector, [2 / 3, 2 / 3], atol=1e-15)
    assert agg.entries[4].contributors == 3


def test_aggregation_exactly_permutation_invariant():
    rng = np.random.default_rng(103)
    clients = [
        [Prototype(int(c), rng.normal(size=4), int(rng.integers(1, 6)))
         for c in rng.choice(5, size=3, replace=False)]
        for _ in range(5)
    ]
    ids = list(range(5))
    base = aggregate_global_prototypes(clients, client_ids=ids)
    perm = [3, 0, 4, 2, 1]
    shuffled = aggregate_global_prototypes(
        [clients[i] for i in perm], client_ids=[ids[i] for i in perm]
    )
    assert base.classes() == shuffled.classes()
    for cls in base.classes():
        assert np.array_equal(base.entries[cls].vector, shuffled.entries[cls].vector)


def test_aggregate_mean_stays_in_coordinate_hull():
    rng = np.random.default_rng(104)
    vectors = [rng.normal(size=3) for _ in range(3)]
    clients = [[Prototype(0, v, 1)] for v in vectors]
    agg = aggregate_global_prototypes(clients)
    stacked = np.stack(vectors)
    assert np.all(agg.entries[0].vector >= stacked.min(axis=0) - 1e-12)
    assert np.all(agg.entries[0].vector <= stacked.max(axis=0) + 1e-12)


def test_all_clients_denominator_literal_form():
    clients = [
        [Prototype(0, np.array([2.0, 2.0]), 1)],
        [Prototype(1, np.array([4.0, 0.0]), 1)],
    ]
    agg = aggregate_global_prototypes(clients, denominator="all_clients")
    # class 0 reported by 1 of 2 clients: sum / N shrinks it
    assert np.array_equal(agg.entries[0].vector, [1.0, 1.0])
    assert np.array_equal(agg.entries[1].vector, [2.0, 0.0])


def test_support_weighted_mean():
    clients = [
        [Prototype(0, np.array([0.0]), 1)],
        [Prototype(0, np.array([4.0]), 3)],
    ]
    agg = aggregate_global_prototypes(clients, support_weighted=True)
    assert agg.entries[0].vector[0] == pytest.approx(3.0, abs=1e-15)


def test_aggregation_dimension_mismatch():
    clients = [[Prototype(0, np.zeros(3), 1)], [Prototype(0, np.zeros(4), 1)]]
    with pytest.raises(DimensionError):
        aggregate_global_prototypes(clients)


def test_aggregation_rejects_unknown_denominator():
    with pytest.raises(ValueError, match="denominator"):
        aggregate_global_prototypes([], denominator="median")


# --- distance ---------------------------------------------------------------


def test_distance_identical_vectors_zero():
    v = np.array([1.0, -2.0, 0.5])
    assert proto_distance(v, v) == 0.0


def test_distance_three_four_five():
    squared = proto_distance(np.array([0.0, 0.0]), np.array([3.0, 4.0]))
    assert squared == 25.0
    assert math.sqrt(squared) == pytest.approx(5.0, abs=1e-15)


def test_distance_matches_sum_oracle():
    rng = np.random.default_rng(105)
    a, b = rng.normal(size=8), rng.normal(size=8)
    expect = sum((x - y) ** 2 for x, y in zip(a, b))
    assert abs(proto_distance(a, b) - expect) <= 1e-12


def test_distance_dimension_mismatch():
    with pytest.raises(DimensionError):
        proto_distance(np.zeros(3), np.zeros(4))


def test_squared_and_unsquared_share_argmin():
    rng = np.random.default_rng(106)
    for _ in range(20):
        emb = rng.normal(size=5)
        protos = [rng.normal(size=5) for _ in range(4)]
        squared = [proto_distance(emb, p) for p in protos]
        unsquared = [math.sqrt(d) for d in squared]
        assert int(np.argmin(squared)) == int(np.argmin(unsquared))


# --- serialization ----------------------------------------------------------


def test_global_set_json_roundtrip():
    entries = aggregate_global_prototypes(
        [[Prototype(0, np.array([0.25, -1.5]), 2), Prototype(3, np.array([1.0, 0.0]), 1)]],
        round_index=7,
    )
    payload = entries.to_json_dict()
    assert payload["round"] == 7
    assert set(payload["classes"]) == {"0", "3"}
    assert payload["classes"]["0"] == {"vector": [0.25, -1.5], "contributors": 1}
    restored = GlobalPrototypeSet.from_json(entries.to_json())
    assert restored.round_index == 7
    assert restored.classes() == entries.classes()
    for cls in entries.classes():
        assert np.array_equal(restored.entries[cls].vector, entries.entries[cls].vector)
        assert restored.entries[cls].contributors == entries.entries[cls].contributors


def test_empty_set_basics():
    empty = GlobalPrototypeSet.empty(0)
    assert len(empty) == 0
    assert 3 not in empty
    assert empty.class_vectors() == {}
