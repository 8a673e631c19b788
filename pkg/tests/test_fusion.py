import numpy as np
import pytest

from lorafuse.errors import (
    ContractError,
    DuplicateAdapterError,
    ParseError,
    RankMismatchError,
    RoutingError,
    UnknownAdapterError,
)
from lorafuse.fusion import (
    FusionPlan,
    LoraRegistry,
    batched_fused_forward,
    fused_forward,
    load_registry,
    plan_for_sentence,
    save_registry,
)
from lorafuse.lora import LoraAdapter, adapted_forward
from lorafuse.numerics import seeded_random_matrix

LAYER = "layer0.query"


def make_adapter(i, h=16, d=16, r=4, layers=(LAYER,), zero_b=False, scale=1.0):
    ad = LoraAdapter(f"a{i}", f"task{i}", rank=r, scale=scale)
    for li, name in enumerate(layers):
        a = seeded_random_matrix(h, r, 1000 + 10 * i + li)
        b = (np.zeros((r, d), dtype=np.float32) if zero_b
             else seeded_random_matrix(r, d, 2000 + 10 * i + li))
        ad.set_layer(name, a, b)
    return ad


def make_registry(n, **kw):
    reg = LoraRegistry()
    for i in range(n):
        reg.register(make_adapter(i, **kw))
    return reg


def naive_fused(x, base, registry, plan, layer):
    """Independent per-adapter loop oracle in float64."""
    y = (x.astype(np.float64)) @ (base.astype(np.float64))
    for slot, w in zip(plan.selected_slots, plan.weights):
        ad = registry.get_adapter(registry.adapter_ids[slot])
        a, b = ad.layer_deltas[layer]
        y = y + float(w) * ad.scale * (
            (x.astype(np.float64) @ a.astype(np.float64)) @ b.astype(np.float64)
        )
    return y


class TestRegister:
    def test_first_registration(self):
        reg = LoraRegistry()
        assert reg.register(make_adapter(0)) == 0
        assert reg.n == 1 and reg.uniform_rank == 4

    def test_pool_of_26(self):
        reg = make_registry(26)
        assert reg.n == 26
        for i in range(26):
            assert reg.slot_of_label(f"task{i}") == i
            assert reg.slot_of(f"a{i}") == i

    def test_duplicate_id_leaves_registry_unchanged(self):
        reg = make_registry(2)
        dup = make_adapter(0)
        with pytest.raises(DuplicateAdapterError):
            reg.register(dup)
        assert reg.n == 2 and reg.adapter_ids == ["a0", "a1"]

    def test_rank_mismatch_names_both_ranks(self):
        reg = make_registry(1, r=4)
        with pytest.raises(RankMismatchError, match="rank 2.*rank is 4"):
            reg.register(make_adapter(9, r=2))

    def test_layer_set_must_match(self):
        reg = make_registry(1)
        odd = make_adapter(9, layers=("layer1.key",))
        with pytest.raises(ContractError):
            reg.register(odd)


class TestRemove:
    def test_remove_middle(self):
        reg = make_registry(3)
        reg.remove("a1")
        assert reg.n == 2
        assert reg.slot_of("a0") == 0 and reg.slot_of("a2") == 1
        assert reg.slot_of_label("task2") == 1
        with pytest.raises(UnknownAdapterError):
            reg.slot_of("a1")

    def test_remove_last_resets_rank(self):
        reg = make_registry(1, r=4)
        reg.remove("a0")
        assert reg.n == 0 and reg.uniform_rank is None
        reg.register(make_adapter(5, r=2))  # any rank accepted again
        assert reg.uniform_rank == 2

    def test_remove_then_reregister(self):
        reg = make_registry(2)
        reg.remove("a0")
        reg.register(make_adapter(0))
        assert reg.n == 2 and reg.slot_of("a0") == 1

    def test_unknown_id(self):
        with pytest.raises(UnknownAdapterError):
            make_registry(1).remove("ghost")

    def test_random_mutation_sequence_slice_exact(self, rng):
        reg = LoraRegistry()
        live = {}
        serial = 0
        for _ in range(50):
            if live and rng.random() < 0.4:
                victim = sorted(live)[int(rng.integers(len(live)))]
                reg.remove(victim)
                del live[victim]
            else:
                ad = make_adapter(serial)
                reg.register(ad)
                live[ad.adapter_id] = ad
                serial += 1
        assert reg.n == len(live)
        for aid, ad in live.items():
            got = reg.get_adapter(aid)
            for name, (a, b) in ad.layer_deltas.items():
                assert np.array_equal(got.layer_deltas[name][0], a)
                assert np.array_equal(got.layer_deltas[name][1], b)


class TestFusedForward:
    def test_single_adapter_weight_one_matches_side_path(self, rng):
        reg = make_registry(4)
        x = rng.normal(0, 1, (3, 16)).astype(np.float32)
        base = seeded_random_matrix(16, 16, 7)
        plan = FusionPlan([2], np.array([1.0], dtype=np.float32))
        got = fused_forward(x, base, reg, plan, LAYER)
        want = adapted_forward(x, base, reg.get_adapter("a2"), LAYER)
        denom = max(np.abs(want).max(), 1e-6)
        assert np.abs(got - want).max() / denom < 1e-5

    def test_zero_b_gives_base_exactly(self, rng):
        reg = make_registry(3, zero_b=True)
        x = rng.normal(0, 1, (2, 16)).astype(np.float32)
        base = seeded_random_matrix(16, 16, 8)
        plan = FusionPlan([0, 1, 2], np.array([0.5, 0.3, 0.2], dtype=np.float32))
        np.testing.assert_array_equal(fused_forward(x, base, reg, plan, LAYER),
                                      x @ base)

    def test_against_naive_loop(self, rng):
        reg = make_registry(4)
        x = rng.normal(0, 1, (5, 16)).astype(np.float32)
        base = seeded_random_matrix(16, 16, 9)
        plan = FusionPlan([0, 3, 1], np.array([0.5, 0.3, 0.2], dtype=np.float32))
        got = fused_forward(x, base, reg, plan, LAYER)
        want = naive_fused(x, base, reg, plan, LAYER)
        denom = max(np.abs(want).max(), 1e-6)
        assert np.abs(got - want).max() / denom < 1e-5

    def test_invalid_slot(self):
        reg = make_registry(2)
        plan = FusionPlan([5], np.array([1.0], dtype=np.float32))
        with pytest.raises(ContractError):
            fused_forward(np.zeros((1, 16), dtype=np.float32),
                          seeded_random_matrix(16, 16, 1), reg, plan, LAYER)

    def test_shape_mismatch(self):
        reg = make_registry(2)
        plan = FusionPlan([0], np.array([1.0], dtype=np.float32))
        with pytest.raises(Exception):
            fused_forward(np.zeros((1, 9), dtype=np.float32),
                          seeded_random_matrix(9, 16, 1), reg, plan, LAYER)

    def test_convexity_endpoints(self, rng):
        reg = make_registry(2)
        x = rng.normal(0, 1, (2, 16)).astype(np.float32)
        base = seeded_random_matrix(16, 16, 11)
        only_first = fused_forward(
            x, base, reg, FusionPlan([0], np.array([1.0], dtype=np.float32)), LAYER
        )
        endpoint = fused_forward(
            x, base, reg, FusionPlan([0, 1], np.array([1.0, 0.0], dtype=np.float32)),
            LAYER,
        )
        np.testing.assert_allclose(endpoint, only_first, atol=1e-6)
        only_second = fused_forward(
            x, base, reg, FusionPlan([1], np.array([1.0], dtype=np.float32)), LAYER
        )
        endpoint2 = fused_forward(
            x, base, reg, FusionPlan([0, 1], np.array([0.0, 1.0], dtype=np.float32)),
            LAYER,
        )
        np.testing.assert_allclose(endpoint2, only_second, atol=1e-6)

    def test_output_continuous_in_weights(self, rng):
        reg = make_registry(2)
        x = rng.normal(0, 1, (2, 16)).astype(np.float32)
        base = seeded_random_matrix(16, 16, 12)
        eps = 1e-3
        y0 = fused_forward(
            x, base, reg, FusionPlan([0, 1], np.array([0.5, 0.5], dtype=np.float32)),
            LAYER,
        )
        y1 = fused_forward(
            x, base, reg,
            FusionPlan([0, 1], np.array([0.5 + eps, 0.5 - eps], dtype=np.float32)),
            LAYER,
        )
        # bounded by eps times the adapter output magnitudes
        bound = eps * 10 * max(np.abs(y0).max(), 1.0)
        assert np.abs(y1 - y0).max() < bound

    def test_gather_cache_follows_mutation(self, rng):
        reg = make_registry(3)
        x = rng.normal(0, 1, (1, 16)).astype(np.float32)
        base = seeded_random_matrix(16, 16, 13)
        plan = FusionPlan([0], np.array([1.0], dtype=np.float32))
        before = fused_forward(x, base, reg, plan, LAYER)
        reg.remove("a0")  # a2 swaps into slot 0
        after = fused_forward(x, base, reg, plan, LAYER)
        want = adapted_forward(x, base, reg.get_adapter("a2"), LAYER)
        np.testing.assert_allclose(after, want, atol=1e-6)
        assert not np.allclose(before, after)


class TestBatchedFusedForward:
    def test_identical_plans_match_independent_calls(self, rng):
        reg = make_registry(4)
        base = seeded_random_matrix(16, 16, 20)
        plan = FusionPlan([1, 2], np.array([0.6, 0.4], dtype=np.float32))
        xs = [(rng.normal(0, 1, (3, 16)).astype(np.float32), plan),
              (rng.normal(0, 1, (2, 16)).astype(np.float32), plan)]
        outs = batched_fused_forward(xs, base, reg, LAYER)
        for (x, p), got in zip(xs, outs):
            np.testing.assert_allclose(got, fused_forward(x, base, reg, p, LAYER),
                                       atol=1e-6)

    def test_disjoint_single_adapter_plans(self, rng):
        reg = make_registry(4)
        base = seeded_random_matrix(16, 16, 21)
        xs = [
            (rng.normal(0, 1, (2, 16)).astype(np.float32),
             FusionPlan([i], np.array([1.0], dtype=np.float32)))
            for i in range(4)
        ]
        outs = batched_fused_forward(xs, base, reg, LAYER)
        for i, ((x, _), got) in enumerate(zip(xs, outs)):
            want = adapted_forward(x, base, reg.get_adapter(f"a{i}"), LAYER)
            denom = max(np.abs(want).max(), 1e-6)
            assert np.abs(got - want).max() / denom < 1e-5

    def test_mixed_plan_sizes_match_sequential_oracle(self, rng):
        reg = make_registry(8)
        base = seeded_random_matrix(16, 16, 22)
        plans = [
            FusionPlan([3], np.array([1.0], dtype=np.float32)),
            FusionPlan([0, 5], np.array([0.7, 0.3], dtype=np.float32)),
            FusionPlan([1, 4, 6], np.array([0.5, 0.25, 0.25], dtype=np.float32)),
        ]
        xs = [(rng.normal(0, 1, (int(rng.integers(1, 4)), 16)).astype(np.float32), p)
              for p in plans]
        outs = batched_fused_forward(xs, base, reg, LAYER)
        for (x, p), got in zip(xs, outs):
            want = naive_fused(x, base, reg, p, LAYER)
            denom = max(np.abs(want).max(), 1e-6)
            assert np.abs(got - want).max() / denom < 1e-5


class TestPlanForSentence:
    def test_concentrated_single_slot(self):
        reg = make_registry(3)
        labels = [f"task{i}" for i in range(3)]
        plan = plan_for_sentence([0.98, 0.01, 0.01], 0.3, reg, 7, labels)
        assert plan.selected_slots == [0]
        np.testing.assert_allclose(plan.weights, [1.0])
        assert plan.source_sentence_index == 7
        np.testing.assert_allclose(plan.created_from, [0.98, 0.01, 0.01], atol=1e-6)

    def test_two_near_equal_tasks(self):
        reg = make_registry(3)
        labels = [f"task{i}" for i in range(3)]
        plan = plan_for_sentence([0.505, 0.49, 0.005], 0.3, reg, 0, labels)
        assert plan.selected_slots == [0, 1]
        np.testing.assert_allclose(plan.weights, [0.5, 0.5], atol=0.01)

    def test_missing_label(self):
        reg = make_registry(2)
        with pytest.raises(RoutingError, match="ghost"):
            plan_for_sentence([0.1, 0.9], 0.3, reg, 0, ["task0", "ghost"])

    def test_plan_invariants(self):
        with pytest.raises(ContractError):
            FusionPlan([], np.array([], dtype=np.float32))
        with pytest.raises(ContractError):
            FusionPlan([0, 0], np.array([0.5, 0.5], dtype=np.float32))
        with pytest.raises(ContractError):
            FusionPlan([0, 1], np.array([0.5, 0.4], dtype=np.float32))


class TestSnapshot:
    def test_roundtrip_preserves_order_and_values(self, tmp_path):
        reg = make_registry(5, layers=(LAYER, "layer1.value"))
        reg.remove("a2")  # exercise a swapped layout
        save_registry(reg, tmp_path / "snap")
        back = load_registry(tmp_path / "snap")
        assert back.adapter_ids == reg.adapter_ids
        assert back.uniform_rank == reg.uniform_rank
        for aid in reg.adapter_ids:
            w1 = reg.get_adapter(aid)
            w2 = back.get_adapter(aid)
            for name in w1.layer_names():
                assert np.array_equal(w1.layer_deltas[name][0],
                                      w2.layer_deltas[name][0])
                assert np.array_equal(w1.layer_deltas[name][1],
                                      w2.layer_deltas[name][1])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ParseError):
            load_registry(tmp_path)
