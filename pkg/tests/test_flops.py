import pytest

from eevo import flops
from eevo.decoder import generate
from eevo.errors import InvalidInputError
from eevo.flops import FlopsLedger, expected_confidence_flops, projection_cost

from conftest import make_policy


class TestLedger:
    def test_record_zero(self):
        ledger = FlopsLedger()
        ledger.record("ffn", 0)
        assert ledger.total == 0

    def test_accumulates(self):
        ledger = FlopsLedger()
        ledger.record("attention", 5).record("attention", 5)
        assert ledger.counters["attention"] == 10

    def test_unknown_category(self):
        with pytest.raises(InvalidInputError):
            FlopsLedger().record("embedding", 1)

    def test_negative(self):
        with pytest.raises(InvalidInputError):
            FlopsLedger().record("ffn", -1)

    def test_per_token_subtotals(self):
        ledger = FlopsLedger()
        ledger.record("ffn", 3)
        ledger.begin_token()
        ledger.record("ffn", 4)
        ledger.record("topk_select", 1)
        ledger.end_token()
        assert ledger.per_token == [dict.fromkeys(flops.CATEGORIES, 0) | {"ffn": 4, "topk_select": 1}]
        assert ledger.total == 8

    def test_merge(self):
        a, b = FlopsLedger(), FlopsLedger()
        a.record("ffn", 2)
        b.record("ffn", 3)
        assert a.merge(b).counters["ffn"] == 5


class TestProjectionCost:
    def test_t5_large_full_vocabulary(self):
        assert projection_cost(32128, 1024) == 65_798_144

    def test_pruned(self):
        assert projection_cost(64, 1024) == 131_072

    def test_unit(self):
        assert projection_cost(1, 1) == 2

    def test_invalid(self):
        with pytest.raises(InvalidInputError):
            projection_cost(0, 4)


class TestExpectedConfidenceFlops:
    V, D = 6400, 32

    def test_full_formula(self):
        policy = make_policy(p=None)
        got = expected_confidence_flops(policy, [3, 5], self.V, self.D, breakdown=True)
        assert got["confidence_projection"] == 2 * self.D * self.V * 8
        assert got["confidence_softmax"] == 5 * self.V * 8
        assert got["confidence_measure"] == self.V * 8
        assert got["topk_select"] == 0

    def test_dvp_formula(self):
        policy = make_policy(p=2, K=64)
        got = expected_confidence_flops(policy, [1, 2, 7], self.V, self.D, breakdown=True)
        rows = self.V * (1 + 2 + 2) + 64 * 5
        assert got["confidence_projection"] == 2 * self.D * rows
        assert got["topk_select"] == self.V  # only the token that went past p

    @pytest.mark.parametrize("exit_layer", [1, 2])
    def test_no_pruning_before_p(self, exit_layer):
        policy = make_policy(p=2, K=64)
        assert expected_confidence_flops(policy, [exit_layer], self.V, self.D) == expected_confidence_flops(
            policy, [exit_layer], self.V, self.D, mode="full"
        )

    def test_ratio_closed_form(self):
        # every token exits at 20, p=2, K=64: ratio is l*V / (p*V + (l-p)*K)
        policy = make_policy(p=2, K=64)
        exits = [20] * 10
        full = expected_confidence_flops(policy, exits, self.V, self.D, mode="full", breakdown=True)
        dvp = expected_confidence_flops(policy, exits, self.V, self.D, breakdown=True)
        ratio = full["confidence_projection"] / dvp["confidence_projection"]
        assert ratio == pytest.approx(20 * 6400 / (2 * 6400 + 18 * 64), rel=1e-12)

    def test_dominance(self):
        policy = make_policy(p=2, K=64)
        for exits in ([1, 1], [2, 1], [3, 8], [8, 8, 5]):
            full = expected_confidence_flops(policy, exits, self.V, self.D, mode="full")
            dvp = expected_confidence_flops(policy, exits, self.V, self.D)
            if max(exits) <= 2:
                assert dvp == full
            else:
                assert dvp < full

    def test_equal_when_k_is_vocab(self):
        policy = make_policy(p=1, K=self.V)
        got = expected_confidence_flops(policy, [4], self.V, self.D, breakdown=True)
        full = expected_confidence_flops(policy, [4], self.V, self.D, mode="full", breakdown=True)
        assert got["confidence_projection"] == full["confidence_projection"]

    def test_bad_exit(self):
        with pytest.raises(InvalidInputError):
            expected_confidence_flops(make_policy(), [0], self.V, self.D)
        with pytest.raises(InvalidInputError):
            expected_confidence_flops(make_policy(), [9], self.V, self.D, L=8)

    def test_dvp_needs_prune_exit(self):
        with pytest.raises(InvalidInputError):
            expected_confidence_flops(make_policy(p=None), [2], self.V, self.D, mode="dvp")


@pytest.mark.parametrize("mode", ["full", "dvp"])
@pytest.mark.parametrize("lam", [0.2, 0.6, 0.9])
def test_ledger_matches_closed_form(small_model, mode, lam):
    c = small_model.config
    policy = make_policy(lam=lam, p=2, K=16, N=10)
    r = generate(small_model, [4, 8, 15], policy, mode)
    want = expected_confidence_flops(policy, r.exit_layers, c.d_vocab, c.d_model, mode=mode, breakdown=True)
    for category, value in want.items():
        assert r.ledger.counters[category] == value


def test_flops_per_token_is_total_over_tokens(small_model):
    r = generate(small_model, [1, 2], make_policy(N=6), "dvp")
    assert r.flops_per_token == r.ledger.total / 6
    assert sum(sum(t.values()) for t in r.ledger.per_token) == r.ledger.total
    assert r.prompt_ledger.total > 0 and r.prompt_ledger.confidence_total == 0


def test_state_propagation_count(small_model):
    c = small_model.config
    r = generate(small_model, [1, 2], make_policy(lam=0.0, N=3), "full")
    assert r.exit_layers == [1, 1, 1]
    assert r.ledger.counters["state_propagation"] == 3 * (c.L - 1) * flops.kv_fill_cost(c)
