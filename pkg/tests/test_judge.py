import json
import random

import pytest

from decompeval import judge
from decompeval.errors import (
    DegenerateMarginals,
    EmptyCandidateSet,
    LengthMismatch,
    MalformedResponse,
    MissingCriterion,
    PairMismatch,
    UnknownLabel,
    UnregisteredDecompiler,
)
from decompeval.judge import (
    ALL_CRITERIA,
    Criterion,
    EloState,
    MockJudge,
    Outcome,
    PairOrder,
    build_comparison,
    cohen_kappa,
    debias_pair,
    parse_verdict,
    proximity_probabilities,
    sample_opponent,
    update_elo,
    update_single,
)


def make_state(ratings, seed=0, k=32.0):
    state = EloState(rng_seed=seed, k_factor=k)
    for d, r in ratings.items():
        state.register(d)
        state.ratings[d] = r
    return state


class TestProximitySampling:
    def test_single_candidate_gets_probability_one(self):
        state = make_state({"a": 1200.0, "b": 1200.0})
        probs = proximity_probabilities(state, "a", ["b"])
        assert probs == {"b": 1.0}

    def test_hand_computed_two_candidate_table(self):
        # min gap is 10, so P(b) = 1/(1+10/10) ~ 0.5 and
        # P(c) = 1/(1+200/10) ~ 0.047619; normalized 0.9130 / 0.08696.
        state = make_state({"a": 1000.0, "b": 1010.0, "c": 1200.0})
        probs = proximity_probabilities(state, "a", ["b", "c"])
        assert probs["b"] == pytest.approx(0.9130, abs=5e-4)
        assert probs["c"] == pytest.approx(0.08696, abs=5e-4)
        assert sum(probs.values()) == pytest.approx(1.0, abs=1e-9)

    def test_equal_rated_candidates_split_evenly(self):
        state = make_state({"a": 1000.0, "b": 1100.0, "c": 1100.0, "d": 1100.0})
        probs = proximity_probabilities(state, "a", ["b", "c", "d"])
        for p in probs.values():
            assert p == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_probability_decreases_with_rating_gap(self):
        state = make_state({"a": 1000.0, "b": 1010.0, "c": 1050.0, "d": 1400.0})
        probs = proximity_probabilities(state, "a", ["b", "c", "d"])
        assert probs["b"] > probs["c"] > probs["d"]

    def test_empty_candidate_set_rejected(self):
        state = make_state({"a": 1000.0})
        with pytest.raises(EmptyCandidateSet):
            proximity_probabilities(state, "a", [])

    def test_sampling_is_seeded_and_reproducible(self):
        picks1 = []
        picks2 = []
        for picks, seed in ((picks1, 7), (picks2, 7)):
            state = make_state({"a": 1000.0, "b": 1010.0, "c": 1200.0}, seed=seed)
            for _ in range(50):
                chosen, _ = sample_opponent(state, "a", {"b", "c"})
                picks.append(chosen)
        assert picks1 == picks2
        assert picks1.count("b") > picks1.count("c")


class TestElo:
    def test_equal_ratings_win_moves_sixteen_points(self):
        state = make_state({"a": 1000.0, "b": 1000.0}, k=32.0)
        update_single(state, ("a", "b"), 1.0)
        assert state.ratings["a"] == pytest.approx(1016.0)
        assert state.ratings["b"] == pytest.approx(984.0)

    def test_tie_at_equal_ratings_changes_nothing(self):
        state = make_state({"a": 1000.0, "b": 1000.0})
        update_single(state, ("a", "b"), 0.5)
        assert state.ratings["a"] == pytest.approx(1000.0)
        assert state.ratings["b"] == pytest.approx(1000.0)

    def test_rating_sum_conserved_over_randomized_updates(self):
        rng = random.Random(1234)
        ids = ["d1", "d2", "d3", "d4"]
        state = make_state({d: 1000.0 for d in ids})
        total_before = sum(state.ratings.values())
        for _ in range(10_000):
            a, b = rng.sample(ids, 2)
            update_single(state, (a, b), rng.choice([0.0, 0.5, 1.0]))
        assert sum(state.ratings.values()) == pytest.approx(total_before, abs=1e-6)

    def test_dominance_order_recovered_in_simulation(self):
        # Dominance chain with the largest win probability on the largest
        # strength gap: d1 > d3 at 0.9, d2 > d3 at 0.7, d1 > d2 at 0.6.
        win_prob = {("d1", "d2"): 0.6, ("d2", "d3"): 0.7, ("d1", "d3"): 0.9}
        rng = random.Random(0)
        state = make_state({"d1": 1000.0, "d2": 1000.0, "d3": 1000.0}, k=32.0)
        pairs = list(win_prob)
        for i in range(1000):
            a, b = pairs[i % len(pairs)]
            score = 1.0 if rng.random() < win_prob[(a, b)] else 0.0
            update_single(state, (a, b), score)
        ranked = sorted(state.ratings, key=state.ratings.get, reverse=True)
        assert ranked == ["d1", "d2", "d3"]

    def test_unregistered_decompiler_rejected(self):
        state = make_state({"a": 1000.0})
        with pytest.raises(UnregisteredDecompiler):
            update_single(state, ("a", "ghost"), 1.0)

    def test_per_criterion_tables_updated_independently(self):
        state = make_state({"a": 1000.0, "b": 1000.0})
        outcomes = {c: Outcome.TIE for c in ALL_CRITERIA}
        outcomes[Criterion.CONTROL_FLOW_CLARITY] = Outcome.A
        update_elo(state, ("a", "b"), outcomes)
        cf = state.criterion_ratings[Criterion.CONTROL_FLOW_CLARITY.label]
        other = state.criterion_ratings[Criterion.MEMORY_LAYOUT.label]
        assert cf["a"] == pytest.approx(1016.0)
        assert other["a"] == pytest.approx(1000.0)
        # 1 win vs 11 ties: A holds the majority, overall table moves
        assert state.ratings["a"] == pytest.approx(1016.0)

    def test_replaying_history_reproduces_ratings(self):
        rng = random.Random(5)
        ids = ["x", "y", "z"]
        state = make_state({d: 1000.0 for d in ids})
        for _ in range(200):
            a, b = rng.sample(ids, 2)
            update_single(state, (a, b), rng.choice([0.0, 0.5, 1.0]))
        replay = make_state({d: 1000.0 for d in ids})
        for match in state.history:
            update_single(replay, match.pair, match.score_a)
        assert replay.ratings == state.ratings


class TestVerdicts:
    def make_raw(self, winner="A", skip=None, extra=None):
        entries = [{"id": c.label, "winner": winner, "justification": "because"}
                   for c in ALL_CRITERIA if c is not skip]
        if extra:
            entries.append(extra)
        return json.dumps({"criteria": entries})

    def test_well_formed_response_parses(self):
        verdict = parse_verdict(self.make_raw(), ALL_CRITERIA)
        assert len(verdict.outcomes) == 12
        assert all(oc.outcome is Outcome.A for oc in verdict.outcomes.values())

    def test_missing_criterion_rejected(self):
        with pytest.raises(MissingCriterion):
            parse_verdict(self.make_raw(skip=Criterion.MEMORY_LAYOUT),
                          ALL_CRITERIA)

    def test_unknown_winner_label_rejected(self):
        with pytest.raises(UnknownLabel):
            parse_verdict(self.make_raw(winner="both"), ALL_CRITERIA)

    def test_garbage_rejected(self):
        with pytest.raises(MalformedResponse):
            parse_verdict("not json at all", ALL_CRITERIA)

    def test_build_comparison_names_each_criterion_once(self):
        req = build_comparison("ref", "aaa", "bbb", ALL_CRITERIA, PairOrder.AB)
        user = req["messages"][-1]["content"]
        for c in ALL_CRITERIA:
            assert user.count(c.label) == 1

    def test_build_comparison_swaps_outputs_for_ba(self):
        ab = build_comparison("ref", "aaa", "bbb", ALL_CRITERIA, PairOrder.AB)
        ba = build_comparison("ref", "aaa", "bbb", ALL_CRITERIA, PairOrder.BA)
        assert "=== Output A ===\naaa" in ab["messages"][-1]["content"]
        assert "=== Output A ===\nbbb" in ba["messages"][-1]["content"]

    def test_build_comparison_rejects_empty_output(self):
        with pytest.raises(ValueError):
            build_comparison("ref", "", "bbb", ALL_CRITERIA, PairOrder.AB)


class TestDebias:
    def verdict(self, order, winner):
        raw = json.dumps({"criteria": [
            {"id": c.label, "winner": winner, "justification": "j"}
            for c in ALL_CRITERIA]})
        return parse_verdict(raw, ALL_CRITERIA, function="f",
                             pair=("d1", "d2"), order=order)

    def test_agreeing_orders_keep_the_winner(self):
        # AB says A (=d1) wins; BA says B (=d1) wins: same decompiler.
        outcomes = debias_pair(self.verdict(PairOrder.AB, "A"),
                               self.verdict(PairOrder.BA, "B"))
        assert all(o is Outcome.A for o in outcomes.values())

    def test_disagreeing_orders_become_ties(self):
        # Both orderings pick the first-presented output: positional bias.
        outcomes = debias_pair(self.verdict(PairOrder.AB, "A"),
                               self.verdict(PairOrder.BA, "A"))
        assert all(o is Outcome.TIE for o in outcomes.values())

    def test_mismatched_functions_rejected(self):
        v_ab = self.verdict(PairOrder.AB, "A")
        v_ba = self.verdict(PairOrder.BA, "B")
        object.__setattr__(v_ba, "function", "other")
        with pytest.raises(PairMismatch):
            debias_pair(v_ab, v_ba)


class TestCohenKappa:
    def test_identical_lists_give_one(self):
        labels = ["A", "B", "A", "Tie"] * 5
        assert cohen_kappa(labels, list(labels)) == 1.0

    def test_hand_derived_thirty_item_example(self):
        # both-A: 10, both-B: 12, rater1 A / rater2 B: 3, B/A: 5
        a = ["A"] * 10 + ["B"] * 12 + ["A"] * 3 + ["B"] * 5
        b = ["A"] * 10 + ["B"] * 12 + ["B"] * 3 + ["A"] * 5
        # p_o = 22/30, p_e = (13*15 + 17*15)/900 = 0.5, kappa ~ 0.4667
        assert cohen_kappa(a, b) == pytest.approx(0.4667, abs=5e-4)

    def test_independent_raters_score_near_zero(self):
        rng = random.Random(42)
        a = [rng.choice("AB") for _ in range(10_000)]
        b = [rng.choice("AB") for _ in range(10_000)]
        assert abs(cohen_kappa(a, b)) < 0.05

    def test_symmetry(self):
        rng = random.Random(9)
        a = [rng.choice("ABC") for _ in range(500)]
        b = [rng.choice("ABC") for _ in range(500)]
        assert cohen_kappa(a, b) == pytest.approx(cohen_kappa(b, a), abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(LengthMismatch):
            cohen_kappa(["A"], ["A", "B"])

    def test_single_category_marginals_give_one(self):
        # p_e = 1 only happens when both raters use one shared category for
        # every item, which forces p_o = 1 as well; the defined value is 1.
        assert cohen_kappa(["A", "A"], ["A", "A"]) == 1.0

    def test_total_disagreement_is_negative(self):
        assert cohen_kappa(["A", "B"], ["B", "A"]) == pytest.approx(-1.0)


class TestMockJudge:
    def test_prefers_output_closer_to_reference(self):
        ref = "int add(int a, int b) { return a + b; }"
        near = "int add(int a, int b) { return a + b; }"
        far = "long v1(long v2, long v3) { return v2 ^ v3; }"
        request = build_comparison(ref, near, far, ALL_CRITERIA, PairOrder.AB)
        verdict = parse_verdict(MockJudge()(request), ALL_CRITERIA)
        assert all(oc.outcome is Outcome.A for oc in verdict.outcomes.values())

    def test_deterministic(self):
        req = build_comparison("ref code", "x = 1;", "y = 2;", ALL_CRITERIA,
                               PairOrder.AB)
        assert MockJudge()(req) == MockJudge()(req)


class TestArena:
    def test_arena_is_replay_deterministic(self):
        functions = [f"fn{i}" for i in range(6)]
        references = {f: f"int {f}(int x) {{ return x + 1; }}" for f in functions}
        outputs = {
            f: {
                "good": references[f],
                "bad": "long v1(long v2) { return v2; }",
                "ugly": f"int {f}(int x) {{ return x+1; }}",
            }
            for f in functions
        }
        results = []
        for _ in range(2):
            state = EloState(rng_seed=3)
            for d in ("good", "bad", "ugly"):
                state.register(d)
            log = []
            judge.run_arena(state, functions, references, outputs,
                            MockJudge(), log=log)
            results.append((dict(state.ratings), log))
        assert results[0] == results[1]

    def test_identity_output_dominates(self):
        functions = [f"fn{i}" for i in range(8)]
        references = {f: f"int {f}(int x) {{ if (x < 3) return x; return 0; }}"
                      for f in functions}
        outputs = {f: {"identity": references[f],
                       "mangled": "void v() {}"} for f in functions}
        state = EloState(rng_seed=0)
        judge.run_arena(state, functions, references, outputs, MockJudge())
        assert state.ratings["identity"] > state.ratings["mangled"]
