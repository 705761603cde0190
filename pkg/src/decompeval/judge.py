"""Pairwise code-quality arena: proximity sampling, Elo updates, verdict
parsing, order debiasing, and inter-rater agreement."""

from __future__ import annotations

import difflib
import hashlib
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from .errors import (
    DegenerateMarginals,
    EmptyCandidateSet,
    LengthMismatch,
    MalformedResponse,
    MissingCriterion,
    PairMismatch,
    UnknownLabel,
    UnregisteredDecompiler,
)

PROXIMITY_EPSILON = 1e-6
DEFAULT_K_FACTOR = 32.0
DEFAULT_INITIAL_RATING = 1000.0


class CriterionCategory(Enum):
    READABILITY = "readability"
    HELPFULNESS = "helpfulness"
    BOTH = "both"


class Criterion(Enum):
    """The twelve quality aspects a judge decides per comparison."""

    TYPECAST_CORRECTNESS = ("TypecastCorrectness", CriterionCategory.READABILITY)
    LITERAL_REPRESENTATION = ("LiteralRepresentation", CriterionCategory.READABILITY)
    CONTROL_FLOW_CLARITY = ("ControlFlowClarity", CriterionCategory.READABILITY)
    DECOMPILER_MACROS = ("DecompilerMacros", CriterionCategory.READABILITY)
    RETURN_BEHAVIOR = ("ReturnBehavior", CriterionCategory.READABILITY)
    IDENTIFIER_MEANING = ("IdentifierMeaning", CriterionCategory.HELPFULNESS)
    IDENTIFIER_ACCURACY = ("IdentifierAccuracy", CriterionCategory.HELPFULNESS)
    SYMBOLIC_VALUES = ("SymbolicValues", CriterionCategory.HELPFULNESS)
    FUNCTION_CORRECTNESS = ("FunctionCorrectness", CriterionCategory.HELPFULNESS)
    FUNCTION_PRECISION = ("FunctionPrecision", CriterionCategory.HELPFULNESS)
    DEREFERENCE_READABILITY = ("DereferenceReadability", CriterionCategory.BOTH)
    MEMORY_LAYOUT = ("MemoryLayout", CriterionCategory.BOTH)

    def __init__(self, label, category):
        self.label = label
        self.category = category

    @classmethod
    def from_label(cls, label: str) -> "Criterion":
        for c in cls:
            if c.label == label:
                return c
        raise UnknownLabel(f"unknown criterion {label!r}")


ALL_CRITERIA = list(Criterion)


class Outcome(Enum):
    A = "A"
    B = "B"
    TIE = "Tie"


class PairOrder(Enum):
    AB = "AB"
    BA = "BA"


@dataclass(frozen=True)
class CriterionOutcome:
    criterion: Criterion
    outcome: Outcome
    justification: str


@dataclass(frozen=True)
class JudgeVerdict:
    function: str
    pair: tuple[str, str]  # (decompiler A id, decompiler B id) as presented
    order: PairOrder
    outcomes: dict[Criterion, CriterionOutcome]
    judge_model: str
    raw_hash: str


@dataclass
class MatchResult:
    """One applied rating update, recorded for replay."""

    pair: tuple[str, str]
    criterion: str  # criterion label or "overall"
    score_a: float  # 1 win, 0.5 tie, 0 loss from A's side


@dataclass
class EloState:
    k_factor: float = DEFAULT_K_FACTOR
    initial_rating: float = DEFAULT_INITIAL_RATING
    rng_seed: int = 0
    ratings: dict[str, float] = field(default_factory=dict)
    # one extra table per criterion, under the criterion label
    criterion_ratings: dict[str, dict[str, float]] = field(default_factory=dict)
    history: list[MatchResult] = field(default_factory=list)
    _rng: random.Random = field(default=None, repr=False)

    def __post_init__(self):
        if self._rng is None:
            self._rng = random.Random(self.rng_seed)
        for c in ALL_CRITERIA:
            self.criterion_ratings.setdefault(c.label, {})

    def register(self, decompiler_id: str) -> None:
        self.ratings.setdefault(decompiler_id, self.initial_rating)
        for table in self.criterion_ratings.values():
            table.setdefault(decompiler_id, self.initial_rating)

    def require(self, decompiler_id: str) -> None:
        if decompiler_id not in self.ratings:
            raise UnregisteredDecompiler(decompiler_id)


def proximity_probabilities(state: EloState, anchor: str,
                            candidates: list[str]) -> dict[str, float]:
    """Normalized selection probabilities, inversely scaled by rating gap.

    P(b) = 1 / (1 + |R_a - R_b| / (min_i |R_a - R_i| + eps)) over the
    candidate pool, then normalized to sum to 1.
    """
    if not candidates:
        raise EmptyCandidateSet("no opponents to sample from")
    if anchor in candidates:
        raise ValueError("anchor must not be in the candidate pool")
    state.require(anchor)
    r_a = state.ratings[anchor]
    gaps = {b: abs(r_a - state.ratings[b]) for b in candidates}
    min_gap = min(gaps.values())
    raw = {b: 1.0 / (1.0 + gap / (min_gap + PROXIMITY_EPSILON))
           for b, gap in gaps.items()}
    total = sum(raw.values())
    return {b: p / total for b, p in raw.items()}


def sample_opponent(state: EloState, anchor: str,
                    candidates: set[str]) -> tuple[str, dict[str, float]]:
    """Pick an opponent with the state's seeded RNG; returns (id, P_norm)."""
    pool = sorted(candidates)
    probs = proximity_probabilities(state, anchor, pool)
    x = state._rng.random()
    acc = 0.0
    chosen = pool[-1]
    for b in pool:
        acc += probs[b]
        if x < acc:
            chosen = b
            break
    return chosen, probs


def expected_score(r_a: float, r_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


def _apply(table: dict[str, float], a: str, b: str, score_a: float, k: float):
    e_a = expected_score(table[a], table[b])
    table[a] += k * (score_a - e_a)
    table[b] += k * ((1.0 - score_a) - (1.0 - e_a))


def outcome_score(outcome: Outcome) -> float:
    return {Outcome.A: 1.0, Outcome.B: 0.0, Outcome.TIE: 0.5}[outcome]


def update_elo(state: EloState, pair: tuple[str, str],
               outcomes: dict[Criterion, Outcome]) -> None:
    """Apply one debiased comparison to the per-criterion tables and the
    overall table (majority outcome across criteria, ties break to Tie)."""
    a, b = pair
    state.require(a)
    state.require(b)
    for criterion, outcome in outcomes.items():
        score = outcome_score(outcome)
        _apply(state.criterion_ratings[criterion.label], a, b, score,
               state.k_factor)
        state.history.append(MatchResult((a, b), criterion.label, score))
    counts = Counter(outcomes.values())
    if counts[Outcome.A] > counts[Outcome.B]:
        overall = Outcome.A
    elif counts[Outcome.B] > counts[Outcome.A]:
        overall = Outcome.B
    else:
        overall = Outcome.TIE
    score = outcome_score(overall)
    _apply(state.ratings, a, b, score, state.k_factor)
    state.history.append(MatchResult((a, b), "overall", score))


def update_single(state: EloState, pair: tuple[str, str],
                  score_a: float) -> None:
    """Apply one match to the overall table only (used by simulations)."""
    a, b = pair
    state.require(a)
    state.require(b)
    _apply(state.ratings, a, b, score_a, state.k_factor)
    state.history.append(MatchResult((a, b), "overall", score_a))


# --- judge requests and verdicts ---

JUDGE_INSTRUCTIONS = (
    "You are comparing two decompiled versions of a C function against the "
    "original source, which is the ground truth. For each listed criterion, "
    "decide whether output A or output B is better, or whether they tie. "
    "Respond with a single JSON object: "
    '{"criteria": [{"id": <criterion>, "winner": "A"|"B"|"Tie", '
    '"justification": <string>}, ...]} covering every criterion exactly once.'
)


def build_comparison(reference_source: str, output_a: str, output_b: str,
                     criteria: list[Criterion], order: PairOrder) -> dict:
    """Assemble the judge request body (chat-completion message list)."""
    if not reference_source or not output_a or not output_b:
        raise ValueError("reference and both outputs must be non-empty")
    first, second = ((output_a, output_b) if order is PairOrder.AB
                     else (output_b, output_a))
    names = ", ".join(c.label for c in criteria)
    user = (
        f"Criteria: {names}\n\n"
        f"=== Original source (ground truth) ===\n{reference_source}\n\n"
        f"=== Output A ===\n{first}\n\n"
        f"=== Output B ===\n{second}\n"
    )
    return {
        "messages": [
            {"role": "system", "content": JUDGE_INSTRUCTIONS},
            {"role": "user", "content": user},
        ]
    }


_LABEL_MAP = {"a": Outcome.A, "b": Outcome.B, "tie": Outcome.TIE}


def parse_verdict(raw: str, expected: list[Criterion], *, function: str = "",
                  pair: tuple[str, str] = ("", ""),
                  order: PairOrder = PairOrder.AB,
                  judge_model: str = "") -> JudgeVerdict:
    """Strictly parse a judge response against the expected criterria set."""
    try:
        body = json.loads(raw)
        entries = body["criteria"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedResponse(f"unparseable judge response: {exc}") from exc
    if not isinstance(entries, list):
        raise MalformedResponse("criteria is not an array")
    outcomes: dict[Criterion, CriterionOutcome] = {}
    for entry in entries:
        try:
            criterion = Criterion.from_label(entry["id"])
            winner_raw = entry["winner"]
            justification = entry.get("justification", "")
        except (KeyError, TypeError) as exc:
            raise MalformedResponse(f"bad criterion entry: {entry!r}") from exc
        winner = _LABEL_MAP.get(str(winner_raw).strip().lower())
        if winner is None:
            raise UnknownLabel(f"winner label {winner_raw!r}")
        if criterion in outcomes:
            raise MalformedResponse(f"duplicate criterion {criterion.label}")
        outcomes[criterion] = CriterionOutcome(criterion, winner, justification)
    missing = [c.label for c in expected if c not in outcomes]
    if missing:
        raise MissingCriterion(", ".join(missing))
    extra = [c.label for c in outcomes if c not in expected]
    if extra:
        raise MalformedResponse(f"unexpected criteria: {', '.join(extra)}")
    return JudgeVerdict(
        function=function,
        pair=pair,
        order=order,
        outcomes=outcomes,
        judge_model=judge_model,
        raw_hash=hashlib.sha256(raw.encode()).hexdigest(),
    )


def debias_pair(verdict_ab: JudgeVerdict,
                verdict_ba: JudgeVerdict) -> dict[Criterion, Outcome]:
    """Keep a criterion's outcome only when both presentation orders name
    the same underlying decompiler; disagreement becomes a tie."""
    if verdict_ab.function != verdict_ba.function:
        raise PairMismatch("verdicts are for different functions")
    if verdict_ab.order is not PairOrder.AB or verdict_ba.order is not PairOrder.BA:
        raise PairMismatch("expected one AB and one BA verdict")
    if verdict_ab.pair != verdict_ba.pair:
        raise PairMismatch("verdicts cover different decompiler pairs")
    if set(verdict_ab.outcomes) != set(verdict_ba.outcomes):
        raise PairMismatch("criterion sets differ between orderings")
    result: dict[Criterion, Outcome] = {}
    for criterion, oc_ab in verdict_ab.outcomes.items():
        oc_ba = verdict_ba.outcomes[criterion]
        # In the BA verdict the presented "A" is the underlying B.
        ba_as_underlying = {Outcome.A: Outcome.B, Outcome.B: Outcome.A,
                            Outcome.TIE: Outcome.TIE}[oc_ba.outcome]
        if oc_ab.outcome == ba_as_underlying:
            result[criterion] = oc_ab.outcome
        else:
            result[criterion] = Outcome.TIE
    return result


# --- Cohen's kappa ---

def cohen_kappa(labels_a: list, labels_b: list) -> float:
    """Chance-corrected agreement between two raters over paired labels.

    p_o = (1/N) sum_k n_kk, p_e = (1/N^2) sum_k n_k1 * n_k2,
    kappa = (p_o - p_e) / (1 - p_e).
    """
    if len(labels_a) != len(labels_b):
        raise LengthMismatch(
            f"rater label lists differ in length: {len(labels_a)} vs {len(labels_b)}")
    n = len(labels_a)
    if n < 1:
        raise LengthMismatch("need at least one item")
    agree = sum(1 for x, y in zip(labels_a, labels_b) if x == y)
    p_o = agree / n
    count_a = Counter(labels_a)
    count_b = Counter(labels_b)
    p_e = sum(count_a[k] * count_b.get(k, 0) for k in count_a) / (n * n)
    if p_e == 1.0:
        if p_o == 1.0:
            return 1.0
        raise DegenerateMarginals(
            "chance agreement is 1 but observed agreement is not")
    return (p_o - p_e) / (1.0 - p_e)


def complete_agreement(labels_a: list, labels_b: list) -> float:
    if len(labels_a) != len(labels_b) or not labels_a:
        raise LengthMismatch("label lists must be equal-length and non-empty")
    return sum(1 for x, y in zip(labels_a, labels_b) if x == y) / len(labels_a)


@dataclass(frozen=True)
class AgreementRecord:
    criterion: str
    n_items: int
    kappa: float
    complete_agreement: float


def agreement_for(criterion: str, labels_a: list, labels_b: list) -> AgreementRecord:
    return AgreementRecord(
        criterion=criterion,
        n_items=len(labels_a),
        kappa=cohen_kappa(labels_a, labels_b),
        complete_agreement=complete_agreement(labels_a, labels_b),
    )


# --- arena loop ---

def run_arena(state: EloState, functions: list[str],
              references: dict[str, str],
              outputs: dict[str, dict[str, str]],
              judge_fn, *, judge_model: str = "",
              criteria: list[Criterion] = None,
              log: list = None) -> None:
    """One arena pass: for each function (in the given order) pick a uniform
    random anchor, sample an opponent by rating proximity, judge the pair in
    both presentation orders, and apply the debiased outcome.

    ``judge_fn`` maps a request body to a raw response string.  ``log``,
    when given, collects replayable per-match records.
    """
    criteria = criteria or ALL_CRITERIA
    for fn in functions:
        per_fn = outputs.get(fn, {})
        ids = sorted(d for d in per_fn if per_fn[d])
        if len(ids) < 2:
            continue
        for d in ids:
            state.register(d)
        anchor = ids[state._rng.randrange(len(ids))]
        opponent, probs = sample_opponent(state, anchor,
                                          set(ids) - {anchor})
        ref = references[fn]
        out_a, out_b = per_fn[anchor], per_fn[opponent]
        raw_ab = judge_fn(build_comparison(ref, out_a, out_b, criteria,
                                           PairOrder.AB))
        raw_ba = judge_fn(build_comparison(ref, out_a, out_b, criteria,
                                           PairOrder.BA))
        verdict_ab = parse_verdict(raw_ab, criteria, function=fn,
                                   pair=(anchor, opponent),
                                   order=PairOrder.AB, judge_model=judge_model)
        verdict_ba = parse_verdict(raw_ba, criteria, function=fn,
                                   pair=(anchor, opponent),
                                   order=PairOrder.BA, judge_model=judge_model)
        outcomes = debias_pair(verdict_ab, verdict_ba)
        update_elo(state, (anchor, opponent), outcomes)
        if log is not None:
            flip = {Outcome.A: Outcome.B, Outcome.B: Outcome.A,
                    Outcome.TIE: Outcome.TIE}
            log.append({
                "function": fn,
                "pair": [anchor, opponent],
                "sampling": {b: round(p, 6) for b, p in sorted(probs.items())},
                "raw_hashes": [verdict_ab.raw_hash, verdict_ba.raw_hash],
                "outcomes": {c.label: o.value
                             for c, o in sorted(outcomes.items(),
                                                key=lambda kv: kv[0].label)},
                # both orders expressed in underlying sides, for
                # rater-agreement accounting downstream
                "order_views": {
                    "first": {c.label: oc.outcome.value
                              for c, oc in sorted(
                                  verdict_ab.outcomes.items(),
                                  key=lambda kv: kv[0].label)},
                    "second": {c.label: flip[oc.outcome].value
                               for c, oc in sorted(
                                   verdict_ba.outcomes.items(),
                                   key=lambda kv: kv[0].label)},
                },
            })


# --- mock judge ---

class MockJudge:
    """Deterministic rule-based judge for tests and offline runs.

    Scores each output by its similarity to the reference source and picks
    the closer one for every criterion; equal scores tie.
    """

    model_id = "mock-judge"

    def __call__(self, request: dict) -> str:
        user = request["messages"][-1]["content"]
        criteria = self._section(user, "Criteria: ", "\n")
        ref = self._block(user, "Original source (ground truth)")
        out_a = self._block(user, "Output A")
        out_b = self._block(user, "Output B")
        score_a = difflib.SequenceMatcher(None, ref, out_a).ratio()
        score_b = difflib.SequenceMatcher(None, ref, out_b).ratio()
        if score_a > score_b:
            winner, why = "A", "closer to the reference"
        elif score_b > score_a:
            winner, why = "B", "closer to the reference"
        else:
            winner, why = "Tie", ""
        entries = [{"id": name.strip(), "winner": winner, "justification": why}
                   for name in criteria.split(",")]
        return json.dumps({"criteria": entries})

    @staticmethod
    def _section(text: str, start: str, end: str) -> str:
        i = text.index(start) + len(start)
        return text[i:text.index(end, i)]

    @staticmethod
    def _block(text: str, title: str) -> str:
        marker = f"=== {title} ===\n"
        i = text.index(marker) + len(marker)
        j = text.find("\n=== ", i)
        return text[i:] if j < 0 else text[i:j]
