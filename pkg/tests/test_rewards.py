from fractions import Fraction
from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curriculum_grpo import rewards as R
from curriculum_grpo.curriculum import Stage, TaskKind

from oracles import category_iou_oracle, greedy_match_oracle, multi_choice_oracle, pixel_iou

OPTS = R.OPTION_IDS


def box(*c):
    return R.BoundingBox(*c)


def parsed(raw, stage, kind=TaskKind.CLASSIFICATION, multi=False):
    return R.parse_response(raw, Stage.parse(stage), kind, multi_select=multi)


def all_subsets(universe):
    return [frozenset(c) for k in range(len(universe) + 1) for c in combinations(universe, k)]


# --- parsing ----------------------------------------------------------------

def test_parse_examples():
    r = parsed("<answer>yes</answer>", "binary")
    assert r.payload == R.Binary(True) and r.format_ok
    r = parsed("<think>two of them</think><answer>A,C</answer>", "choice", multi=True)
    assert r.payload == R.MultiChoice(frozenset("AC")) and r.format_ok
    r = parsed("the answer is probably yes", "binary")
    assert isinstance(r.payload, R.Malformed) and not r.format_ok


@pytest.mark.parametrize("raw", [
    "<answer>A,B</answer>",          # two options where one is expected
    "<answer>E</answer>",
    "<answer>maybe</answer>",
    "<answer>yes</answer>trailing",
    "<think>x</think>",
    "<answer><answer>yes</answer></answer>",
    "",
])
def test_malformed_rejected(raw):
    stage = "binary" if "yes" in raw or "maybe" in raw else "choice"
    r = parsed(raw, stage)
    assert isinstance(r.payload, R.Malformed) and not r.format_ok


def test_parse_open_grammars():
    r = parsed("<answer>[0,0,2,2],[1,1,3,3,0.9]</answer>", "open", TaskKind.DETECTION)
    assert r.payload.boxes == (box(0, 0, 2, 2), box(1, 1, 3, 3, Fraction(9, 10)))
    r = parsed("<answer> Cat , dog </answer>", "open", TaskKind.CLASSIFICATION)
    assert r.payload == R.Categories(frozenset({"cat", "dog"}))
    for raw, v in (("7", 7), ("7.0", 7), ("-3/6", Fraction(-1, 2)), ("0.25", Fraction(1, 4))):
        r = parsed(f"<answer>{raw}</answer>", "open", TaskKind.MATH)
        assert r.payload == R.Numeric(v)
    for raw in ("[2,2,1,1]", "[0,0,2]", "seven", "1/0"):
        kind = TaskKind.DETECTION if raw.startswith("[") else TaskKind.MATH
        assert not parsed(f"<answer>{raw}</answer>", "open", kind).format_ok


@given(st.text(max_size=80))
def test_parse_never_raises(raw):
    for stage in Stage:
        for kind in TaskKind:
            for multi in (False, True):
                r = R.parse_response(raw, stage, kind, multi_select=multi)
                assert r.format_ok == (not isinstance(r.payload, R.Malformed))


payloads = st.one_of(
    st.booleans().map(R.Binary),
    st.sampled_from(OPTS).map(R.SingleChoice),
    st.sets(st.sampled_from(OPTS), min_size=1).map(lambda s: R.MultiChoice(frozenset(s))),
    st.sets(st.sampled_from(["circle", "square", "star", "triangle"]), min_size=1)
      .map(lambda s: R.Categories(frozenset(s))),
    st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(1, 5), st.integers(1, 5)),
             min_size=1, max_size=3)
      .map(lambda bs: R.Boxes(tuple(box(x, y, x + w, y + h) for x, y, w, h in bs))),
    st.fractions(max_denominator=12).map(R.Numeric),
)


@given(payloads)
def test_render_parse_identity(payload):
    stage, kind, multi = {
        R.Binary: (Stage.BINARY, TaskKind.MATH, False),
        R.SingleChoice: (Stage.CHOICE, TaskKind.MATH, False),
        R.MultiChoice: (Stage.CHOICE, TaskKind.CLASSIFICATION, True),
        R.Categories: (Stage.OPEN, TaskKind.CLASSIFICATION, False),
        R.Boxes: (Stage.OPEN, TaskKind.DETECTION, False),
        R.Numeric: (Stage.OPEN, TaskKind.MATH, False),
    }[type(payload)]
    raw = f"<answer>{R.render_payload(payload)}</answer>"
    assert R.parse_response(raw, stage, kind, multi_select=multi).payload == payload


# --- stage rewards -------------------------------------------------------------

def test_binary_and_single_choice_examples():
    yes, no = parsed("<answer>yes</answer>", "binary"), parsed("<answer>no</answer>", "binary")
    assert R.binary_reward(yes, R.Binary(True)).accuracy == 1
    assert R.binary_reward(no, R.Binary(True)).accuracy == 0
    bad = R.binary_reward(parsed("nope", "binary"), R.Binary(False))
    assert (bad.accuracy, bad.format) == (0, 0)
    b = parsed("<answer>B</answer>", "choice")
    assert R.single_choice_reward(b, R.SingleChoice("B")).accuracy == 1
    assert R.single_choice_reward(b, R.SingleChoice("A")).accuracy == 0
    ab = parsed("<answer>A,B</answer>", "choice")
    assert R.single_choice_reward(ab, R.SingleChoice("A")).accuracy == 0


def test_contract_errors():
    r = parsed("<answer>yes</answer>", "binary")
    with pytest.raises(R.ContractError):
        R.binary_reward(r, R.SingleChoice("A"))
    with pytest.raises(R.ContractError):
        R.detection_reward(r, R.Numeric(1))


def test_multi_choice_examples():
    gt = R.MultiChoice(frozenset("AC"))
    assert R.multi_choice_reward(parsed("<answer>A,C</answer>", "choice", multi=True), gt).accuracy == 1
    assert R.multi_choice_reward(parsed("<answer>A</answer>", "choice", multi=True), gt).accuracy == Fraction(1, 5)
    assert R.multi_choice_reward(parsed("<answer>A,B</answer>", "choice", multi=True), gt).accuracy == 0


def test_multi_choice_exhaustive():
    subsets = all_subsets(OPTS)
    gts = [s for s in subsets if s]
    for gt in gts:
        for sel in subsets:
            got = R.multi_choice_accuracy(sel, gt)
            assert got == multi_choice_oracle(sel, gt, OPTS)
            if sel and not sel <= gt:
                assert got == 0


@given(st.permutations(list(OPTS)), st.integers(1, 4), st.sets(st.sampled_from(OPTS), min_size=1))
def test_multi_choice_permutation_invariant(order, k, gt):
    sel = order[:k]
    a = parsed("<answer>" + ",".join(sel) + "</answer>", "choice", multi=True)
    b = parsed("<answer>" + ",".join(reversed(sel)) + "</answer>", "choice", multi=True)
    g = R.MultiChoice(frozenset(gt))
    assert R.multi_choice_reward(a, g) == R.multi_choice_reward(b, g)


def test_category_examples():
    gt = R.Categories(frozenset({"cat", "dog"}))
    assert R.category_overlap_reward(parsed("<answer>cat, dog</answer>", "open"), gt).accuracy == 1
    gt2 = R.Categories(frozenset({"cat", "bird"}))
    assert R.category_overlap_reward(parsed("<answer>cat,dog</answer>", "open"), gt2).accuracy == Fraction(1, 3)
    assert R.category_overlap_reward(parsed("cat", "open"), R.Categories(frozenset({"cat"}))).accuracy == 0


def test_category_iou_exhaustive_five_labels():
    universe = ("a", "b", "c", "d", "e")
    subsets = all_subsets(universe)
    for p in subsets:
        for g in subsets:
            if not g:
                continue
            v = R.category_iou(p, g)
            assert v == category_iou_oracle(p, g, universe)
            if p:
                assert v == R.category_iou(g, p)
            assert (v == 1) == (p == g)
            assert (v == 0) == (not (p & g))


# --- boxes ----------------------------------------------------------------------

def test_box_iou_examples():
    assert R.box_iou(box(0, 0, 2, 2), box(0, 0, 2, 2)) == 1
    assert R.box_iou(box(0, 0, 2, 2), box(1, 1, 3, 3)) == Fraction(1, 7)
    assert R.box_iou(box(0, 0, 1, 1), box(2, 2, 3, 3)) == 0


@pytest.mark.parametrize("coords", [(1, 0, 1, 2), (0, 2, 1, 1), (-1, 0, 1, 1)])
def test_box_invariants(coords):
    with pytest.raises(ValueError):
        box(*coords)
    with pytest.raises(ValueError):
        box(0, 0, 1, 1, 1.5)


coord = st.fractions(min_value=0, max_value=6, max_denominator=4)


@st.composite
def boxes(draw):
    x0, y0 = draw(coord), draw(coord)
    w = draw(st.fractions(min_value=Fraction(1, 4), max_value=4, max_denominator=4))
    h = draw(st.fractions(min_value=Fraction(1, 4), max_value=4, max_denominator=4))
    return box(x0, y0, x0 + w, y0 + h)


@settings(max_examples=200)
@given(boxes(), boxes(), coord, coord)
def test_box_iou_properties(a, b, dx, dy):
    v = R.box_iou(a, b)
    assert 0 <= v <= 1
    assert v == R.box_iou(b, a)
    assert (v == 1) == (a.coords() == b.coords())
    ta = box(a.x_min + dx, a.y_min + dy, a.x_max + dx, a.y_max + dy)
    tb = box(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy)
    assert R.box_iou(ta, tb) == v


def test_match_examples():
    assert R.match_boxes([box(0, 0, 2, 2)], [box(0, 0, 2, 2)]) == [(0, 0, 1)]
    assert R.match_boxes([box(0, 0, 1, 1)], [box(5, 5, 6, 6)], Fraction(1, 2)) == []
    assert R.match_boxes([box(0, 0, 2, 2), box(1, 1, 3, 3)], [box(0, 0, 2, 2)]) == [(0, 0, 1)]
    assert R.match_boxes([], [box(0, 0, 1, 1)]) == []
    with pytest.raises(ValueError):
        R.match_boxes([], [], 1)


def test_match_tie_break_lowest_indices():
    same = box(0, 0, 2, 2)
    assert R.match_boxes([same, same], [same, same]) == [(0, 0, 1), (1, 1, 1)]


@settings(max_examples=100)
@given(st.lists(boxes(), max_size=4), st.lists(boxes(), max_size=4),
       st.sampled_from([Fraction(0), Fraction(1, 4), Fraction(1, 2), Fraction(3, 4)]))
def test_match_one_to_one_and_above_tau(pred, gt, tau):
    m = R.match_boxes(pred, gt, tau)
    assert len({i for i, _, _ in m}) == len(m) == len({j for _, j, _ in m})
    assert all(v >= tau for _, _, v in m)
    assert m == greedy_match_oracle(pred, gt, tau, iou=lambda a, b: pixel_iou(a.coords(), b.coords()))


def test_detection_iou_and_accuracy_examples():
    assert R.detection_iou_reward([(0, 0, Fraction(1))]) == 1
    assert R.detection_iou_reward([(0, 0, Fraction(4, 5)), (1, 1, Fraction(3, 5))]) == Fraction(7, 10)
    assert R.detection_iou_reward([]) == 0
    assert R.detection_accuracy_reward(Fraction(7, 10)) == 1
    assert R.detection_accuracy_reward(Fraction(1, 2)) == 0
    assert R.detection_accuracy_reward(0) == 0


@given(st.fractions(0, 1), st.fractions(0, 1))
def test_detection_accuracy_monotone(a, b):
    lo, hi = sorted((a, b))
    assert R.detection_accuracy_reward(lo) <= R.detection_accuracy_reward(hi)


def test_detection_reward_examples():
    gt = R.Boxes((box(0, 0, 2, 2),))
    perfect = parsed("<answer>[0,0,2,2]</answer>", "open", TaskKind.DETECTION)
    assert R.detection_reward(perfect, gt).total == 2
    # IoU of [0,0,2,2] vs [0,0,2,5] is 4/10
    gt_tall = R.Boxes((box(0, 0, 2, 5),))
    r = R.detection_reward(perfect, gt_tall, tau=Fraction(1, 4))
    assert (r.accuracy, r.format, r.total) == (0, 1, 1)
    assert R.detection_reward(parsed("[0,0,2,2]", "open", TaskKind.DETECTION), gt).total == 0


def test_confidence_is_inert():
    gt = R.Boxes((box(0, 0, 2, 2),))
    a = parsed("<answer>[0,0,2,2,0.1]</answer>", "open", TaskKind.DETECTION)
    b = parsed("<answer>[0,0,2,2,1]</answer>", "open", TaskKind.DETECTION)
    assert R.detection_reward(a, gt) == R.detection_reward(b, gt)


def test_format_reward_examples():
    assert R.format_reward(parsed("<think>hm</think><answer>yes</answer>", "binary")) == 1
    assert R.format_reward(parsed("yes", "binary")) == 0
    assert R.format_reward(parsed("<answer>no</answer>", "binary")) == 1


def test_numeric_examples():
    r = parsed("<answer>7.0</answer>", "open", TaskKind.MATH)
    assert R.numeric_reward(r, R.Numeric(7)).accuracy == 1
    assert R.numeric_reward(parsed("<answer>7</answer>", "open", TaskKind.MATH), R.Numeric(7)).accuracy == 1
    assert R.numeric_reward(parsed("<answer>8</answer>", "open", TaskKind.MATH), R.Numeric(7)).accuracy == 0


@given(st.text(max_size=40), payloads)
def test_reward_ranges(raw, gt):
    for stage in Stage:
        for kind in TaskKind:
            resp = R.parse_response(raw, stage, kind, multi_select=isinstance(gt, R.MultiChoice))
            r = R.reward_for(resp, gt)
            assert 0 <= r.accuracy <= 1 and 0 <= r.format <= 1 and 0 <= r.total <= 2
            assert r.total == r.accuracy + r.format
            if isinstance(resp.payload, R.Malformed):
                assert r.accuracy == 0


@given(payloads)
def test_answer_json_round_trip(ans):
    assert R.answer_from_json(R.answer_to_json(ans)) == ans
