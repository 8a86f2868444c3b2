import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from camloc import metrics as M
from camloc.proposals import RegionProposal


def box(r, c, h, w):
    return np.array([(r + i, c + j) for i in range(h) for j in range(w)])


def P(pixels, score=1.0):
    return RegionProposal(np.asarray(pixels), score)


def G(pixels, lesion_type="Hemorrhage", confidence=None):
    return M.GroundTruthRegion(np.asarray(pixels), lesion_type, confidence)


def curve_points(c):
    return list(zip(c.thresholds.tolist(), c.fps_per_image.tolist(), c.sensitivity.tolist()))


# -- set measures -----------------------------------------------------------


def test_iou_examples():
    a = box(0, 0, 2, 2)
    assert M.iou(a, a) == 1.0
    assert M.iou(a, box(5, 5, 2, 2)) == 0.0
    assert M.iou(box(0, 0, 2, 2), box(1, 0, 2, 2)) == pytest.approx(2 / 6)
    with pytest.raises(ValueError):
        M.iou(a, np.zeros((0, 2), int))


@given(st.sets(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1),
       st.sets(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1))
def test_iou_symmetric_bounded(a, b):
    x, y = np.array(sorted(a)), np.array(sorted(b))
    v = M.iou(x, y)
    assert v == M.iou(y, x) and 0 <= v <= 1
    assert (v == 1) == (a == b)
    assert v == len(a & b) / len(a | b)


def test_overlap_fraction_examples():
    g = box(0, 0, 2, 5)  # 10 pixels
    assert M.overlap_fraction(g, box(0, 0, 4, 8)) == 1.0
    assert M.overlap_fraction(g, box(9, 9, 1, 1)) == 0.0
    assert M.overlap_fraction(g, box(0, 0, 1, 5)) == 0.5
    with pytest.raises(ValueError):
        M.overlap_fraction(np.zeros((0, 2), int), g)


def test_ground_truth_validation():
    with pytest.raises(ValueError):
        G(np.zeros((0, 2), int))
    with pytest.raises(ValueError):
        G(box(0, 0, 1, 2), confidence=[0.5, 1.5])
    with pytest.raises(ValueError):
        G(box(0, 0, 1, 2), lesion_type="Drusen")
    assert np.all(G(box(0, 0, 1, 2)).confidence == 1.0)


# -- image level ------------------------------------------------------------


def test_image_tp_50():
    g = G(box(0, 0, 2, 5))
    assert not M.image_tp_50([], [g])
    assert M.image_tp_50([P(g.pixels)], [g])
    assert M.image_tp_50([P(box(0, 0, 1, 5))], [g])  # exactly 0.5, inclusive
    forty = P(box(0, 0, 2, 2))  # 4 of 10
    assert not M.image_tp_50([forty], [g, G(box(0, 0, 2, 5) + [5, 0])])


def test_image_tp_onepixel():
    px = box(0, 0, 2, 2)
    half = G(px, confidence=[0.5] * 4)
    assert not M.image_tp_onepixel([P(px)], [half])
    border = G(px, confidence=[0.5, 0.5, 0.5, 0.75])
    assert M.image_tp_onepixel([P(box(1, 1, 1, 1))], [border])
    assert not M.image_tp_onepixel([P(box(1, 0, 1, 1))], [border])
    assert not M.image_tp_onepixel([P(box(8, 8, 2, 2))], [G(px)])


def test_type_filter():
    gts = [G(box(0, 0, 2, 2), "HardExudate")]
    assert M.image_tp_50([P(box(0, 0, 2, 2))], gts, "HardExudate")
    assert not M.image_tp_50([P(box(0, 0, 2, 2))], gts, "Hemorrhage")


@given(st.data())
def test_fifty_implies_onepixel_at_full_confidence(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    mask = rng.random((6, 6)) < 0.4
    gmask = rng.random((6, 6)) < 0.4
    if not mask.any() or not gmask.any():
        return
    props, gts = [P(np.argwhere(mask))], [G(np.argwhere(gmask))]
    if M.image_tp_50(props, gts):
        assert M.image_tp_onepixel(props, gts)


# -- lesion level -----------------------------------------------------------


def test_perfect_proposals_no_fp():
    gts = [G(box(0, 0, 2, 2)), G(box(5, 5, 3, 3))]
    assert M.lesion_level_label([P(g.pixels, 0.3) for g in gts], gts, 0.0) == (2, 0, 2)
    assert M.lesion_level_label([P(g.pixels, 0.3) for g in gts], gts, -math.inf) == (2, 0, 2)


def test_oversized_proposal_is_fp():
    gts = [G(box(0, 0, 2, 5)), G(box(8, 0, 2, 5))]  # two 10-pixel regions
    big = P(box(0, 0, 10, 10))  # 100 pixels over both
    tp, fp, det = M.lesion_level_label([big], gts, 0.0)
    assert (tp, fp, det) == (0, 1, 2)


def test_miou_boundary_inclusive():
    g = G(box(0, 0, 1, 4))
    exact_half = P(box(0, 0, 1, 8))  # IoU 4/8
    assert M.lesion_level_label([exact_half], [g], 0.0) == (1, 0, 1)
    below = P(box(0, 0, 1, 9))
    assert M.lesion_level_label([below], [g], 0.0) == (0, 1, 1)


def test_miou_averages_touched_regions():
    g1, g2 = G(box(0, 0, 1, 4)), G(box(0, 6, 1, 4))
    p = P(box(0, 0, 1, 5))  # IoU 4/5 with g1, touches nothing else
    assert M.lesion_level_label([p], [g1, g2], 0.0) == (1, 0, 1)
    q = P(np.vstack([box(0, 0, 1, 4), box(0, 6, 1, 1)]))  # IoU 4/5 and 1/8: mean 0.4625
    assert M.lesion_level_label([q], [g1, g2], 0.0) == (0, 1, 1)
    r = P(np.vstack([box(0, 0, 1, 4), box(0, 6, 1, 4)]))  # IoU 1/2 with each: mean exactly 0.5
    assert M.lesion_level_label([r], [g1, g2], 0.0) == (1, 0, 2)


def test_threshold_above_scores():
    gts = [G(box(0, 0, 2, 2))]
    assert M.lesion_level_label([P(gts[0].pixels, 0.5)], gts, 0.6) == (0, 0, 0)


# -- FROC -------------------------------------------------------------------


def test_froc_scenario_mixed_hits():
    images = [
        ([P(box(0, 0, 2, 2), 0.9), P(box(10, 10, 2, 2), 0.7)], [G(box(0, 0, 2, 2))]),
        ([P(box(0, 0, 2, 1), 0.8)], [G(box(0, 0, 2, 2))]),
        ([P(box(5, 5, 1, 1), 0.6)], []),
    ]
    c = M.froc(images, "Hemorrhage")
    assert curve_points(c) == [
        (0.6, 2 / 3, 1.0),
        (0.7, 1 / 3, 1.0),
        (0.8, 0.0, 1.0),
        (0.9, 0.0, 0.5),
        (math.inf, 0.0, 0.0),
    ]


def test_froc_scenario_oversized_and_partial():
    images = [
        ([P(box(0, 0, 10, 10), 1.0), P(box(0, 0, 2, 2), 0.5)], [G(box(0, 0, 2, 2)), G(box(0, 4, 2, 2))]),
        ([P(box(2, 2, 2, 2), 0.75)], [G(box(2, 2, 3, 3))]),
        ([P(box(0, 0, 1, 6), 0.75)], [G(box(0, 0, 1, 4))]),
    ]
    c = M.froc(images, "Hemorrhage")
    assert curve_points(c) == [
        (0.5, 2 / 3, 0.75),
        (0.75, 2 / 3, 0.75),
        (1.0, 1 / 3, 0.5),
        (math.inf, 0.0, 0.0),
    ]


def test_froc_scenario_types_and_healthy_denominator():
    images = [
        ([P(box(0, 0, 2, 2), 0.9), P(box(5, 5, 2, 2), 0.4)],
         [G(box(0, 0, 2, 2), "Hemorrhage"), G(box(5, 5, 2, 2), "HardExudate")]),
        ([], []),
        ([P(box(0, 0, 2, 2), 0.4)], []),
    ]
    he = M.froc(images, "HardExudate")
    # the proposal on the other type's lesion is correct, so it is no FP for either curve
    assert curve_points(he) == [(0.4, 1 / 3, 1.0), (0.9, 0.0, 0.0), (math.inf, 0.0, 0.0)]
    h = M.froc(images, "Hemorrhage")
    assert curve_points(h) == [(0.4, 1 / 3, 1.0), (0.9, 0.0, 1.0), (math.inf, 0.0, 0.0)]


def test_froc_matches_lesion_level_label_sweep():
    rng = np.random.default_rng(0)
    images = []
    for _ in range(6):
        gts = [G(box(*rng.integers(0, 12, 2), *rng.integers(1, 4, 2)))for _ in range(rng.integers(0, 3))]
        props = [P(box(*rng.integers(0, 12, 2), *rng.integers(1, 5, 2)), float(rng.integers(1, 6)) / 5)
                 for _ in range(rng.integers(0, 4))]
        images.append((props, gts))
    if not any(g for _, g in images):
        images[0][1].append(G(box(0, 0, 2, 2)))
    c = M.froc(images, "Hemorrhage")
    total = sum(len(g) for _, g in images)
    for t, fps, se in curve_points(c):
        fp = det = 0
        for props, gts in images:
            _, f, d = M.lesion_level_label(props, gts, t)
            fp, det = fp + f, det + d
        assert fps == fp / len(images) and se == det / total


def test_froc_edge_cases():
    perfect = [([P(box(0, 0, 2, 2), 0.8)], [G(box(0, 0, 2, 2))]), ([], [])]
    assert (0.0, 1.0) in M.froc(perfect, "Hemorrhage").points
    disjoint = [([P(box(9, 9, 2, 2), 0.8)], [G(box(0, 0, 2, 2))])]
    assert all(se == 0 for _, se in M.froc(disjoint, "Hemorrhage").points)
    with pytest.raises(ValueError):
        M.froc(perfect, "SoftExudate")
    with pytest.raises(ValueError):
        M.froc([], "Hemorrhage")


def test_froc_monotone():
    rng = np.random.default_rng(1)
    images = [([P(box(*rng.integers(0, 10, 2), 2, 2), float(rng.random())) for _ in range(4)],
               [G(box(*rng.integers(0, 10, 2), 2, 2))]) for _ in range(10)]
    c = M.froc(images, "Hemorrhage")
    assert np.all(np.diff(c.thresholds) > 0)
    assert np.all(np.diff(c.sensitivity) <= 0) and np.all(np.diff(c.fps_per_image) <= 0)


def test_sensitivity_at():
    c = M.FrocCurve("Hemorrhage", np.array([0.1, 0.5, math.inf]), np.array([3.0, 1.0, 0.0]), np.array([0.9, 0.6, 0.0]))
    assert c.sensitivity_at(2.0) == 0.6 and c.sensitivity_at(3.0) == 0.9 and c.sensitivity_at(0.0) == 0.0


# -- ROC --------------------------------------------------------------------


def test_auc_examples():
    assert M.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert M.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert M.roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        M.roc_auc([0.1, 0.2], [1, 1])


@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pair_count(pairs):
    scores = [s for s, _ in pairs]
    labels = [int(y) for _, y in pairs]
    if len(set(labels)) < 2:
        return
    pos = [s for s, y in pairs if y]
    neg = [s for s, y in pairs if not y]
    oracle = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (len(pos) * len(neg))
    assert M.roc_auc(scores, labels) == pytest.approx(oracle, abs=1e-12)
    # strictly increasing transform
    assert M.roc_auc([math.exp(s) * 3 + 1 for s in scores], labels) == pytest.approx(oracle, abs=1e-12)


def test_roc_curve_trapezoid_equals_auc():
    rng = np.random.default_rng(2)
    s, y = rng.random(50).round(1), rng.integers(0, 2, 50)
    _, fpr, tpr = M.roc_curve(s, y)
    assert fpr[0] == 0 and tpr[-1] == 1
    assert np.trapezoid(tpr, fpr) == pytest.approx(M.roc_auc(s, y), abs=1e-12)


# -- report -----------------------------------------------------------------


def test_report_all_healthy():
    results = [M.ImageResult(str(i), 0, 0.1, []) for i in range(5)]
    rep = M.report(results)
    assert rep.specificity == 1.0
    assert rep.classification["auc"] is None and rep.classification["sensitivity"] is None
    assert all(v is None for crit in rep.image_sensitivity.values() for v in crit.values())
    assert rep.froc == {}


def test_report_perfect_detector():
    results = []
    for i, lt in enumerate(M.LESION_TYPES):
        g = G(box(i, i, 3, 3), lt)
        results.append(M.ImageResult(f"d{i}", 1, 0.9, [P(g.pixels, 1.0)], [g]))
        results.append(M.ImageResult(f"h{i}", 0, 0.1, []))
    rep = M.report(results)
    assert rep.classification == {"sensitivity": 1.0, "specificity": 1.0, "auc": 1.0}
    for crit in M.CRITERIA:
        assert set(rep.image_sensitivity[crit].values()) == {1.0}
    # a proposal that matches a lesion of another type is no FP for this one
    for lt in M.LESION_TYPES:
        assert rep.lesion_operating_point[lt] == (1.0, 0.0)


def test_report_dict_order_and_references():
    rep = M.report([M.ImageResult("a", 0, 0.2, []), M.ImageResult("b", 1, 0.7, [], [G(box(0, 0, 2, 2))])])
    d = rep.to_dict()
    assert list(d) == ["n_images", "operating_threshold", "score_threshold", "classification", "specificity",
                       "image_level_sensitivity", "image_counts", "lesion_level", "reference"]
    assert d["reference"]["image_level_sensitivity_percent"]["Ours (50% Overlap)"] == [97.2, 93.3, 81.8, 50.0]
    assert d["reference"]["image_level_sensitivity_percent"]["Ours (OnePixel Overlap)"] == [97.2, 100.0, 90.9, 50.0]
    assert d["reference"]["classification"] == {"sensitivity": 0.936, "specificity": 0.976, "auc": 0.954}
    assert d["reference"]["lesion_level"]["Ours (50% Overlap)"] == [[72, 2.25], [47, 1.9], [71, 1.45], [21, 2.0]]


def test_write_report(tmp_path):
    g = G(box(0, 0, 2, 2))
    results = [M.ImageResult("a", 1, 0.9, [P(g.pixels, 0.8)], [g]), M.ImageResult("b", 0, 0.2, [])]
    rep = M.report(results)
    files = M.write_report(rep, tmp_path, ("onepixel",))
    names = sorted(p.name for p in files)
    assert names == ["froc_Hemorrhage.csv", "report.json", "table1_lesion_level.csv", "table2_image_level.csv"]
    t2 = (tmp_path / "table2_image_level.csv").read_text().splitlines()
    assert t2[0].startswith("lesion_type,images,sensitivity[onepixel],") and t2[1].startswith("Hemorrhage,1,1.0,0.972")
    froc = (tmp_path / "froc_Hemorrhage.csv").read_text().splitlines()
    assert froc == ["threshold,fps_per_image,sensitivity", "0.8,0.0,1.0", "inf,0.0,0.0"]
    M.write_roc_csv(tmp_path / "roc.csv", [0.9, 0.2], [1, 0])
    assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "threshold,fpr,tpr"
