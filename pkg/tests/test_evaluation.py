import numpy as np
import pytest

from smokepatch.evaluation import (EvalSet, mean_recall, recall_at_k,
                                   recall_curve, simple_descriptors,
                                   write_recall_csv, write_recall_svg)
from smokepatch.kdtree import brute_force_query


def unit_vectors(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_perfect_descriptors_recall_one_at_rank_one():
    rng = np.random.default_rng(0)
    d = unit_vectors(rng, 40, 8)
    s = EvalSet(d, d.copy())
    assert recall_at_k(s, 1) == 1.0
    curve = recall_curve(s)
    np.testing.assert_array_equal(curve, 1.0)


def test_recall_is_one_at_k_equals_n_for_any_descriptors():
    rng = np.random.default_rng(1)
    s = EvalSet(unit_vectors(rng, 30, 6), unit_vectors(rng, 30, 6))
    curve = recall_curve(s)
    assert curve[-1] == 1.0
    assert recall_at_k(s, len(s)) == 1.0


def test_recall_curve_monotone_nondecreasing():
    rng = np.random.default_rng(2)
    for trial in range(5):
        s = EvalSet(unit_vectors(rng, 50, 4), unit_vectors(rng, 50, 4))
        curve = recall_curve(s)
        assert np.all(np.diff(curve) >= 0.0)


def test_random_descriptors_recall_matches_k_over_n():
    # over many trials the partner of a random query lands uniformly in the
    # ranking, so recall@k concentrates around k / N within 3 sigma
    rng = np.random.default_rng(3)
    n, trials = 100, 50
    for k in (1, 10, 25):
        hits = []
        for _ in range(trials):
            s = EvalSet(unit_vectors(rng, n, 16), unit_vectors(rng, n, 16))
            hits.append(recall_at_k(s, k))
        p = k / n
        sigma = np.sqrt(p * (1 - p) / n / trials)
        assert abs(np.mean(hits) - p) <= 3 * sigma


def test_partner_ranks_match_brute_force():
    rng = np.random.default_rng(4)
    s = EvalSet(unit_vectors(rng, 25, 5), unit_vectors(rng, 25, 5))
    ranks = s.partner_ranks()
    for i in range(len(s)):
        idx, _ = brute_force_query(s.fine, s.coarse[i], len(s))
        assert ranks[i] == int(np.where(idx == i)[0][0]) + 1


def test_mean_recall_window():
    curve = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    assert mean_recall(curve, 2, 4) == pytest.approx(0.3)


def test_simple_descriptors_batch_shape():
    rng = np.random.default_rng(5)
    blocks = rng.random((3, 2, 36, 36))
    d = simple_descriptors(blocks)
    assert d.shape == (3, 49 + 25)


def test_csv_and_svg_outputs(tmp_path):
    curves = {"a": np.array([0.4, 0.6, 1.0]), "b": np.array([0.2, 0.5, 0.9])}
    csv_path = tmp_path / "recall.csv"
    svg_path = tmp_path / "recall.svg"
    write_recall_csv(csv_path, curves)
    write_recall_svg(svg_path, curves)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "k,a,b"
    assert lines[1].startswith("1,0.4")
    assert len(lines) == 4
    svg = svg_path.read_text()
    assert svg.startswith("<svg") and "polyline" in svg
