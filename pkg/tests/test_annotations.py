import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from softseg.annotations import (UNMAPPED, AnnotationError, AnnotationSet, AnnotationWarning, CleaningReport,
                                 PolygonRecord, clean_polygons, duplicate_multilabel, fill_forward_labels,
                                 load_manifest, load_synonyms, normalize_free_text, parse_manifest,
                                 polygon_mask, rasterize, rasterize_record, record_to_dict)


def pnpoly(vertices, x, y):
    """Classic crossing-number point-in-polygon test."""
    inside = False
    n = len(vertices)
    j = n - 1
    for i in range(n):
        xi, yi = vertices[i]
        xj, yj = vertices[j]
        if (yi > y) != (yj > y) and x < (xj - xi) * (y - yi) / (yj - yi) + xi:
            inside = not inside
        j = i
    return inside


def square(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], float)


def poly(verts, labels=(), seq=0, grade=0, group=None):
    return PolygonRecord(verts, tuple(labels), seq, grade, group=group)


# ---------------------------------------------------------------- free text

def test_normalize_exact_and_variants(onto):
    syn = load_synonyms(ontology=onto)
    name = onto.names("sub_explanation")[7]
    assert normalize_free_text(name, onto, syn) == 7
    assert normalize_free_text("  " + name.upper().replace(" ", "   ") + " ", onto, syn) == 7
    assert normalize_free_text("4.07", onto, syn) == onto.class_id("sub_explanation", "4.07")
    assert normalize_free_text("Comedo   Necrosis", onto, syn) == onto.class_id("sub_explanation", "5.02")
    assert normalize_free_text("something else entirely", onto, syn) == UNMAPPED


def test_synonym_file(tmp_path, onto):
    p = tmp_path / "syn.tsv"
    p.write_text("# comment\nfoo bar\t3\nbaz\t4.01\n")
    syn = load_synonyms(p, onto)
    assert syn == {"foo bar": 3, "baz": onto.class_id("sub_explanation", "4.01")}
    p.write_text("no tab here\n")
    with pytest.raises(AnnotationError):
        load_synonyms(p, onto)


# ---------------------------------------------------------------- cleaning

def test_fill_forward_example():
    v = square(0, 0, 2, 2)
    out = fill_forward_labels([poly(v, (), 1), poly(v, (20,), 2)])
    assert [p.class_ids for p in out] == [(20,), (20,)]


def test_fill_forward_identity_and_drop():
    v = square(0, 0, 2, 2)
    labeled = [poly(v, (1,), 1), poly(v, (2,), 2)]
    assert fill_forward_labels(labeled) == labeled
    rep = CleaningReport()
    out = fill_forward_labels([poly(v, (1,), 1), poly(v, (), 2)], rep)
    assert len(out) == 1 and rep.dropped == 1


def test_fill_forward_uses_creation_order_not_list_order():
    v = square(0, 0, 2, 2)
    out = fill_forward_labels([poly(v, (5,), 3), poly(v, (), 1), poly(v, (7,), 2)])
    assert sorted((p.created_seq, p.class_ids) for p in out) == [(1, (7,)), (2, (7,)), (3, (5,))]


def test_seq_tie_warns():
    v = square(0, 0, 2, 2)
    rep = CleaningReport()
    with pytest.warns(AnnotationWarning):
        fill_forward_labels([poly(v, (1,), 1), poly(v, (2,), 1)], rep)
    assert rep.seq_ties == 1


def test_duplicate_multilabel():
    v = square(0, 0, 2, 2)
    out = duplicate_multilabel([poly(v, (3, 5), 1), poly(v, (2,), 2)])
    assert [p.class_ids for p in out] == [(3,), (5,), (2,)]
    assert out[0].group == out[1].group is not None and out[2].group is None
    with pytest.raises(AnnotationError):
        duplicate_multilabel([poly(v, (), 1)])


def test_polygon_needs_three_vertices():
    with pytest.raises(AnnotationError):
        PolygonRecord(np.array([[0, 0], [1, 1]]), (1,))


# ------------------------------------------------------------ rasterization

def test_polygon_mask_matches_pnpoly():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(3, 9))
        v = rng.uniform(-3, 19, (n, 2))  # self-intersecting and partly outside allowed
        mask = polygon_mask(v, (14, 16))
        expect = np.array([[pnpoly(v, c + 0.5, r + 0.5) for c in range(16)] for r in range(14)])
        assert (mask == expect).all()


def test_polygon_mask_square_centres():
    mask = polygon_mask(square(1, 1, 4, 3), (5, 6))
    assert mask.sum() == 6 and mask[1:3, 1:4].all()


def _set(polys, size=(8, 8)):
    return AnnotationSet("img", "a", polys, size)


def test_rasterize_disjoint(onto):
    m = rasterize(_set([poly(square(0, 0, 3, 3), (2,), 1), poly(square(4, 4, 8, 8), (9,), 2)]), onto)
    assert m.weights[1, 1, 2] == 1 and m.weights[5, 5, 9] == 1
    assert set(np.unique(m.weights.sum(-1))) == {0.0, 1.0}


def test_rasterize_grade_order(onto):
    # GP4 drawn first in time but on the GP4 image: still painted after GP3
    gp4 = poly(square(2, 2, 6, 6), (15,), seq=1, grade=2)
    gp3 = poly(square(0, 0, 4, 4), (1,), seq=2, grade=1)
    m = rasterize(_set([gp4, gp3]), onto)
    assert m.weights[3, 3].argmax() == 15


def test_rasterize_later_overwrites_same_grade(onto):
    a = poly(square(0, 0, 4, 4), (1,), seq=1, grade=1)
    b = poly(square(2, 2, 6, 6), (3,), seq=2, grade=1)
    m = rasterize(_set([b, a]), onto)
    assert m.weights[3, 3].tolist() == np.eye(33)[3].tolist()


def test_rasterize_group_split(onto):
    polys, _ = clean_polygons([poly(square(0, 0, 4, 4), (4, 6), 1)])
    m = rasterize(_set(polys), onto)
    assert m.weights[1, 1, 4] == 0.5 and m.weights[1, 1, 6] == 0.5
    assert np.abs(m.weights.sum(-1)[m.annotated] - 1).max() < 1e-12


@given(st.permutations(list(range(5))))
def test_rasterize_permutation_invariant(perm):
    from softseg.ontology import load_ontology
    onto = load_ontology()
    rng = np.random.default_rng(11)
    polys = [poly(rng.uniform(0, 10, (5, 2)), (int(rng.integers(1, 33)),), seq=i, grade=int(rng.integers(1, 4)))
             for i in range(5)]
    a = rasterize(_set(polys, (10, 10)), onto).weights
    b = rasterize(_set([polys[i] for i in perm], (10, 10)), onto).weights
    assert a.tobytes() == b.tobytes()


def test_rasterize_errors(onto):
    with pytest.raises(AnnotationError):
        rasterize(_set([poly(square(0, 0, 3, 3), (UNMAPPED,))]), onto)
    with pytest.raises(AnnotationError):
        rasterize(_set([poly(square(0, 0, 3, 3), (99,))]), onto)
    with pytest.warns(AnnotationWarning):
        m = rasterize(_set([poly(square(20, 20, 30, 30), (1,))]), onto)
    assert not m.annotated.any()


def test_mask_remap(onto):
    m = rasterize(_set([poly(square(0, 0, 3, 3), (9,))]), onto)  # 4.01
    up = m.remap(onto, "pattern")
    assert up.weights[1, 1].tolist() == [0, 0, 1, 0]


# ----------------------------------------------------------------- manifest

def _manifest():
    return {
        "image_id": "core1", "size": [6, 6], "gleason_score": [3, 4], "group": "g1",
        "annotators": [
            {"annotator_id": "p1", "polygons": [
                {"vertices": square(0, 0, 3, 3).tolist(), "labels": ["3.01"], "created_seq": 0, "source_grade": 1},
                {"vertices": square(3, 3, 6, 6).tolist(), "labels": [], "created_seq": 1, "source_grade": 2},
                {"vertices": square(3, 0, 6, 3).tolist(), "raw_label": "Cribriform pattern", "created_seq": 2,
                 "source_grade": 2}]},
            {"annotator_id": "p2", "polygons": []},
        ],
    }


def test_parse_manifest(onto):
    rec = parse_manifest(_manifest(), onto)
    assert rec.gleason_score == (3, 4) and rec.extra == {"group": "g1"}
    masks, reps = rasterize_record(rec, onto, "explanation")
    crib = onto.class_id("explanation", onto.short_names("explanation")[3])
    assert masks[0].weights[4, 4, crib] == 1  # filled forward from the free-text label
    assert masks[0].weights[1, 1, 1] == 1
    assert not masks[1].annotated.any()
    assert reps[0].dropped == 0


def test_manifest_round_trip(tmp_path, onto):
    rec = parse_manifest(_manifest(), onto)
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"images": [record_to_dict(rec)]}))
    (again,) = load_manifest(p, onto)
    a, _ = rasterize_record(rec, onto)
    b, _ = rasterize_record(again, onto)
    assert all(x.weights.tobytes() == y.weights.tobytes() for x, y in zip(a, b))


def test_manifest_errors(onto):
    bad = _manifest()
    del bad["size"]
    with pytest.raises(AnnotationError):
        parse_manifest(bad, onto)
    dup = _manifest()
    dup["annotators"][1]["annotator_id"] = "p1"
    with pytest.raises(AnnotationError):
        parse_manifest(dup, onto)
