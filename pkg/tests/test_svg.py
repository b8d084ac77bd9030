import xml.etree.ElementTree as ET

import numpy as np
import pytest

from geoscore.svg import emit_svg_lines, emit_svg_scatter

NS = "{http://www.w3.org/2000/svg}"


def parse(path):
    root = ET.parse(path).getroot()
    assert root.tag == NS + "svg" and root.get("version") == "1.1"
    return root


def test_scatter_counts(tmp_path):
    g = np.random.default_rng(0)
    path = emit_svg_scatter([{"points": g.normal(size=(30, 2)), "label": "samples"},
                             {"points": g.normal(size=(5, 2)), "label": "data",
                              "marker": "triangle"}], tmp_path / "s.svg")
    root = parse(path)
    groups = [e for e in root.iter(NS + "g") if e.get("class") == "series"]
    assert [len(list(gr)) for gr in groups] == [30, 5]
    assert all(c.tag == NS + "polygon" for c in groups[1])
    texts = [t.text for t in root.iter(NS + "text")]
    assert "samples" in texts and "data" in texts


def test_lines_one_polyline_per_series(tmp_path):
    x = [0.3, 0.1, 0.2]
    path = emit_svg_lines([{"x": x, "y": [3, 1, 2], "label": "a<b"},
                           {"x": x, "y": [1, 1, 1], "label": "flat"}], tmp_path / "l.svg")
    root = parse(path)
    lines = list(root.iter(NS + "polyline"))
    assert len(lines) == 2
    # vertices are drawn in increasing x
    px = [float(p.split(",")[0]) for p in lines[0].get("points").split()]
    assert px == sorted(px)
    assert "a<b" in [t.text for t in root.iter(NS + "text")]


def test_single_point_series(tmp_path):
    root = parse(emit_svg_lines([{"x": [1.0], "y": [2.0]}], tmp_path / "p.svg"))
    assert len(list(root.iter(NS + "polyline"))) == 1
    root = parse(emit_svg_scatter([{"points": [[1.0, 1.0]]}], tmp_path / "q.svg"))
    assert len([c for c in root.iter(NS + "circle")]) >= 1


def test_empty_and_nonfinite_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_svg_scatter([{"points": np.zeros((0, 2))}], tmp_path / "e.svg")
    with pytest.raises(ValueError):
        emit_svg_lines([{"x": [0.0, 1.0], "y": [0.0, np.nan]}], tmp_path / "n.svg")
