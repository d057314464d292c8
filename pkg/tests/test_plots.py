import pytest

from ansguard.errors import ConfigError
from ansguard.plots import line_chart, write_line_chart


def test_one_polyline_per_series():
    svg = line_chart(
        [("clean", [(0, 1.0), (0.5, 0.8), (1, 0.1)]), ("adv <pgd>", [(0, 0.2), (1, 0.0)])],
        "Accuracy & ablation", "fraction", "accuracy",
    )
    assert svg.startswith("<svg")
    assert svg.count("<polyline") == 2
    assert "Accuracy &amp; ablation" in svg
    assert "adv &lt;pgd&gt;" in svg


def test_flat_series_still_renders(tmp_path):
    path = write_line_chart(tmp_path / "flat.svg", [("one", [(3, 2.0)])], "t", "x", "y")
    assert path.read_text().rstrip().endswith("</svg>")


def test_empty_chart_is_rejected():
    with pytest.raises(ConfigError):
        line_chart([("nothing", [])], "t", "x", "y")
