import pathlib
import runpy

import matplotlib
import pytest

DEMOS = sorted((pathlib.Path(__file__).parent.parent / "demos").glob("plot_*.py"))


@pytest.mark.parametrize("script", DEMOS, ids=lambda p: p.stem)
def test_demo_runs(script, monkeypatch):
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    monkeypatch.setattr(plt, "show", lambda *a, **k: None)
    runpy.run_path(str(script), run_name="__main__")
    plt.close("all")
