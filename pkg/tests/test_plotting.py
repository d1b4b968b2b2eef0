import pytest

from trackquery.plotting import plot_fold_accuracy, plot_loss_curves, plot_segment
from trackquery.synthetic import pop_corpus
from trackquery.voicesep import FoldResult

PNG = b"\x89PNG\r\n\x1a\n"


def _history(n=5):
    return [
        {"epoch": e, "total": 3.0 / (e + 1), "track_recon": 2.0 / (e + 1), "val_total": 3.5 / (e + 1),
         "lr": 1e-3 * 0.5**e, "beta_f": 0.1 * e, "beta_o": 0.002 * e, "tf_rate": 0.8 - 0.2 * e}
        for e in range(n)
    ]


class TestFigures:
    def test_loss_curves(self, tmp_path):
        p = plot_loss_curves(_history(), tmp_path / "loss.png")
        assert p.read_bytes().startswith(PNG)

    def test_loss_curves_deterministic(self, tmp_path):
        a = plot_loss_curves(_history(), tmp_path / "a.png").read_bytes()
        b = plot_loss_curves(_history(), tmp_path / "b.png").read_bytes()
        assert a == b

    def test_empty_history(self, tmp_path):
        with pytest.raises(ValueError):
            plot_loss_curves([], tmp_path / "x.png")

    def test_fold_accuracy(self, tmp_path):
        folds = [FoldResult(k, 36, 4, 80.0 + k, 90.0 + k / 2) for k in range(4)]
        p = plot_fold_accuracy(folds, tmp_path / "f.png", baseline=25.0)
        assert p.read_bytes().startswith(PNG)

    def test_segment(self, tmp_path):
        seg = pop_corpus(1, seed=1)[0]
        a = plot_segment(seg, tmp_path / "s.png", title="x").read_bytes()
        assert a.startswith(PNG)
        assert a == plot_segment(seg, tmp_path / "t.png", title="x").read_bytes()
