from relight.figures import save_metric_chart, save_training_curves
from relight.metrics import MetricReport, MetricRow
from relight.train import EpochLog


def test_training_curve_rendered(tmp_path):
    logs = [EpochLog(epoch=e, loss=1.0 / (e + 1), lr=1e-4 * (e + 1), seconds=0.5)
            for e in range(20)]
    out = tmp_path / "curve.png"
    save_training_curves(logs, out)
    assert out.stat().st_size > 1000


def test_metric_chart_rendered_with_inf_psnr(tmp_path):
    report = MetricReport(
        rows=[
            MetricRow("a.png", 28.3, 0.91),
            MetricRow("b.png", float("inf"), 1.0),
            MetricRow("c.png", 31.7, 0.87),
        ],
        mean_psnr=float("inf"),
        mean_ssim=0.9267,
    )
    out = tmp_path / "report.png"
    save_metric_chart(report, out)
    assert out.stat().st_size > 1000
