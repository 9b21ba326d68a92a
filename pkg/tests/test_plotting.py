import numpy as np

from freelb_lab import plotting
from freelb_lab.robustness import EvalReport
from freelb_lab.trainers import TrainReport


def png_ok(path):
    data = path.read_bytes()
    return data[:8] == b"\x89PNG\r\n\x1a\n" and len(data) > 1000


def fake_report(name, seed):
    gen = np.random.default_rng(seed)
    rows = [{"index": i, "filtered": i == 0, "correct": True, "eps": float(gen.uniform(0.1, 0.2)),
             "delta_loss_max": None if i == 0 else float(gen.lognormal(-3, 1)), "natural_loss": 0.1,
             "nonfinite": False} for i in range(30)]
    return EvalReport(name, "ref", rows, {}, {})


def test_training_figure(tmp_path):
    rep = TrainReport("freelb", [{"epoch": e, "train_loss": 1.0 / e, "dev_acc": 0.5 + 0.1 * e} for e in (1, 2, 3)])
    assert png_ok(plotting.plot_training(rep, tmp_path / "f" / "train.png"))


def test_increment_and_budget_figures(tmp_path):
    comp = {"a": {"a": fake_report("a", 0), "b": fake_report("b", 1)},
            "b": {"a": fake_report("a", 2), "b": fake_report("b", 3)}}
    assert png_ok(plotting.plot_increments(comp, tmp_path / "inc.png"))
    assert png_ok(plotting.plot_budgets(comp["a"]["a"], tmp_path / "eps.png"))
