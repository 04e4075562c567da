import numpy as np
import pytest

import oracles
from pkgnet.data import LabelTrack
from pkgnet.evaluation import EvalError, auroc, evaluate, export_curves
from pkgnet.scoring import RunScores, ScoreSeries, ScoreStats, ScoreWeights


def _run(series: dict[str, np.ndarray]) -> RunScores:
    out = {}
    for vid, x in series.items():
        x = np.asarray(x, float)
        out[vid] = ScoreSeries(vid, x, x.copy(), {"S_e": x * 2}, np.ones(len(x), int))
    return RunScores(out, ScoreStats(0.0, 1.0), ScoreWeights(1.0, {}), {"mode": "AE_only"})


def test_examples():
    assert auroc([0.1, 0.9], [0, 1]) == 1.0
    assert auroc(np.ones(10), [0, 1] * 5) == 0.5


@pytest.mark.parametrize("n", [50, 200])
def test_pairwise_oracle(rng, n):
    for _ in range(5):
        s = np.round(rng.normal(size=n), 2)
        y = (rng.random(n) < 0.4).astype(int)
        assert abs(auroc(s, y) - oracles.pairwise_auroc(s.tolist(), y.tolist())) <= 1e-9


def test_monotone_invariance_and_complement(rng):
    s = rng.normal(size=100)
    y = (rng.random(100) < 0.3).astype(int)
    a = auroc(s, y)
    assert auroc(np.exp(3 * s) + 7, y) == pytest.approx(a, abs=1e-12)
    assert a + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_errors():
    with pytest.raises(EvalError, match="single-class"):
        auroc([0.1, 0.2], [0, 0])
    with pytest.raises(EvalError, match="length"):
        auroc([0.1, 0.2], [0, 1, 1])
    with pytest.raises(EvalError, match="binary"):
        auroc([0.1, 0.2], [0, 2])
    with pytest.raises(EvalError, match="non-finite"):
        auroc([np.nan, 0.2], [0, 1])


def test_evaluate_micro(rng):
    xs = {f"v{i}": rng.normal(size=30) for i in range(3)}
    ys = {v: (rng.random(30) < 0.3).astype(int) for v in xs}
    r = evaluate(_run(xs), {v: LabelTrack(v, y) for v, y in ys.items()})
    cat_x = np.concatenate([xs[v] for v in sorted(xs)])
    cat_y = np.concatenate([ys[v] for v in sorted(xs)])
    assert r.auroc_micro == pytest.approx(oracles.pairwise_auroc(cat_x.tolist(), cat_y.tolist()), abs=1e-12)
    assert r.n_frames == 90 and r.n_anomalous == int(cat_y.sum())


def test_evaluate_perfect():
    r = evaluate(_run({"a": [0, 0, 5, 5], "b": [1, 6, 1, 1]}),
                 {"a": LabelTrack("a", [0, 0, 1, 1]), "b": LabelTrack("b", [0, 1, 0, 0])})
    assert r.auroc_micro == 1.0


def test_evaluate_all_zero_labels():
    with pytest.raises(EvalError, match="single-class"):
        evaluate(_run({"a": [1, 2, 3]}), {"a": LabelTrack("a", [0, 0, 0])})


def test_evaluate_video_order(rng):
    xs = {f"v{i}": rng.normal(size=20) for i in range(4)}
    labels = {v: LabelTrack(v, (rng.random(20) < 0.5).astype(int)) for v in xs}
    a = evaluate(_run(xs), labels)
    b = evaluate(_run(dict(reversed(list(xs.items())))), dict(reversed(list(labels.items()))))
    assert a.to_dict() == b.to_dict()


def test_evaluate_missing_and_mismatch():
    with pytest.raises(EvalError, match="no labels"):
        evaluate(_run({"a": [1, 2]}), {})
    with pytest.raises(EvalError, match="scores vs"):
        evaluate(_run({"a": [1, 2]}), {"a": LabelTrack("a", [0, 1, 1])})


def test_export_curves(tmp_path, rng):
    xs = {f"v{i}": rng.normal(size=25) for i in range(3)}
    labels = {v: LabelTrack(v, np.r_[np.zeros(10), np.ones(5), np.zeros(10)].astype(int)) for v in xs}
    labels["v2"] = LabelTrack("v2", np.zeros(25, int))  # no shaded interval
    files = export_curves(_run(xs), labels, tmp_path / "a")
    assert sorted(p.suffix for p in files) == [".csv", ".png", ".png", ".png"]
    assert all(p.stat().st_size > 0 for p in files)
    csv = (tmp_path / "a" / "curves.csv").read_text().splitlines()
    assert csv[0] == "video_id,frame,label,raw,smoothed,n_objects,S_e" and len(csv) == 76
    export_curves(_run(xs), labels, tmp_path / "b")
    assert (tmp_path / "b" / "curves.csv").read_bytes() == (tmp_path / "a" / "curves.csv").read_bytes()


def test_export_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(EvalError, match="cannot write"):
        export_curves(_run({"a": [1.0]}), {"a": LabelTrack("a", [0])}, blocker / "sub")
