import math

import pytest

from tactbind import data
from tactbind.ablation import CellResult, EncoderResult, InvariantError, MetricsReport, run_ablation
from tactbind.config import RunConfig
from tactbind.fusion import GROUPS, VARIANTS

TINY = RunConfig(n_trajectories=12, grid=3, pretrain_epochs=1, finetune_epochs=1, test_fraction=0.25,
                 n_layers=4, width=8, heads=2, feature_dim=8, lstm_hidden=8, out_dim=8)


def fake_report(scores, seeds=(0, 1)):
    r = MetricsReport(list(seeds), "f")
    for s in seeds:
        r.encoders += [EncoderResult("lstm", s, 60.0, 90.0, 10.0, 30.0), EncoderResult("frame", s, 50.0, 80.0, 9.0, 20.0)]
        for g in GROUPS:
            for v in VARIANTS:
                r.cells.append(CellResult(v, g, s, scores[(v, g)][s], 1.0, 0.1))
    return r


def test_orderings_and_aggregates():
    scores = {(v, g): {0: 1.0 + i + (j == 0), 1: 1.5 + i + (j == 0)}
              for i, v in enumerate(VARIANTS) for j, g in enumerate(GROUPS)}
    r = fake_report(scores)
    assert r.cell_stat("aware", "tactile_only") == (3.25, 0.25)
    assert all(ok for _, ok, _ in r.orderings())
    text = r.to_text()
    assert "ordering.tactile_only_aware_ge_even_mean=holds" in text
    assert "reference.cell.aware.tactile_only.score=2.605" in text


def test_violations_are_reported_not_hidden():
    scores = {(v, g): {0: 2.0, 1: 2.0} for v in VARIANTS for g in GROUPS}
    scores[("base", "tactile_only")] = {0: 3.0, 1: 1.0}
    r = fake_report(scores)
    status = {name: ok for name, ok, _ in r.orderings()}
    assert not status["tactile_only_aware_gt_base_each_seed"]
    assert "seed0=violated" in r.to_text()


def test_top1_above_top5_is_an_invariant_error(tmp_path):
    r = fake_report({(v, g): {0: 1.0, 1: 1.0} for v in VARIANTS for g in GROUPS})
    r.encoders[0].top1 = 95.0
    with pytest.raises(InvariantError):
        r.write(tmp_path)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failed_cells_are_marked_and_others_proceed():
    recs = data.generate_dataset(12, 12, 0, grid=(3, 3))
    bad = TINY.with_updates({"finetune_lr": "inf"})
    r = run_ablation(recs, [0], bad)
    assert all(c.failed for c in r.cells)
    assert not any(e.failed for e in r.encoders)
    assert "cell.aware.tactile_only.seed0.score=FAILED" in r.to_text()
    assert math.isnan(r.cell_stat("aware", "tactile_only")[0])


def test_serialisation_is_deterministic_and_job_count_independent():
    recs = data.generate_dataset(12, 12, 0, grid=(3, 3))
    a = run_ablation(recs, [0, 1], TINY, jobs=1)
    b = run_ablation(recs, [0, 1], TINY, jobs=2)
    assert a.to_text() == b.to_text()
    assert a.to_csv() == b.to_csv()
    assert a.to_csv().splitlines()[0] == "record,name,group,seed,metric,value"


def test_seed_list_validation():
    with pytest.raises(ValueError):
        run_ablation([], [], TINY)
    with pytest.raises(ValueError):
        run_ablation([], [1, 1], TINY)
