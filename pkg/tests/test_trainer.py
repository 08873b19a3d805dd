import math

import numpy as np
import pytest

from pctl.data import GeneratorConfig, generate_synthetic
from pctl.encoder import SOURCE, TARGET, init_state
from pctl.loss import LossConfigError
from pctl.trainer import (
    METRIC_COLUMNS,
    TrainConfig,
    TrainingAborted,
    compare_methods,
    evaluate,
    evaluate_arrays,
    format_table,
    plot_metrics,
    read_metrics_csv,
    run_ablation,
    train,
    train_fine_tune,
    train_pctl,
    train_target_only,
    write_metrics_csv,
    write_timing_csv,
)


@pytest.fixture(scope="module")
def ds():
    counts = {SOURCE: {"train": 96, "val": 16, "test": 16}, TARGET: {"train": 64, "val": 32, "test": 32}}
    return generate_synthetic(GeneratorConfig(counts=counts, d_inst=6, d_vis=6, n_det=2, seed=11))


def tiny(**kw):
    base = dict(d=6, hidden=8, cls_hidden=6, k_schedule=(4,), r=4, r_prime=2, batch_size=16, epochs=2, pretrain_epochs=2, lr=0.05, body_lr=0.05, gamma=0.9)
    base.update(kw)
    return TrainConfig(**base)


def test_pctl_metrics_csv_is_byte_identical(ds, tmp_path):
    paths = []
    for name in ("a", "b"):
        _, metrics = train_pctl(tiny(k_schedule=(4, 5)), ds)
        paths.append(tmp_path / f"{name}.csv")
        write_metrics_csv(metrics, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    rows = read_metrics_csv(paths[0])
    assert list(rows[0]) == METRIC_COLUMNS
    assert len(rows) == 2


def test_different_seed_changes_the_run(ds):
    _, a = train_pctl(tiny(seed=0), ds)
    _, b = train_pctl(tiny(seed=1), ds)
    assert a.rows[0]["total"] != b.rows[0]["total"]


def test_pctl_rows_satisfy_the_loss_identity(ds):
    _, metrics = train_pctl(tiny(), ds)
    for row in metrics.rows:
        assert row["lam"] == pytest.approx(1 / 32)
        assert row["source_batches"] == row["target_batches"] == 4
        assert math.isfinite(row["total"])
    assert metrics.best_epoch is not None
    assert all(e <= 1e-9 for e in metrics.bank_tau_errors)
    assert len(metrics.bank_tau_errors) == 2


def test_lambda_zero_leaves_only_classification(ds):
    _, metrics = train_pctl(tiny(lam=0.0), ds)
    for row in metrics.rows:
        assert row["lam"] == 0.0
        assert row["total"] == pytest.approx(row["l_t"] + row["l_s"], rel=1e-12)
        assert row["dual"] > 0


def test_target_only_never_sees_source(ds):
    _, metrics = train_target_only(tiny(), ds)
    assert metrics.source_batches == 0
    assert metrics.target_batches == 2 * 4
    assert all(r["phase"] == "main" and r["lam"] == 0.0 for r in metrics.rows)


def test_fine_tune_starts_from_pretrained_weights(ds):
    _, metrics = train_fine_tune(tiny(), ds)
    assert metrics.extra["pretrain_final_digest"] == metrics.extra["finetune_initial_digest"]
    assert [r["phase"] for r in metrics.rows] == ["pretrain", "pretrain", "main", "main"]
    assert metrics.phase_boundaries == [0, 2]
    # model selection only looks at the target phase
    assert metrics.best_epoch >= 2
    assert metrics.rows[0]["source_batches"] == 6 and metrics.rows[0]["target_batches"] == 0


def test_zero_pretraining_equals_target_only(ds):
    _, ft = train_fine_tune(tiny(pretrain_epochs=0), ds)
    _, to = train_target_only(tiny(), ds)
    for a, b in zip(ft.rows, to.rows):
        assert a == b


def test_train_dispatches_on_mode(ds):
    _, metrics = train(tiny(mode="target_only"), ds)
    assert metrics.source_batches == 0


def test_invalid_configs_rejected(ds):
    with pytest.raises(LossConfigError, match="minimum k"):
        train_pctl(tiny(k_schedule=(2,)), ds)
    with pytest.raises(ValueError):
        train(tiny(mode="bogus"), ds)
    with pytest.raises(ValueError):
        train(tiny(gamma=1.5), ds)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_update_aborts_with_location(ds):
    with pytest.raises(TrainingAborted) as info:
        train_target_only(tiny(lr=1e308, body_lr=1e308, epochs=3), ds)
    err = info.value
    assert err.phase == "main"
    assert err.epoch >= 0 and err.batch >= 0
    assert "epoch" in str(err)


def test_evaluate_confusion_counts(ds):
    state = init_state(tiny().model_config(ds), 0)
    for k in state.classifier:
        state.classifier[k].data[...] = 0.0
    res = evaluate(state, ds, "test", TARGET)
    # equal logits: every sample is called positive at p = 0.5
    assert (res.tp, res.fp, res.fn, res.tn) == (16, 16, 0, 0)
    assert res.accuracy == 0.5
    assert res.ce == pytest.approx(math.log(2), abs=1e-15)
    state.classifier["cls2.b"].data[...] = [0.0, -math.log(3.0)]
    res = evaluate_arrays(state, np.zeros((4, state.config.input_dim)), np.array([0, 0, 0, 1]))
    assert (res.tp, res.fp, res.fn, res.tn) == (0, 0, 1, 3)
    assert res.ce == pytest.approx((3 * -math.log(0.75) - math.log(0.25)) / 4, rel=1e-14)
    with pytest.raises(ValueError):
        evaluate_arrays(state, np.zeros((0, state.config.input_dim)), np.array([]))


def test_compare_and_ablation_tables(ds):
    res = compare_methods(tiny(epochs=1, pretrain_epochs=1), ds, seeds=(0, 1))
    assert set(res) == {"pctl", "target_only", "fine_tune"}
    assert all(len(r.accuracies) == 2 for r in res.values())
    abl = run_ablation(tiny(epochs=1), ds, {"k=3": (3,), "k=(3,5)": (3, 5)}, seeds=(0, 1))
    assert [r.schedule for r in abl] == [(3,), (3, 5)]
    assert abl[0].std == pytest.approx(np.std(abl[0].accuracies, ddof=1))
    assert "+-" in format_table(abl)
    with pytest.raises(LossConfigError, match="minimum k"):
        run_ablation(tiny(), ds, {"bad": (2,)}, seeds=(0,))


def test_timing_and_plot_outputs(ds, tmp_path):
    _, metrics = train_target_only(tiny(), ds)
    write_metrics_csv(metrics, tmp_path / "m.csv")
    write_timing_csv(metrics, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "epoch,phase,seconds"
    plot_metrics(tmp_path / "m.csv", tmp_path / "m.svg")
    assert (tmp_path / "m.svg").read_text().lstrip().startswith("<?xml")
