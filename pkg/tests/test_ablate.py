"""Benchmark presets, paired-arm runners, and supervision bookkeeping."""

import numpy as np
import pytest

from querytrack.ablate import (EVAL_SCRIPTS, NOISE_PRESETS, TRAIN_SCENES,
                               AxisReport, SeedScores, ablate_m,
                               benchmark_config, eval_script, m_report_text,
                               score_arm, separable_fixture,
                               supervision_counts)
from querytrack.config import RunConfig
from querytrack.scene import BUILTIN_SCRIPTS, builtin_script
from querytrack.tracker import pretrain_dem


@pytest.fixture(scope="module")
def config():
    return benchmark_config()


@pytest.fixture(scope="module")
def crossing_dem(config):
    return pretrain_dem(config, [builtin_script("crossing")], seed=0)


def test_benchmark_config_sets_plain_gradient_tuning_rate():
    config = benchmark_config()
    assert config.prompt_lr == 1.0
    assert config.tune_batch == 128
    assert benchmark_config(patience=3).patience == 3


def test_noise_presets_cover_the_three_regimes():
    assert set(NOISE_PRESETS) == {"oracle", "standard", "shifted"}
    oracle = NOISE_PRESETS["oracle"]
    assert all(v == 0.0 for v in oracle.as_dict().values())
    standard = NOISE_PRESETS["standard"]
    assert standard.domain_shift == 0.0
    assert standard.clutter_rate > 0.0 and standard.drop_prob > 0.0
    shifted = NOISE_PRESETS["shifted"]
    assert shifted.domain_shift > 0.0
    for field in ("box_sigma", "logit_sigma", "embed_sigma", "drop_prob",
                  "clutter_rate"):
        assert getattr(shifted, field) >= getattr(standard, field)


def test_train_scenes_are_builtin():
    assert all(name in BUILTIN_SCRIPTS for name in TRAIN_SCENES)


def test_eval_scenes_hide_targets_longer_than_patience():
    patience = RunConfig().patience
    for name in EVAL_SCRIPTS:
        script = eval_script(name)
        script.validate()
        windows = [hi - lo + 1 for spec in script.objects.values()
                   for lo, hi, vis in spec.occlusions if vis == 0.0]
        assert windows, name
        assert all(w > patience for w in windows), name


def test_eval_script_rejects_unknown_name():
    with pytest.raises(ValueError, match="unknown evaluation scene"):
        eval_script("nope")


def test_supervision_counts_exact_bookkeeping():
    qbs, motr = supervision_counts()
    assert (qbs, motr) == (80, 4)
    assert qbs >= 3 * motr


def test_supervision_counts_scale_with_frames():
    # 4 targets: every frame adds 4 balanced positives, newborns only once
    qbs10, motr10 = supervision_counts(frames=10)
    assert (qbs10, motr10) == (40, 4)


def test_score_arm_oracle_is_perfect(config, crossing_dem):
    scores = score_arm([builtin_script("crossing")], config, crossing_dem,
                       NOISE_PRESETS["oracle"], seed=0, scene_seed=0)
    assert scores == SeedScores(seed=0, mota=1.0, idf1=1.0, hota=1.0,
                                fp=0, fn=0, ids=0)


def test_score_arm_pools_counts_across_scenes(config, crossing_dem):
    scripts = [builtin_script("crossing")]
    one = score_arm(scripts, config, crossing_dem, NOISE_PRESETS["standard"],
                    seed=100, scene_seed=0)
    two = score_arm(scripts * 2, config, crossing_dem,
                    NOISE_PRESETS["standard"], seed=100, scene_seed=0)
    assert two.fp == 2 * one.fp
    assert two.fn == 2 * one.fn
    assert two.mota == pytest.approx(one.mota)


def test_separable_fixture_layout(config):
    book, pool = separable_fixture(config, identities=4, samples=3)
    assert book.identities() == [1, 2, 3, 4]
    assert len(pool) == 12
    ids = [e.identity for e in pool.entries()]
    assert sorted(set(ids)) == [1, 2, 3, 4]


def test_ablate_m_small_sweep_reports_all_lengths():
    rows = ablate_m(sweep=(2, 4), steps=60)
    assert sorted(rows) == [2, 4]
    for row in rows.values():
        assert set(row) == {"final_loss", "retrieval_t2i", "retrieval_i2t",
                            "margin"}
        assert np.isfinite(row["final_loss"])
        assert 0.0 <= row["margin"] <= 1.0
        assert row["retrieval_t2i"] == 1.0


def test_m_report_text_format():
    rows = {2: {"final_loss": 3.9, "retrieval_t2i": 1.0,
                "retrieval_i2t": 0.975, "margin": 0.8625},
            4: {"final_loss": 3.8, "retrieval_t2i": 1.0,
                "retrieval_i2t": 1.0, "margin": 1.0}}
    text = m_report_text(rows)
    lines = text.splitlines()
    assert lines[0] == "axis: m"
    assert len(lines) == 4
    assert lines[2].split()[0] == "2"
    assert lines[3].split()[0] == "4"


def test_axis_report_text_lists_arms():
    rows = [SeedScores(seed=100, mota=0.5, idf1=0.6, hota=0.55, fp=3, fn=2,
                       ids=1)]
    report = AxisReport(axis="dem", arms={"dem-on": rows, "dem-off": rows},
                        summary={"dem-on": {"mota": 0.5, "idf1": 0.6,
                                            "hota": 0.55, "fp": 3.0,
                                            "fn": 2.0, "ids": 1.0},
                                 "dem-off": {"mota": -0.1, "idf1": 0.4,
                                             "hota": 0.3, "fp": 30.0,
                                             "fn": 2.0, "ids": 5.0}},
                        extras={"note": "x"})
    text = report.text()
    assert text.splitlines()[0] == "axis: dem"
    assert "dem-on" in text and "dem-off" in text
    assert "note: x" in text
