"""Harness tests: reproducible artifacts, summaries, dumps, persistence."""

import numpy as np
import pytest

# the tiny test worlds have fewer than 5 classes, so top-5 clamps and warns
pytestmark = pytest.mark.filterwarnings("ignore:k=5 exceeds class count")

from verbnoun.data import GeneratorSpec, generate_dataset
from verbnoun.errors import ConfigError
from verbnoun.harness import (
    CSV_COLUMNS,
    GradcheckReport,
    ResultRecord,
    RunConfig,
    dump_attention,
    gradcheck_suite,
    load_params,
    ordering_matrix,
    run_ablation,
    save_params,
    summarize,
    variant_means,
    write_csv,
)
from verbnoun.sap import BranchFeature, NOUN, ObjectBank, SapParams, VERB
from verbnoun.training import Labels
from verbnoun.data import Episode

TINY_SPEC = dict(C=8, V=3, U=4, M=2, K=2, distractor_count=1)


def tiny_config(outdir, **over):
    values = dict(
        spec=GeneratorSpec(**TINY_SPEC),
        variants=("baseline", "full"),
        seeds=(0, 1),
        train_size=12, val_size=6, epochs=2, batch_size=6,
        learning_rate=0.1, outdir=str(outdir),
    )
    values.update(over)
    return RunConfig(**values)


# ------------------------------------------------------------- validation

def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(variants=()).validate()
    with pytest.raises(ConfigError):
        RunConfig(variants=("full", "sap9000")).validate()
    with pytest.raises(ConfigError):
        RunConfig(seeds=()).validate()
    with pytest.raises(ConfigError):
        RunConfig(train_size=0).validate()
    with pytest.raises(ConfigError):
        RunConfig(epochs=-1).validate()
    RunConfig().validate()  # defaults are valid


# --------------------------------------------------------------- artifacts

def test_run_ablation_writes_artifacts(tmp_path):
    cfg = tiny_config(tmp_path / "run")
    records = run_ablation(cfg)
    # one train + one val record per (variant, seed) cell
    assert len(records) == len(cfg.variants) * len(cfg.seeds) * 2
    for name in ("results.csv", "results.jsonl", "summary.txt"):
        assert (tmp_path / "run" / name).exists()
    csv = (tmp_path / "run" / "results.csv").read_text().splitlines()
    assert csv[0] == ",".join(CSV_COLUMNS)
    assert len(csv) == 1 + len(records)
    assert "wall_clock" not in csv[0]


def test_identical_configs_give_byte_identical_csv(tmp_path):
    run_ablation(tiny_config(tmp_path / "a"))
    run_ablation(tiny_config(tmp_path / "b"))
    assert (tmp_path / "a" / "results.csv").read_bytes() \
        == (tmp_path / "b" / "results.csv").read_bytes()
    assert (tmp_path / "a" / "summary.txt").read_bytes() \
        == (tmp_path / "b" / "summary.txt").read_bytes()


def make_record(variant, seed, split, noun_top1):
    return ResultRecord(variant=variant, seed=seed, split=split,
                        verb_top1=0.5, verb_top5=0.9,
                        noun_top1=noun_top1, noun_top5=0.8,
                        action_top1=0.3, action_top5=0.6,
                        action_top1_raw=0.25, action_top5_raw=0.55,
                        epochs=1, wall_clock=1.23)


def test_variant_means_and_ordering():
    records = [
        make_record("full", 0, "val", 0.6), make_record("full", 1, "val", 0.8),
        make_record("base", 0, "val", 0.4), make_record("base", 1, "val", 0.2),
        make_record("full", 0, "train", 0.99),  # other splits ignored
    ]
    means = variant_means(records)
    assert means["full"][0] == pytest.approx(0.7)
    assert means["base"][0] == pytest.approx(0.3)
    order = ordering_matrix(means)
    assert order[("full", "base")] and not order[("base", "full")]


def test_summarize_mentions_each_variant():
    records = [make_record("full", 0, "val", 0.6),
               make_record("baseline", 0, "val", 0.3)]
    text = summarize(records, RunConfig(variants=("full", "baseline"),
                                        seeds=(0,)))
    assert "full" in text and "baseline" in text
    assert ">" in text  # the pairwise ordering matrix


def test_write_csv_formats_floats_stably(tmp_path):
    path = tmp_path / "r.csv"
    write_csv(path, [make_record("full", 0, "val", 1 / 3)])
    row = path.read_text().splitlines()[1].split(",")
    assert row[CSV_COLUMNS.index("noun_top1")] == "0.333333"


# ---------------------------------------------------------- attention dump

def test_dump_attention_format(tmp_path):
    spec = GeneratorSpec(**TINY_SPEC)
    ep = generate_dataset(spec, 1)[0]
    params = SapParams.init(spec.C, spec.V, spec.U, seed=0)
    path = tmp_path / "att.csv"
    dump_attention(params, ep, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "row,frame_index,confidence,noun_weight,verb_weight"
    assert len(lines) == 1 + spec.N
    weights = [float(line.split(",")[3]) for line in lines[1:]]
    assert weights == sorted(weights, reverse=True)
    assert sum(weights) == pytest.approx(1.0, abs=1e-6)


def test_dump_attention_empty_bank_marker(tmp_path):
    ep = Episode(
        verb_feature=BranchFeature(np.zeros(8), VERB),
        noun_feature=BranchFeature(np.zeros(8), NOUN),
        bank=ObjectBank(np.zeros((0, 8)), np.zeros(0),
                        np.zeros(0, dtype=np.int64)),
        labels=Labels(0, 0),
    )
    path = tmp_path / "att.csv"
    dump_attention(SapParams.init(8, 3, 4, seed=0), ep, path)
    assert path.read_text().startswith("baseline-fallback")


# ------------------------------------------------------------- persistence

def test_params_round_trip(tmp_path):
    params = SapParams.init(8, 3, 4, seed=7)
    path = tmp_path / "params.npz"
    save_params(path, params)
    loaded = load_params(path)
    for (na, ta), (nb, tb) in zip(params.named_tensors(),
                                  loaded.named_tensors()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_suite_single_seed_quick():
    report = gradcheck_suite(tol=1e-4, h=1e-6, seeds=(0,))
    assert isinstance(report, GradcheckReport)
    assert report.passed, report.render()
    assert "sap_full_loss@seed0" in report.render()
