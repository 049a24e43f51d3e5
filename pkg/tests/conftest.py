import os
from pathlib import Path

import numpy as np
import pytest

from posecal.benchmark import TEST_SETS
from posecal.cli import main
from posecal.core import uniform_prior
from posecal.evaluation import global_predict
from posecal.features import featurize_files, load_feature_cache
from posecal.forest import ForestConfig, load_forests, predict_bank, train_patch_bank
from posecal.synthgen import RenderOptions, generate_dataset, load_manifest

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def verdict(request):
    """Record and assert one acceptance criterion."""
    def record(n, ok, detail):
        request.config.stash[ACCEPTANCE][n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n} failed: {detail}"
    return record


@pytest.fixture(scope="session")
def tiny_train(tmp_path_factory):
    """4 chairs x 16 views with the benchmark's rendering options, plus features."""
    d = tmp_path_factory.mktemp("tiny_train")
    opts = RenderOptions(lighting_jitter=0.3, crop_jitter=1.0, rng_seed=123)
    manifest = generate_dataset(4, 16, uniform_prior(), opts, d)
    return manifest, featurize_files(manifest.image_paths())


@pytest.fixture(scope="session")
def tiny_bank(tiny_train):
    manifest, feats = tiny_train
    return train_patch_bank(feats, manifest.labels, ForestConfig(n_trees=3, max_depth=8, seed=5))


@pytest.fixture(scope="session")
def benchmark_dir(tmp_path_factory):
    """Output directory of ``posecal repro --seed 42``.

    Set POSECAL_BENCH_DIR to a finished repro output to reuse it; otherwise
    the benchmark runs once per session, which takes several minutes.
    """
    given = os.environ.get("POSECAL_BENCH_DIR")
    if given and (Path(given) / "report.json").exists():
        return Path(given)
    out = tmp_path_factory.mktemp("bench")
    code = main(["repro", "--seed", "42", "--out", str(out), "--threads", "1"])
    assert code in (0, 1)
    return out


@pytest.fixture(scope="session")
def bench(benchmark_dir):
    """Labels, true priors and patch/global posteriors recomputed from benchmark artifacts."""
    bank = load_forests(benchmark_dir / "bank.pcf")
    (glob,) = load_forests(benchmark_dir / "global.pcf")
    sets = {}
    for name in TEST_SETS:
        d = benchmark_dir / "data" / name
        manifest = load_manifest(d)
        feats = load_feature_cache(d / "features.bin")
        sets[name] = {
            "labels": manifest.labels,
            "prior": manifest.prior_used,
            "q": predict_bank(bank, feats),
            "global": global_predict(glob, feats),
        }
    return sets
