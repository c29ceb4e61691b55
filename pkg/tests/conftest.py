import numpy as np
import pytest

from guidedrep.guidance import (Batch, ModelConfig, MultiTaskModel, categorical_head, main_head,
                                regression_head)


def tiny_model(heads=None, dropout=0.0, seed=0, dtype="float64", input_shape=(8, 8, 3), **kw):
    cfg = ModelConfig(input_shape, conv_channels=(3, 4), dense_widths=(6, 5), dropout=dropout, dtype=dtype, **kw)
    if heads is None:
        heads = [main_head(0.7, 0.3), regression_head("count"), categorical_head("center", 3)]
    return MultiTaskModel(cfg, heads, seed=seed)


def tiny_batch(n=6, seed=0, size=8, n_domains=3):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    return Batch(rng.random((n, size, size, 3)), labels,
                 {"count": rng.normal(size=n), "area": rng.normal(size=n), "center": np.arange(n) % n_domains},
                 np.arange(n) % n_domains, np.array([f"s{i}" for i in range(n)]))


@pytest.fixture
def batch():
    return tiny_batch()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_GEN = dict(image_size=16, count_mean_neg=1.5, count_mean_pos=3.0, radius_mean_neg=1.6, radius_std_neg=0.2,
                radius_mean_pos=2.0, radius_std_pos=0.3, radius_min=1.2, n_train=40, n_val=12, n_int_test=20,
                n_ext_test=12)
TINY_EXP = dict(conv_channels=(3, 4), dense_widths=(8,), dropout=0.0, max_epochs=2, batch_size=16, n_bootstrap=6,
                input_offset=0.7, input_scale=3.0)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    from guidedrep.synthdata import GeneratorConfig, generate_dataset

    path = tmp_path_factory.mktemp("tinydata")
    generate_dataset(GeneratorConfig(**TINY_GEN), path)
    return path


@pytest.fixture
def tiny_cfg():
    from guidedrep.experiments import ExperimentConfig

    return ExperimentConfig(**TINY_EXP)


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    if report.when == "call" or report.failed:
        # Parametrized cases of one criterion merge into a single line.
        name, verdict, details = _CRITERIA.get(mark.args[0], (mark.args[1], "PASS", []))
        details += [f"{k}={v}" for k, v in item.user_properties if f"{k}={v}" not in details]
        _CRITERIA[mark.args[0]] = (name, verdict if report.passed else "FAIL", details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, verdict, details = _CRITERIA[n]
        detail = "; ".join(details)
        terminalreporter.write_line(f"criterion {n:>2} {verdict}  {name}" + (f"  [{detail}]" if detail else ""))
