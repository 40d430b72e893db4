import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loraserve.settings import get_setting
from loraserve.workload import (
    WORKLOAD_PRESETS,
    InsufficientLog,
    RawLogEntry,
    SyntheticConfig,
    Trace,
    TraceEntry,
    TraceError,
    downsample_real,
    gamma_arrivals,
    gen_synthetic,
    power_law_rates,
    rank_for_adapter,
    read_raw_log,
)


def test_power_law_two_adapters():
    np.testing.assert_allclose(power_law_rates(2, 1.0, 3.0), [2.0, 1.0], rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 2000), alpha=st.floats(0.01, 4), total=st.floats(0.01, 100))
def test_power_law_sums_to_total(n, alpha, total):
    rates = power_law_rates(n, alpha, total)
    assert abs(rates.sum() - total) <= 1e-12 * max(1.0, total)
    assert np.all(np.diff(rates) <= 0)


def test_power_law_small_alpha_is_uniform():
    np.testing.assert_allclose(power_law_rates(50, 1e-12, 5.0), 0.1, rtol=1e-9)


@pytest.mark.parametrize("cv,seed", [(1.0, 0), (0.5, 1), (2.0, 2), (4.0, 3)])
def test_gamma_rate_and_cv(cv, seed):
    lam, D = 40.0, 250.0  # lam * D = 10_000
    t = gamma_arrivals(lam, cv, D, seed)
    assert np.all(np.diff(t) >= 0) and t.min() >= 0 and t.max() < D
    gaps = np.diff(t)
    assert abs(len(t) / D - lam) <= 0.05 * lam
    assert abs(gaps.std() / gaps.mean() - cv) <= 0.10 * cv


def test_bursty_low_rate_counts_are_unbiased():
    # many short low-rate streams: the mean count must stay close to lam * D
    counts = [len(gamma_arrivals(0.05, 8.0, 60.0, s)) for s in range(4000)]
    assert abs(np.mean(counts) - 3.0) < 0.3


def test_preset_request_count():
    cfg = WORKLOAD_PRESETS["7b-a10g"]
    trace = gen_synthetic(cfg, get_setting("S2").ranks)
    assert cfg.n_adapters == 200 and cfg.duration == 300
    assert abs(len(trace) - 600) < 0.1 * 600
    trace.validate()
    lens = np.array([(e.input_len, e.output_len) for e in trace])
    assert lens.min() >= 8 and lens.max() <= 512


def test_round_robin_ranks():
    ranks = get_setting("S2").ranks
    assert [rank_for_adapter(i, ranks) for i in range(8)] == [64, 32, 16, 8, 64, 32, 16, 8]


def test_same_seed_same_trace():
    cfg = SyntheticConfig(n_adapters=20, total_rate=3, cv=2, duration=60, seed=5)
    assert gen_synthetic(cfg).dumps() == gen_synthetic(cfg).dumps()
    other = SyntheticConfig(n_adapters=20, total_rate=3, cv=2, duration=60, seed=6)
    assert gen_synthetic(cfg).dumps() != gen_synthetic(other).dumps()


@pytest.mark.parametrize("kwargs", [dict(alpha=0), dict(total_rate=-1), dict(cv=0),
                                    dict(input_range=(5, 4)), dict(output_range=(0, 3)),
                                    dict(n_adapters=0)])
def test_config_validation(kwargs):
    with pytest.raises(TraceError):
        SyntheticConfig(**kwargs)


def test_trace_round_trip(tmp_path):
    trace = gen_synthetic(SyntheticConfig(n_adapters=5, duration=20, seed=1))
    path = tmp_path / "t.txt"
    trace.save(path)
    back = Trace.load(path)
    assert back.entries == trace.entries and back.metadata == trace.metadata
    assert path.read_text().splitlines()[1] == "time_s,adapter_id,input_len,output_len"


def test_trace_validation_errors():
    with pytest.raises(TraceError):
        Trace([TraceEntry(1.0, 0, 5, 5), TraceEntry(0.5, 0, 5, 5)]).validate()
    with pytest.raises(TraceError):
        Trace([TraceEntry(0.0, 0, 600, 5)], {"input_range": [8, 512]}).validate()
    with pytest.raises(TraceError):
        Trace.loads("{}\nwrong,header\n")


def fake_chat_log(n, seed=0):
    # lengths and model mix loosely shaped like a multi-model chat log
    rng = np.random.default_rng(seed)
    names = [f"model-{i}" for i in range(26)]
    weights = 1.0 / np.arange(1, 27)
    weights /= weights.sum()
    t = np.cumsum(rng.exponential(2.0, size=n))
    return [RawLogEntry(float(t[i]), names[int(rng.choice(26, p=weights))],
                        int(max(1, rng.exponential(85))), int(max(1, rng.exponential(165))))
            for i in range(n)]


def test_downsample_real(tmp_path):
    raw = fake_chat_log(3000)
    path = tmp_path / "raw.csv"
    with open(path, "w") as fh:
        fh.write("timestamp,model_name,input_len,output_len\n")
        for e in raw:
            fh.write(f"{e.timestamp!r},{e.model_name},{e.input_len},{e.output_len}\n")
    loaded = read_raw_log(path)
    assert loaded == raw
    trace = downsample_real(loaded, rate=2, duration=300, seed=1)
    assert len(trace) == 600
    times = [e.arrival_time for e in trace]
    assert times[0] == 0.0 and times[-1] == pytest.approx(300.0) and times == sorted(times)
    # most requested model becomes adapter 0
    counts = np.bincount([e.adapter_id for e in trace])
    assert counts[0] == counts.max()
    assert trace.metadata["n_adapters"] <= 26


def test_downsample_needs_enough_entries():
    with pytest.raises(InsufficientLog):
        downsample_real([], 2, 300)
    with pytest.raises(InsufficientLog):
        downsample_real(fake_chat_log(10), 2, 300)
