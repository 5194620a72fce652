# External module dependencies
from dataclasses import replace
from pathlib import Path
import struct
import sys
import time
import numpy as np
import pytest
import yaml

# Internal module dependencies
from mamrl.bench import median_of_means, fit_slope, time_call, run_bench
from mamrl.checkpoint import save_checkpoint, read_checkpoint, load_checkpoint
from mamrl.config import (
    BenchConfig,
    EnvConfig,
    ModelConfig,
    RunConfig,
    TrainConfig,
    VerifyConfig,
    parse_config,
    snapshot,
    load_snapshot
)
from mamrl.errors import (
    ConfigError,
    FormatError,
    VersionError,
    TruncatedError,
    ShapeMismatchError,
    NonFiniteError
)
from mamrl.evaluate import Job, JobError, Pool
from mamrl.metrics import MetricsRow, SlopeRow, CsvLog, read_rows
from mamrl.model import init_model, cast
from mamrl.numerics import constant, named_parameters
from mamrl.verify import run_verify, store_report
from mamrl import api, cli, verify, __version__

from .strategies import small_model

###############################################################################
# Test helpers
###############################################################################
def _tiny_run(out_path : Path, architecture : str = 'mam') -> RunConfig:
    return RunConfig(
        model = ModelConfig(
            architecture = architecture,
            embed_dim = 8,
            hidden_dim = 2,
            delta_rank = 2,
            conv_width = 2,
            n_heads = 2,
            n_attention_blocks = 1
        ),
        train = TrainConfig(
            updates = 2,
            rollout_length = 8,
            epochs = 1,
            minibatches = 2,
            eval_interval = 1,
            eval_episodes = 2
        ),
        env = EnvConfig(n_agents = 2, n_actions = 2, horizon = 4),
        seeds = [0],
        out = str(out_path)
    )

def _saved(tmp_path : Path, dtype = np.float64):
    config = RunConfig(model = small_model('mam', 3))
    params = cast(init_model(config.model, 4), dtype)
    path = Path(tmp_path, 'model.ckpt')
    save_checkpoint(params, config, path)
    return params, config, path

###############################################################################
# Configuration
###############################################################################
def test_empty_config_gives_defaults():
    config = parse_config()
    assert config == RunConfig()
    assert config.train.gamma == 0.99 and config.train.gae_lambda == 0.9
    assert config.train.rollout_length == 128
    assert config.model.conv_width == 4 and config.model.n_blocks == 1

def test_file_sections_and_dotted_keys(tmp_path):
    path = Path(tmp_path, 'mamrl.yaml')
    path.write_text('model:\n  hidden_dim: 16\ntrain.updates: 5\nseeds: [1, 2]\n')
    config = parse_config(path, ['train.updates=7', 'model.variant=zoh'])
    assert config.model.hidden_dim == 16
    assert config.train.updates == 7
    assert config.model.variant == 'zoh'
    assert config.seeds == [1, 2]

def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as info:
        parse_config(None, ['model.hiden_dim=3'])
    assert 'hiden_dim' in str(info.value)

def test_negative_size_is_named():
    with pytest.raises(ConfigError) as info:
        parse_config(None, ['model.hidden_dim=-1'])
    assert 'model.hidden_dim' in str(info.value)

def test_invalid_values():
    for override in ['train.gamma=1.0', 'env.name=pong', 'model.n_heads=3', 'seeds=[]', 'novalue']:
        with pytest.raises(ConfigError):
            parse_config(None, [override])
    with pytest.raises(ConfigError):
        parse_config(Path('does-not-exist.yaml'))

def test_bench_agents_are_sorted():
    config = parse_config(None, ['bench.agents=32,8,16,8'])
    assert config.bench.agents == [8, 16, 32]

def test_snapshot_round_trip():
    config = parse_config(None, ['model.architecture=attention', 'verify.suites=[gae]'])
    assert load_snapshot(snapshot(config)) == config

###############################################################################
# Checkpoints
###############################################################################
@pytest.mark.parametrize('dtype', [np.float64, np.float32])
def test_checkpoint_round_trip_is_bitwise(tmp_path, dtype):
    params, config, path = _saved(tmp_path, dtype)
    loaded, stored = load_checkpoint(path)
    assert stored == config
    pairs = zip(named_parameters(params), named_parameters(loaded))
    for (name, original), (loaded_name, restored) in pairs:
        assert name == loaded_name
        assert restored.dtype == original.dtype
        assert original.value.tobytes() == restored.value.tobytes()

def test_bad_magic(tmp_path):
    path = Path(tmp_path, 'bad.ckpt')
    path.write_bytes(b'NOTACKPT' + bytes(16))
    with pytest.raises(FormatError):
        read_checkpoint(path)

def test_unsupported_version(tmp_path):
    _, _, path = _saved(tmp_path)
    data = bytearray(path.read_bytes())
    data[8:12] = struct.pack('<I', 2)
    path.write_bytes(bytes(data))
    with pytest.raises(VersionError):
        read_checkpoint(path)

def test_truncated_file(tmp_path):
    _, _, path = _saved(tmp_path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(TruncatedError):
        read_checkpoint(path)

def test_trailing_bytes(tmp_path):
    _, _, path = _saved(tmp_path)
    path.write_bytes(path.read_bytes() + b'\x00')
    with pytest.raises(FormatError):
        read_checkpoint(path)

def test_shape_mismatch_names_the_array(tmp_path):
    _, config, path = _saved(tmp_path)
    expected = replace(config, model = replace(config.model, hidden_dim = 3))
    with pytest.raises(ShapeMismatchError) as info:
        load_checkpoint(path, expected)
    assert 'encoder.0.ssm.A_log' in str(info.value)

###############################################################################
# Metrics and worker pool
###############################################################################
def test_csv_log(tmp_path):
    path = Path(tmp_path, 'logs', 'slopes.csv')
    log = CsvLog(path, SlopeRow)
    assert log.columns == ['schema_version', 'model', 'slope']
    log.append(SlopeRow(schema_version = 1, model = 'mam', slope = 1.25))
    assert read_rows(path) == [{ 'schema_version' : '1', 'model' : 'mam', 'slope' : '1.25' }]
    with pytest.raises(TypeError):
        log.append(MetricsRow(1, 1, 1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0))

def test_pool_keeps_job_order():
    jobs = [ Job('job %d' % index, lambda index = index: index * index) for index in range(10) ]
    assert Pool(3).run(jobs) == [ index * index for index in range(10) ]
    assert Pool(3).run([]) == []

def test_pool_reports_first_failure():
    def _fail(message):
        raise ValueError(message)
    jobs = [
        Job('fine', lambda: 1),
        Job('first', lambda: _fail('one')),
        Job('second', lambda: _fail('two'))
    ]
    with pytest.raises(JobError) as info:
        Pool(2).run(jobs)
    assert info.value.description == 'first'
    assert info.value.message == 'one'

###############################################################################
# Verification
###############################################################################
def test_suites_pass():
    cfg = VerifyConfig(draws = 3, suites = ['gae', 'implicit_attention', 'attention'])
    results = run_verify(cfg, 0, Pool(2))
    assert [ result.suite for result in results ] == cfg.suites
    assert all(result.passed and result.checks > 0 for result in results)

def test_injected_fault_is_caught(tmp_path):
    cfg = VerifyConfig(draws = 3, fault = 'zoh_scan', suites = ['implicit_attention'])
    results = run_verify(cfg, 0, Pool(1))
    assert not results[0].passed
    assert results[0].worst_error > results[0].tolerance
    path = Path(tmp_path, 'verify.yaml')
    store_report(path, cfg, results)
    report = yaml.safe_load(path.read_text())
    assert report['fault'] == 'zoh_scan'
    assert report['passed'] is False
    assert report['suites'][0]['outcome'] == 'fail'

def test_implicit_attention_suite_runs_the_model_scan(monkeypatch):
    original = verify.selective_scan
    def _shifted(*args):
        return constant(original(*args).value + 1e-3)
    monkeypatch.setattr(verify, 'selective_scan', _shifted)
    result = verify.implicit_attention_suite(VerifyConfig(draws = 3), 0)
    assert not result.passed
    assert result.worst_error >= 1e-3 * (1 - 1e-9)

def test_unknown_suite():
    with pytest.raises(ConfigError):
        run_verify(VerifyConfig(suites = ['everything']), 0, Pool(1))

###############################################################################
# Benchmark helpers
###############################################################################
def test_median_of_means():
    assert median_of_means(np.array([1.0, 1.0, 9.0, 1.0]), 1) == 1.0
    assert median_of_means(np.arange(10.0), 5) == 4.5

def test_fit_slope():
    agents = [8, 16, 32]
    assert np.isclose(fit_slope(agents, [ 0.5 * n ** 2 for n in agents ]), 2.0)
    assert np.isnan(fit_slope([8], [1.0]))

def test_timing_is_stable_when_repetitions_double():
    work = lambda: time.sleep(0.002)
    short = time_call(work, 10, 1, 0.001)
    long = time_call(work, 20, 1, 0.001)
    assert long.repetitions == 20
    assert abs(long.mean_seconds - short.mean_seconds) < 0.1 * short.mean_seconds

###############################################################################
# Operations
###############################################################################
def test_train_writes_outputs_and_is_deterministic(tmp_path):
    first = _tiny_run(Path(tmp_path, 'first'))
    second = _tiny_run(Path(tmp_path, 'second'))
    assert api.train(first, 2)
    assert api.train(second, 1)
    seed_path = api.seed_dir(Path(first.out), 0)
    assert Path(seed_path, 'final.ckpt').exists()
    rows = read_rows(Path(seed_path, 'metrics.csv'))
    other = read_rows(Path(api.seed_dir(Path(second.out), 0), 'metrics.csv'))
    assert [ row['update'] for row in rows ] == ['1', '2']
    for row, again in zip(rows, other):
        del row['wall_clock'], again['wall_clock']
        assert row == again

@pytest.mark.parametrize('architecture', ['mam', 'attention', 'mappo'])
def test_same_seed_gives_identical_checkpoint_bytes(tmp_path, architecture):
    config = _tiny_run(tmp_path, architecture)
    path = Path(api.seed_dir(tmp_path, 0), 'final.ckpt')
    assert api.train(config, 2)
    first = path.read_bytes()
    assert api.train(config, 1)
    assert path.read_bytes() == first

def test_train_stops_on_non_finite_values(tmp_path, monkeypatch):
    config = _tiny_run(tmp_path)
    original = api.ppo_update
    calls = []
    def _update(*args):
        calls.append(None)
        if len(calls) == 2: raise NonFiniteError('Loss input advantages holds non-finite values')
        return original(*args)
    monkeypatch.setattr(api, 'ppo_update', _update)
    assert not api.train(config, 1)
    seed_path = api.seed_dir(tmp_path, 0)
    diagnostics = yaml.safe_load(Path(seed_path, 'diagnostics.yaml').read_text())
    assert diagnostics['update'] == 2
    assert 'advantages' in diagnostics['error']
    load_checkpoint(Path(seed_path, 'last_good.ckpt'))

def test_evaluate_stored_checkpoint(tmp_path):
    config = _tiny_run(tmp_path, 'attention')
    assert api.train(config, 1)
    checkpoint = Path(api.seed_dir(tmp_path, 0), 'final.ckpt')
    assert api.evaluate(config, checkpoint, 1)
    report = yaml.safe_load(Path(tmp_path, 'eval.yaml').read_text())
    assert len(report['returns']) == config.train.eval_episodes
    assert report['optimal_return'] == 4.0
    assert not api.evaluate(config, Path(tmp_path, 'missing.ckpt'), 1)

def test_bench_writes_tables(tmp_path):
    config = RunConfig(
        model = ModelConfig(hidden_dim = 2, delta_rank = 2, conv_width = 2, n_attention_blocks = 1),
        bench = BenchConfig(agents = [2, 4], repetitions = 2, warmup = 0, embed_dim = 8),
        out = str(tmp_path)
    )
    assert api.bench(config)
    rows = read_rows(Path(tmp_path, 'bench.csv'))
    assert [ (row['model'], row['n_agents']) for row in rows ] == [
        ('mam', '2'), ('mam', '4'), ('attention', '2'), ('attention', '4'),
        ('mappo', '2'), ('mappo', '4')
    ]
    assert all(float(row['mean_seconds']) > 0.0 for row in rows)
    slopes = read_rows(Path(tmp_path, 'bench_slopes.csv'))
    assert [ row['model'] for row in slopes ] == ['mam', 'attention', 'mappo']

def test_verify_writes_report(tmp_path):
    config = RunConfig(verify = VerifyConfig(draws = 3, suites = ['gae']), out = str(tmp_path))
    assert api.verify(config, 1)
    report = yaml.safe_load(Path(tmp_path, 'verify.yaml').read_text())
    assert report['passed'] is True
    assert [ suite['suite'] for suite in report['suites'] ] == ['gae']

###############################################################################
# Command line
###############################################################################
def _run_cli(monkeypatch, tmp_path, *args) -> int:
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr(sys, 'argv', ['mamrl'] + list(args))
    with pytest.raises(SystemExit) as info:
        cli.main()
    return info.value.code

def test_cli_version(monkeypatch, tmp_path, capsys):
    assert _run_cli(monkeypatch, tmp_path, 'version') == 0
    assert capsys.readouterr().out.strip() == __version__

def test_cli_verify(monkeypatch, tmp_path):
    code = _run_cli(
        monkeypatch, tmp_path, 'verify', '-w', '1',
        '--set', 'verify.suites=[gae]', '--set', 'verify.draws=3', '--out', 'reports'
    )
    assert code == 0
    assert Path(tmp_path, 'reports', 'verify.yaml').exists()

@pytest.mark.parametrize('out', ['42', 'yes', 'null'])
def test_cli_output_directory_is_taken_literally(monkeypatch, tmp_path, out):
    code = _run_cli(
        monkeypatch, tmp_path, 'verify', '-w', '1', '--seed', '3',
        '--set', 'verify.suites=[gae]', '--set', 'verify.draws=3', '--out', out
    )
    assert code == 0
    assert Path(tmp_path, out, 'verify.yaml').exists()

def test_cli_rejects_bad_config(monkeypatch, tmp_path):
    assert _run_cli(monkeypatch, tmp_path, 'verify', '--set', 'model.hiden_dim=3') == -1

###############################################################################
# Long runs
###############################################################################
@pytest.mark.slow
@pytest.mark.parametrize('architecture', ['mam', 'attention'])
def test_consensus_training_reaches_the_optimum(tmp_path, architecture):
    config = parse_config(None, [
        'model.architecture=%s' % architecture,
        'model.embed_dim=32', 'model.hidden_dim=16', 'model.delta_rank=16',
        'model.n_attention_blocks=1',
        'train.eval_interval=10', 'train.eval_episodes=8',
        'env.name=consensus', 'env.n_agents=3', 'env.n_actions=4', 'env.horizon=16',
        'out=%s' % tmp_path
    ])
    start = time.perf_counter()
    assert api.train(config)
    assert time.perf_counter() - start < 30 * 60
    rows = read_rows(Path(api.seed_dir(tmp_path, 0), 'metrics.csv'))
    assert float(rows[-1]['return_mean']) >= 0.9 * 16

@pytest.mark.slow
def test_decode_cost_grows_faster_with_attention():
    _, slopes = run_bench(BenchConfig(), ModelConfig(), 0)
    slope = { row.model : row.slope for row in slopes }
    assert 0.8 < slope['mam'] < 1.4
    assert slope['attention'] >= 1.6
    assert slope['mappo'] < 1.4

@pytest.mark.slow
def test_bench_means_are_stable_when_repetitions_double():
    bench = BenchConfig(agents = [8, 32], repetitions = 10)
    short, _ = run_bench(bench, ModelConfig(), 0)
    long, _ = run_bench(replace(bench, repetitions = 20), ModelConfig(), 0)
    for first, second in zip(short, long):
        assert (first.model, first.n_agents) == (second.model, second.n_agents)
        assert abs(second.mean_seconds - first.mean_seconds) < 0.1 * first.mean_seconds
