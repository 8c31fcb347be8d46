"""
Tests for the run registry and the pipeline manager.
"""
import pytest

from config import LookaheadConfig
from core.exceptions import ConfigHashMismatchError, StageOrderError
from core.models import StageRecord
from core.pipeline import STAGE_SECTIONS, PipelineManager


@pytest.fixture
def pipeline(tmp_path, registry):
    return PipelineManager(LookaheadConfig(), registry=registry, workspace=tmp_path)


def _touch(pipeline, stage, run='shared'):
    path = pipeline.artifact_path(stage, run)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(stage.encode())
    return path


class TestRunRegistry:
    """Tests for RunRegistry."""

    def test_record_and_latest(self, registry):
        registry.record_stage(StageRecord(stage='forge-data', run='shared', config_hash='a',
                                          seed=1))
        registry.record_stage(StageRecord(stage='forge-data', run='shared', config_hash='b',
                                          seed=1, input_hashes={'x': 'h'},
                                          output_paths=['data/manifest.jsonl']))
        latest = registry.latest_stage('forge-data', 'shared')
        assert latest.config_hash == 'b'
        assert latest.input_hashes == {'x': 'h'}
        assert latest.output_paths == ['data/manifest.jsonl']
        assert latest.created_at is not None

    def test_latest_missing(self, registry):
        assert registry.latest_stage('eval', 'run1') is None

    def test_list_and_runs(self, registry):
        registry.record_stage(StageRecord(stage='train-encoder', run='r2', config_hash='a'))
        registry.record_stage(StageRecord(stage='train-encoder', run='r1', config_hash='a'))
        assert [r.run for r in registry.list_stages()] == ['r2', 'r1']
        assert len(registry.list_stages('r1')) == 1
        assert registry.runs() == ['r1', 'r2']

    def test_artifacts_and_stats(self, registry):
        registry.record_artifact('a.pt', 'train-base', 'shared', 'h1')
        registry.record_artifact('a.pt', 'train-base', 'shared', 'h2')
        assert registry.get_artifact('a.pt')['content_hash'] == 'h2'
        assert registry.get_stats() == {'stages': 0, 'runs': 0, 'artifacts': 1}

    def test_file_backed_registry(self, tmp_path):
        from run_registry import RunRegistry
        path = tmp_path / "reg" / "registry.sqlite"
        record = StageRecord(stage='forge-data', run='shared', config_hash='a')
        RunRegistry(path).record_stage(record)
        assert RunRegistry(path).latest_stage('forge-data').config_hash == 'a'


class TestStageOrder:
    """Tests for stage ordering."""

    def test_full_order(self, pipeline):
        order = pipeline.execution_order()
        assert order[0] == 'forge-data'
        assert order.index('train-base') < order.index('distill-lcm') < order.index('train-encoder')
        assert order.index('eval') < order.index('report')

    def test_target_ancestors_only(self, pipeline):
        order = pipeline.execution_order('train-encoder')
        assert set(order) == {'forge-data', 'train-base', 'distill-lcm', 'train-metrics',
                              'train-encoder'}

    def test_unknown_stage(self, pipeline):
        with pytest.raises(StageOrderError):
            pipeline.execution_order('deploy')


class TestCheckReady:
    """Tests for upstream checks."""

    def test_missing_dataset(self, pipeline):
        with pytest.raises(StageOrderError) as exc:
            pipeline.check_ready('train-base')
        assert str(exc.value) == "dataset missing; run forge-data"

    def test_missing_metric_networks(self, pipeline):
        _touch(pipeline, 'distill-lcm')
        with pytest.raises(StageOrderError) as exc:
            pipeline.check_ready('train-encoder', 'run1')
        assert str(exc.value) == "metric networks missing; run train-metrics"

    def test_ready_returns_input_hashes(self, pipeline):
        lcm = _touch(pipeline, 'distill-lcm')
        metrics = _touch(pipeline, 'train-metrics')
        hashes = pipeline.check_ready('train-encoder', 'run1')
        assert set(hashes) == {str(lcm), str(metrics)}

    def test_hash_mismatch(self, pipeline, registry):
        _touch(pipeline, 'distill-lcm')
        _touch(pipeline, 'train-metrics')
        registry.record_stage(StageRecord(stage='distill-lcm', run='shared', config_hash='stale'))
        with pytest.raises(ConfigHashMismatchError) as exc:
            pipeline.check_ready('train-encoder', 'run1')
        assert "--force" in str(exc.value)

    def test_force_downgrades_mismatch(self, pipeline, registry, caplog):
        _touch(pipeline, 'distill-lcm')
        _touch(pipeline, 'train-metrics')
        registry.record_stage(StageRecord(stage='distill-lcm', run='shared', config_hash='stale'))
        pipeline.check_ready('train-encoder', 'run1', force=True)
        assert any("different" in r.message for r in caplog.records)

    def test_matching_hash_passes(self, pipeline, registry):
        _touch(pipeline, 'distill-lcm')
        _touch(pipeline, 'train-metrics')
        registry.record_stage(StageRecord(stage='distill-lcm', run='shared',
                                          config_hash=pipeline.stage_hash('distill-lcm')))
        pipeline.check_ready('train-encoder', 'run1')

    def test_eval_report_checked_by_presence_only(self, pipeline):
        with pytest.raises(StageOrderError) as exc:
            pipeline.check_ready('report', 'run1')
        assert "eval report missing" in str(exc.value)
        _touch(pipeline, 'eval', 'run1')
        assert len(pipeline.check_ready('report', 'run1')) == 1


class TestRunSettings:
    """Tests for per-run presets and stage hashes."""

    def test_preset_changes_encoder_hash(self, pipeline):
        pipeline.write_run_settings('a', 'x0_loss', {})
        pipeline.write_run_settings('b', 'lcm_kv', {'iterations': 5})
        assert pipeline.run_config('a').encoder.preview == 'x0'
        assert pipeline.run_config('b').encoder.iterations == 5
        hash_a = pipeline.stage_hash('train-encoder', 'a')
        assert hash_a != pipeline.stage_hash('train-encoder', 'b')

    def test_shared_stage_hash_ignores_run(self, pipeline):
        pipeline.write_run_settings('a', 'x0_loss', {})
        assert pipeline.stage_hash('distill-lcm', 'a') == \
            LookaheadConfig().sections_hash(STAGE_SECTIONS['distill-lcm'])

    def test_default_settings(self, pipeline):
        assert pipeline.run_settings('fresh') == {'preset': None, 'overrides': {}}


class TestRecordAndStatus:
    """Tests for PipelineManager.record and status."""

    def test_record_writes_manifest_entry(self, pipeline, registry):
        path = _touch(pipeline, 'forge-data')
        record = pipeline.record('forge-data', 'ignored', [path], {}, seed=3, started=0.0)
        assert record.run == 'shared'
        assert record.config_hash == pipeline.stage_hash('forge-data')
        assert registry.get_artifact(path)['stage'] == 'forge-data'

    def test_status(self, pipeline):
        path = _touch(pipeline, 'forge-data')
        pipeline.record('forge-data', 'shared', [path], {}, seed=0, started=0.0)
        rows = {row['stage']: row for row in pipeline.status()}
        assert rows['forge-data']['present'] and rows['forge-data']['current']
        assert not rows['train-base']['present']
        assert 'train-encoder' not in rows
        assert 'train-encoder' in {row['stage'] for row in pipeline.status('run1')}
