"""
Tests for the lookahead command line.
"""
import json
from unittest.mock import patch

import pytest
import torch

from config import LookaheadConfig
from core.exceptions import StateError
from core.models import EvalReport
from core.pipeline import PipelineManager
from lookahead_cli import LookaheadCLI, main, metric_network_for


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    monkeypatch.delenv('LOOKAHEAD_CONFIG', raising=False)
    monkeypatch.delenv('LOOKAHEAD_SEED', raising=False)
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def cli(tmp_path, registry):
    config = LookaheadConfig()
    pipeline = PipelineManager(config, registry=registry, workspace=tmp_path)
    return LookaheadCLI(config, pipeline=pipeline)


def _write_eval(cli, run, sim, acc):
    path = cli.pipeline.artifact_path('eval', run)
    path.parent.mkdir(parents=True, exist_ok=True)
    report = EvalReport(run=run, mean_identity_similarity=sim, style_accuracy=acc, sample_count=6,
                        config_hash='c', metric_hash='m', seed=0)
    path.write_text(report.to_json(), encoding='utf-8')
    return path


class TestMetricNetworkFor:
    """Tests for metric_network_for."""

    def test_kinds(self):
        nets = {'identity_loss': 'id', 'style': 'style'}
        assert metric_network_for('mse', nets) is None
        assert metric_network_for('clip_like', nets) == 'style'
        assert metric_network_for('identity', nets) == 'id'
        assert metric_network_for('perceptual', nets) == 'id'


class TestMain:
    """Tests for argument handling and exit codes."""

    def test_no_command_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    @patch('lookahead_cli.console')
    @patch('lookahead_cli.setup_logging')
    def test_missing_upstream_exits_1(self, mock_logging, mock_console, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(['--workspace', str(tmp_path / 'ws'), 'train-base'])
        assert exc.value.code == 1
        printed = mock_console.print.call_args[0][0]
        assert "dataset missing; run forge-data" in printed

    @patch('lookahead_cli.console')
    @patch('lookahead_cli.setup_logging')
    @patch('lookahead_cli.LookaheadCLI')
    def test_keyboard_interrupt_exits_130(self, mock_cli, mock_logging, mock_console):
        mock_cli.return_value.forge_data.side_effect = KeyboardInterrupt
        with pytest.raises(SystemExit) as exc:
            main(['forge-data'])
        assert exc.value.code == 130

    @patch('lookahead_cli.setup_logging')
    @patch('lookahead_cli.LookaheadCLI')
    def test_distill_flags(self, mock_cli, mock_logging):
        main(['distill-lcm', '--iters', '5', '--ema', '0.9'])
        mock_cli.return_value.distill_lcm.assert_called_once_with(
            iterations=5, ema=0.9, skip_steps=None, probe_seeds=100, probe_sampler='ddpm')

    @patch('lookahead_cli.setup_logging')
    @patch('lookahead_cli.LookaheadCLI')
    def test_distill_reference_sampler(self, mock_cli, mock_logging):
        main(['distill-lcm', '--probe-sampler', 'ddim'])
        assert mock_cli.return_value.distill_lcm.call_args.kwargs['probe_sampler'] == 'ddim'

    @patch('lookahead_cli.setup_logging')
    @patch('lookahead_cli.LookaheadCLI')
    def test_eval_sampling_flags(self, mock_cli, mock_logging):
        main(['eval', 'run1', '--steps', '10', '--cfg-kv', '1.5'])
        mock_cli.return_value.evaluate.assert_called_once_with(
            'run1', all_prompts=None, steps=10, eta=None, s_no_kv=None, s_full=None, s_kv=1.5)

    @patch('lookahead_cli.setup_logging')
    @patch('lookahead_cli.LookaheadCLI')
    def test_train_encoder_preset(self, mock_cli, mock_logging):
        main(['train-encoder', 'abl', '--preset', 'x0_loss', '--iters', '3'])
        mock_cli.return_value.train_encoder.assert_called_once_with('abl', preset='x0_loss',
                                                                    iterations=3)

    @patch('lookahead_cli.setup_logging')
    @patch('lookahead_cli.LookaheadCLI')
    def test_seed_and_workspace_override(self, mock_cli, mock_logging, tmp_path):
        main(['--seed', '9', '--workspace', str(tmp_path / 'ws'), '--force', 'stages'])
        config = mock_cli.call_args[0][0]
        assert config.master_seed == 9
        assert config.workspace == str(tmp_path / 'ws')
        assert mock_cli.call_args[1] == {'force': True}
        mock_logging.assert_called_once()
        assert mock_logging.call_args[0][0] == tmp_path / 'ws' / 'logs'

    def test_env_seed(self, mocker, monkeypatch):
        mocker.patch('lookahead_cli.setup_logging')
        mock_cli = mocker.patch('lookahead_cli.LookaheadCLI')
        monkeypatch.setenv('LOOKAHEAD_SEED', '123')
        main(['stages'])
        assert mock_cli.call_args[0][0].master_seed == 123

    def test_unknown_preset_rejected_by_parser(self):
        with pytest.raises(SystemExit) as exc:
            main(['train-encoder', 'abl', '--preset', 'bogus'])
        assert exc.value.code == 2


class TestLookaheadCLI:
    """Tests for LookaheadCLI handlers that need no trained models."""

    @patch('lookahead_cli.console')
    def test_stages_empty(self, mock_console, cli):
        cli.stages()
        assert "No stages recorded" in mock_console.print.call_args[0][0]

    @patch('lookahead_cli.console')
    def test_report_writes_csv(self, mock_console, cli, tmp_path):
        _write_eval(cli, 'a', 0.4, 0.5)
        _write_eval(cli, 'b', 0.6, 0.75)
        out = tmp_path / 'table.csv'
        cli.report(['a', 'b'], out=str(out))
        lines = out.read_text(encoding='utf-8').splitlines()
        assert lines == ["run,ID,style_acc", "a,0.4,0.5", "b,0.6,0.75"]
        assert cli.pipeline.registry.latest_stage('report', 'shared') is not None

    @patch('lookahead_cli.console')
    def test_report_default_path(self, mock_console, cli, tmp_path):
        _write_eval(cli, 'a', 0.4, 0.5)
        cli.report(['a'])
        assert (tmp_path / 'reports' / 'ablation.csv').exists()

    def test_report_missing_eval(self, cli):
        from core.exceptions import StageOrderError
        with pytest.raises(StageOrderError) as exc:
            cli.report(['nope'])
        assert "run eval" in str(exc.value)

    def test_metrics_missing(self, cli):
        with pytest.raises(StateError) as exc:
            cli._load_metrics()
        assert str(exc.value) == "metric networks missing; run train-metrics"

    def test_sampling_overrides(self, cli):
        assert cli._sampling({'steps': None}) is cli.config.sampling
        sampling = cli._sampling({'steps': 7, 'eta': None})
        assert sampling.steps == 7
        assert sampling.eta == cli.config.sampling.eta


class TestSample:
    """Tests for sample output naming."""

    @pytest.fixture
    def stubbed(self, cli, mocker):
        mocker.patch('lookahead_cli.console')
        mocker.patch('lookahead_cli.load_image', return_value=torch.zeros(3, 8, 8))
        mocker.patch('lookahead_cli.save_image', side_effect=lambda image, path: path)
        mocker.patch.object(cli.pipeline, 'check_ready', return_value={})
        record = mocker.patch.object(cli.pipeline, 'record')
        generator = mocker.MagicMock()
        generator.images.side_effect = (
            lambda cond, ids, gen, adapter_weight: torch.zeros(len(ids), 3, 8, 8))
        mocker.patch.object(cli, '_load_generator', return_value=generator)
        return record

    def _outputs(self, record):
        return record.call_args.args[2]

    def test_rerun_reuses_file_names(self, cli, stubbed):
        cli.sample('abl', 'oil: old curly @ forest', image='face.png', count=2)
        first = self._outputs(stubbed)
        cli.sample('abl', 'oil: old curly @ forest', image='face.png', count=2)
        assert self._outputs(stubbed) == first
        assert [p.name.split('_')[0] for p in first] == [str(cli.seed)] * 2
        assert first[0].name.endswith('_00.png') and first[1].name.endswith('_01.png')

    def test_name_tracks_sampling_config(self, cli, stubbed):
        cli.sample('abl', 'oil: old curly @ forest', image='face.png')
        base = self._outputs(stubbed)
        cli.sample('abl', 'oil: old curly @ forest', image='face.png', steps=7)
        assert self._outputs(stubbed) != base


@pytest.mark.integration
class TestForgeData:
    """Runs the dataset stage end to end on a small config."""

    def test_forge_data_records_stage(self, tmp_path, registry):
        config = LookaheadConfig.from_dict({'data': {'num_identities': 10, 'val_fraction': 0.1,
                                                     'test_fraction': 0.2}})
        pipeline = PipelineManager(config, registry=registry, workspace=tmp_path)
        cli = LookaheadCLI(config, pipeline=pipeline)
        cli.forge_data()
        stats = json.loads((tmp_path / 'data' / 'stats.json').read_text(encoding='utf-8'))
        assert stats['identities'] == 10
        assert 'linear_probe' in stats
        record = registry.latest_stage('forge-data', 'shared')
        assert record.config_hash == cli.pipeline.stage_hash('forge-data')
        assert str(tmp_path / 'data' / 'manifest.jsonl') in record.output_paths
        cli.pipeline.check_ready('train-base')
