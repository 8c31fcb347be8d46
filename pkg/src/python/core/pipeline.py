"""
Pipeline Manager - stage ordering, upstream checks and the stage manifest.

Stages form a DAG. Shared stages (dataset, base model, consistency
adapter, metric networks) live under the workspace root; encoder stages
and their outputs live under ``runs/<run>/``.
"""

from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import json
import logging
import time

import networkx as nx

from config import LookaheadConfig
from core.exceptions import ConfigHashMismatchError, StageOrderError
from core.models import StageRecord
from personalization.trainer import apply_preset
from run_registry import RunRegistry
from utils import hash_file

logger = logging.getLogger(__name__)

SHARED_RUN = 'shared'

# stage -> upstream stages
STAGE_DEPENDENCIES: Dict[str, List[str]] = {
    'forge-data': [],
    'train-base': ['forge-data'],
    'distill-lcm': ['train-base'],
    'train-metrics': ['forge-data'],
    'train-encoder': ['distill-lcm', 'train-metrics'],
    'sample': ['train-encoder'],
    'eval': ['train-metrics', 'train-encoder'],
    'guide': ['distill-lcm', 'train-metrics'],
    'report': ['eval'],
}

# config sections whose values determine a stage's output
STAGE_SECTIONS: Dict[str, List[str]] = {
    'forge-data': ['data'],
    'train-base': ['diffusion', 'codec', 'denoiser', 'base_training'],
    'distill-lcm': ['distill'],
    'train-metrics': ['metrics'],
    'train-encoder': ['adapter', 'encoder'],
    'sample': ['sampling'],
    'eval': ['sampling', 'evaluation'],
    'guide': ['sampling', 'guidance'],
    'report': [],
}

SHARED_STAGES = ('forge-data', 'train-base', 'distill-lcm', 'train-metrics')

# upstreams whose artifacts carry their own config hash
UNHASHED_UPSTREAM = ('eval',)

RUN_SETTINGS = 'run.json'

# what a missing upstream is called in error messages
ARTIFACT_NAMES = {
    'forge-data': 'dataset',
    'train-base': 'base denoiser',
    'distill-lcm': 'consistency adapter',
    'train-metrics': 'metric networks',
    'train-encoder': 'encoder checkpoint',
    'eval': 'eval report',
}

ARTIFACT_PATHS = {
    'forge-data': 'data/manifest.jsonl',
    'train-base': 'base/base.pt',
    'distill-lcm': 'lcm/lcm.pt',
    'train-metrics': 'metrics/metrics.pt',
    'train-encoder': 'encoder.pt',
    'eval': 'eval/{run}.json',
}


def build_stage_graph() -> nx.DiGraph:
    """Directed graph with an edge upstream -> downstream per dependency."""
    graph = nx.DiGraph()
    for stage, upstream in STAGE_DEPENDENCIES.items():
        graph.add_node(stage)
        for dep in upstream:
            graph.add_edge(dep, stage)
    return graph


class PipelineManager:
    """
    Orchestrates pipeline stages (interface-agnostic).

    Validates that upstream artifacts exist and were produced under the
    current config, and records each finished stage in the registry.
    """

    def __init__(self, config: LookaheadConfig, registry: Optional[RunRegistry] = None,
                 workspace: Optional[Union[str, Path]] = None):
        self.config = config
        self.workspace = Path(workspace or config.workspace)
        self.registry = registry if registry else RunRegistry(self.workspace / 'registry.sqlite')
        self.graph = build_stage_graph()

    # ------------------------------------------------------------------
    # Layout
    # ------------------------------------------------------------------

    def run_dir(self, run: str) -> Path:
        return self.workspace / 'runs' / run

    def artifact_path(self, stage: str, run: str = SHARED_RUN) -> Path:
        """Main output file of a stage."""
        if stage not in ARTIFACT_PATHS:
            raise StageOrderError(f"stage '{stage}' has no primary artifact")
        if stage in SHARED_STAGES:
            return self.workspace / ARTIFACT_PATHS[stage]
        return self.run_dir(run) / ARTIFACT_PATHS[stage].format(run=run)

    @staticmethod
    def run_of(stage: str, run: str) -> str:
        return SHARED_RUN if stage in SHARED_STAGES else run

    # ------------------------------------------------------------------
    # Ordering and checks
    # ------------------------------------------------------------------

    def execution_order(self, target: Optional[str] = None) -> List[str]:
        """Topological stage order, restricted to ``target`` and its ancestors."""
        graph = self.graph
        if target is not None:
            if target not in graph:
                raise StageOrderError(f"unknown stage '{target}'")
            graph = graph.subgraph(nx.ancestors(graph, target) | {target})
        return list(nx.lexicographical_topological_sort(graph))

    # ------------------------------------------------------------------
    # Per-run settings
    # ------------------------------------------------------------------

    def write_run_settings(self, run: str, preset: Optional[str],
                           overrides: Dict[str, Any]) -> Path:
        """Persist the encoder preset and overrides that define a run."""
        path = self.run_dir(run) / RUN_SETTINGS
        path.parent.mkdir(parents=True, exist_ok=True)
        settings = {'preset': preset, 'overrides': overrides}
        path.write_text(json.dumps(settings, indent=2, sort_keys=True), encoding='utf-8')
        return path

    def run_settings(self, run: str) -> Dict[str, Any]:
        path = self.run_dir(run) / RUN_SETTINGS
        if not path.exists():
            return {'preset': None, 'overrides': {}}
        return json.loads(path.read_text(encoding='utf-8'))

    def run_config(self, run: str) -> LookaheadConfig:
        """Root config with the run's encoder preset and overrides applied."""
        settings = self.run_settings(run)
        encoder = apply_preset(self.config.encoder, settings.get('preset'))
        overrides = settings.get('overrides') or {}
        if overrides:
            encoder = replace(encoder, **overrides)
        return replace(self.config, encoder=encoder)

    def stage_hash(self, stage: str, run: str = SHARED_RUN) -> str:
        config = self.config if stage in SHARED_STAGES else self.run_config(run)
        return config.sections_hash(STAGE_SECTIONS[stage])

    def missing_message(self, upstream: str) -> str:
        return f"{ARTIFACT_NAMES[upstream]} missing; run {upstream}"

    def check_ready(self, stage: str, run: str = SHARED_RUN, force: bool = False) -> Dict[str, str]:
        """
        Verify the direct upstream artifacts of a stage.

        Args:
            stage: Stage about to run
            run: Run name of encoder-level stages
            force: Downgrade config-hash mismatches to warnings

        Returns:
            Content hash per upstream artifact path

        Raises:
            StageOrderError: If an upstream artifact is missing
            ConfigHashMismatchError: If an upstream was produced under other settings
        """
        if stage not in self.graph:
            raise StageOrderError(f"unknown stage '{stage}'")
        input_hashes = {}
        for upstream in STAGE_DEPENDENCIES[stage]:
            path = self.artifact_path(upstream, run)
            if not path.exists():
                raise StageOrderError(self.missing_message(upstream))
            input_hashes[str(path)] = hash_file(path)
            if upstream in UNHASHED_UPSTREAM:
                continue
            record = self.registry.latest_stage(upstream, self.run_of(upstream, run))
            expected = self.stage_hash(upstream, run)
            if record is not None and record.config_hash != expected:
                message = (f"{ARTIFACT_NAMES[upstream]} was produced under a different "
                           f"{'/'.join(STAGE_SECTIONS[upstream])} config; "
                           f"re-run {upstream} or pass --force")
                if not force:
                    raise ConfigHashMismatchError(message)
                logger.warning(message)
        return input_hashes

    def record(self, stage: str, run: str, outputs: List[Union[str, Path]],
               input_hashes: Dict[str, str], seed: int, started: float,
               config_hash: Optional[str] = None) -> StageRecord:
        """Write the manifest entry of a finished stage.

        ``config_hash`` overrides the stage hash when command-line flags
        changed the effective settings.
        """
        record = StageRecord(
            stage=stage,
            run=self.run_of(stage, run),
            config_hash=config_hash or self.stage_hash(stage, run),
            input_hashes=input_hashes,
            output_paths=[str(p) for p in outputs],
            seed=seed,
            wall_time=time.time() - started,
        )
        self.registry.record_stage(record)
        for path in outputs:
            if Path(path).is_file():
                self.registry.record_artifact(path, stage, record.run, hash_file(path))
        logger.info("stage %s (%s) finished in %.1fs", stage, record.run, record.wall_time)
        return record

    def status(self, run: Optional[str] = None) -> List[Dict[str, object]]:
        """Per-stage presence of artifacts, in execution order."""
        rows = []
        for stage in self.execution_order():
            if stage not in ARTIFACT_PATHS:
                continue
            if stage not in SHARED_STAGES and run is None:
                continue
            target_run = self.run_of(stage, run or SHARED_RUN)
            record = self.registry.latest_stage(stage, target_run)
            rows.append({
                'stage': stage,
                'run': target_run,
                'present': self.artifact_path(stage, target_run).exists(),
                'current': (record is not None
                            and record.config_hash == self.stage_hash(stage, target_run)),
                'record': record,
            })
        return rows
