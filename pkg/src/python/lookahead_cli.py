#!/usr/bin/env python3
"""
LCM-lookahead - CLI Entry Point

Pipeline commands:
- forge-data, train-base, distill-lcm, train-metrics, train-encoder
- sample, guide, eval, report
- stages (manifest listing)
"""

import sys
import argparse
import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch
from rich.console import Console
from rich.table import Table
from rich.panel import Panel
from rich.progress import (BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn,
                           TimeElapsedColumn)
from rich import box

from checkpoints import load_checkpoint, save_checkpoint
from config import LookaheadConfig
from consistency.distill import PROBE_SAMPLERS, distill, preview_alignment_probe, preview_divergence
from core.exceptions import LookaheadError, StateError
from core.pipeline import PipelineManager, SHARED_RUN, STAGE_SECTIONS
from dataforge.dataset import (MANIFEST_NAME, DatasetManifest, PairSampler, build_dataset,
                               linear_probe, load_image, load_images)
from diffusion.codec import LatentCodec, fit_codec
from diffusion.denoiser import build_denoiser
from diffusion.sampler import initial_latent
from diffusion.schedule import add_noise
from diffusion.training import train_denoiser
from evalkit.evaluate import build_cases, compare_reports, evaluate, load_report, write_report
from evalkit.networks import (check_identity_gate, check_style_gate, style_accuracy,
                              train_identity_embedder, train_style_classifier,
                              verify_identity_embedder)
from guidance_lab import compare_guidance
from personalization.encoders import AdapterEncoder
from personalization.generator import PersonalizedGenerator
from personalization.prompts import (FACE, STYLES, build_prompt, compress_batch, compress_prompt,
                                     parse_prompt, prompt_text)
from personalization.trainer import ABLATION_PRESETS, EncoderTrainer
from utils import (append_jsonl, derive_seed, format_duration, format_number, hash_payload,
                   save_image, seed_stream, setup_logging)

# Rich console for formatted output
console = Console()
logger = logging.getLogger(__name__)


def metric_network_for(kind: str, metrics: Dict[str, Any]):
    """Frozen metric network backing a distance kind ('mse' needs none)."""
    if kind == 'mse':
        return None
    if kind == 'clip_like':
        return metrics.get('style')
    return metrics.get('identity_loss')


class LookaheadCLI:
    """Main CLI handler for pipeline commands (presentation layer only)."""

    def __init__(self, config: LookaheadConfig, force: bool = False,
                 pipeline: Optional[PipelineManager] = None):
        """
        Initialize CLI.

        Args:
            config: Root configuration
            force: Downgrade upstream config-hash mismatches to warnings
            pipeline: Optional PipelineManager (a workspace-backed one by default)
        """
        self.config = config
        self.force = force
        self.pipeline = pipeline if pipeline else PipelineManager(config)
        self.workspace = self.pipeline.workspace
        self.seed = config.master_seed

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    @contextmanager
    def _progress(self, description: str, total: int):
        """Yield a callable(iteration, loss) driving a progress bar."""
        with Progress(
            SpinnerColumn(),
            TextColumn("[bold blue]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TextColumn("{task.fields[loss]}"),
            TimeElapsedColumn(),
            console=console,
            transient=True,
        ) as progress:
            task = progress.add_task(description, total=total, loss="")

            def update(iteration: int, loss: Optional[float] = None):
                progress.update(task, completed=iteration + 1,
                                loss="" if loss is None else f"loss {loss:.4f}")
            yield update

    def _manifest(self) -> DatasetManifest:
        return DatasetManifest.load(self.workspace / 'data' / MANIFEST_NAME)

    def _split(self, split: Optional[str]):
        return load_images(self._manifest(), self.workspace / 'data', split)

    def _load_base(self):
        checkpoint = load_checkpoint(self.pipeline.artifact_path('train-base'))
        codec = checkpoint.build('codec')
        denoiser = checkpoint.build('denoiser')
        denoiser.eval()
        return codec, denoiser, self.config.diffusion.build()

    def _load_lcm(self):
        return load_checkpoint(self.pipeline.artifact_path('distill-lcm')).build('lcm')

    def _load_metrics(self) -> Dict[str, Any]:
        path = self.pipeline.artifact_path('train-metrics')
        if not path.exists():
            raise StateError("metric networks missing; run train-metrics")
        checkpoint = load_checkpoint(path)
        names = ('identity_loss', 'identity_eval', 'style')
        return {name: checkpoint.build(name) for name in names}

    def _load_generator(self, run: str, sampling=None) -> PersonalizedGenerator:
        codec, _, schedule = self._load_base()
        checkpoint = load_checkpoint(self.pipeline.artifact_path('train-encoder', run))
        denoiser = checkpoint.build('denoiser')
        denoiser.eval()
        encoder = checkpoint.build('adapter_encoder')
        encoder.eval()
        kv_lora = checkpoint.build('kv_lora') if 'kv_lora' in checkpoint.entries else None
        return PersonalizedGenerator(denoiser, codec, schedule, encoder=encoder, kv_lora=kv_lora,
                                     config=sampling or self.config.sampling)

    def _sampling(self, overrides: Dict[str, Any]):
        values = {k: v for k, v in overrides.items() if v is not None}
        return replace(self.config.sampling, **values) if values else self.config.sampling

    # ------------------------------------------------------------------
    # Shared stages
    # ------------------------------------------------------------------

    def forge_data(self):
        """Render the procedural dataset and run the pixel-space probe."""
        started = time.time()
        inputs = self.pipeline.check_ready('forge-data', force=self.force)
        out_dir = self.workspace / 'data'
        cfg = self.config.data
        with self._progress("Forging identities", cfg.num_identities) as update:
            manifest = build_dataset(cfg, out_dir, self.seed, progress=lambda i: update(i))
        images, records = load_images(manifest, out_dir, 'train')
        probe = linear_probe(images, [r['identity_id'] for r in records],
                             [r['style'] for r in records],
                             seed=derive_seed(self.seed, 'dataforge.probe'))
        stats_path = out_dir / 'stats.json'
        stats = json.loads(stats_path.read_text(encoding='utf-8'))
        stats['linear_probe'] = {'accuracy': probe.accuracy, 'chance': probe.chance,
                                 'identities': probe.identities}
        stats_path.write_text(json.dumps(stats, indent=2, sort_keys=True), encoding='utf-8')

        table = Table(title="📦 Dataset", box=box.ROUNDED)
        table.add_column("Field", style="cyan")
        table.add_column("Value", justify="right")
        table.add_row("Variant", manifest.variant)
        table.add_row("Identities", format_number(stats['identities']))
        table.add_row("Images", format_number(stats['images']))
        for split, count in stats['splits'].items():
            table.add_row(f"  {split}", format_number(count))
        table.add_row("Pairing coverage", f"{stats['pairing_coverage']:.1%}")
        table.add_row("Pixel probe", f"{probe.accuracy:.1%} (chance {probe.chance:.1%})")
        console.print(table)
        if not probe.above_chance:
            console.print("[yellow]⚠️  Identities are not linearly separable above chance "
                          "on raw pixels[/]")
        self.pipeline.record('forge-data', SHARED_RUN, [out_dir / MANIFEST_NAME, stats_path],
                             inputs, self.seed, started)

    def train_base(self):
        """Fit the codec and train the base text-conditioned denoiser."""
        started = time.time()
        inputs = self.pipeline.check_ready('train-base', force=self.force)
        images, records = self._split('train')
        full = torch.tensor([r['prompt'] for r in records], dtype=torch.long)
        prompts = torch.cat([full, compress_batch(full)])
        images = torch.cat([images, images])

        codec = LatentCodec(self.config.codec)
        if codec.mode == 'autoencoder':
            with self._progress("Fitting codec", self.config.codec.iterations) as update:
                fit_codec(codec, images, seed_stream(self.seed, 'codec'), progress=update)
        schedule = self.config.diffusion.build()
        denoiser = build_denoiser(self.config.denoiser,
                                  seed=derive_seed(self.seed, 'train-base.init'))
        cfg = self.config.base_training
        with self._progress("Training base denoiser", cfg.iterations) as update:
            history = train_denoiser(denoiser, codec, schedule, images, prompts, cfg,
                                     seed_stream(self.seed, 'train-base'), progress=update)
        path = save_checkpoint(self.pipeline.artifact_path('train-base'),
                               {'codec': codec, 'denoiser': denoiser},
                               metadata={'diffusion': self.config.diffusion.to_dict()})
        final = history[-1] if history else float('nan')
        params = format_number(denoiser.parameter_count())
        console.print(f"[green]✓[/] Base denoiser: {params} parameters, "
                      f"final loss {final:.4f} → {path}")
        self.pipeline.record('train-base', SHARED_RUN, [path], inputs, self.seed, started)

    def distill_lcm(self, iterations: Optional[int] = None, ema: Optional[float] = None,
                    skip_steps: Optional[int] = None, probe_seeds: int = 100,
                    probe_sampler: str = 'ddpm'):
        """Distill the consistency adapter and probe its alignment with the full sampler."""
        started = time.time()
        inputs = self.pipeline.check_ready('distill-lcm', force=self.force)
        requested = {'iterations': iterations, 'ema_decay': ema, 'skip_steps': skip_steps}
        overrides = {k: v for k, v in requested.items() if v is not None}
        cfg = replace(self.config.distill, **overrides)
        codec, denoiser, schedule = self._load_base()
        images, records = self._split('train')
        prompts = torch.tensor([compress_prompt(r['prompt']) for r in records], dtype=torch.long)
        out_dir = self.workspace / 'lcm'
        with self._progress("Distilling consistency adapter", cfg.iterations) as update:
            lcm = distill(denoiser, codec, schedule, images, prompts, cfg,
                          seed_stream(self.seed, 'distill'), progress=update,
                          log_path=out_dir / 'distill.jsonl')
        path = save_checkpoint(self.pipeline.artifact_path('distill-lcm'), {'lcm': lcm},
                               metadata={'distill': cfg.to_dict()})

        _, val_records = self._split('val')
        rows = [compress_prompt(val_records[i % len(val_records)]['prompt'])
                for i in range(probe_seeds)]
        cond = denoiser.prompt_conditioning(torch.tensor(rows, dtype=torch.long))
        size = denoiser.config.image_size
        latent_shape = (denoiser.config.in_channels, size, size)
        probes = preview_alignment_probe(denoiser, schedule, lcm, cond, latent_shape,
                                         seed_stream(self.seed, 'probe'),
                                         steps=self.config.sampling.steps, sampler=probe_sampler)
        probe_path = out_dir / 'probe.json'
        probe_path.write_text(json.dumps([p.to_dict() for p in probes], indent=2), encoding='utf-8')

        table = Table(title=f"🔭 Preview alignment probe ({probe_sampler})", box=box.ROUNDED)
        table.add_column("Trajectory", justify="right")
        table.add_column("t", justify="right")
        table.add_column("Preview MSE", justify="right")
        table.add_column("x0 MSE", justify="right")
        table.add_column("Preview wins", justify="right", style="green")
        for probe in probes:
            d = probe.to_dict()
            table.add_row(f"{probe.fraction:.0%}", str(probe.timestep),
                          f"{d['mean_preview_mse']:.4f}", f"{d['mean_x0_mse']:.4f}",
                          f"{probe.win_rate:.0%}")
        console.print(table)
        config_hash = replace(self.config, distill=cfg).sections_hash(STAGE_SECTIONS['distill-lcm'])
        self.pipeline.record('distill-lcm', SHARED_RUN, [path, probe_path], inputs, self.seed,
                             started, config_hash=config_hash)

    def train_metrics(self):
        """Train the loss and eval identity embedders and the style classifier, then gate them."""
        started = time.time()
        inputs = self.pipeline.check_ready('train-metrics', force=self.force)
        cfg = self.config.metrics
        images, records = self._split('train')
        ids = [r['identity_id'] for r in records]
        styles = [r['style'] for r in records]
        nets = {}
        for name in ('identity_loss', 'identity_eval'):
            label = f"Training {name.replace('_', ' ')} embedder"
            with self._progress(label, cfg.iterations) as update:
                nets[name] = train_identity_embedder(images, ids, cfg,
                                                     seed_stream(self.seed, f"metrics.{name}"),
                                                     progress=update)
        with self._progress("Training style classifier", cfg.iterations) as update:
            nets['style'] = train_style_classifier(images, styles, list(STYLES), cfg,
                                                   seed_stream(self.seed, 'metrics.style'),
                                                   progress=update)

        val_images, val_records = self._split('val')
        val_ids = [r['identity_id'] for r in val_records]
        gates = {name: verify_identity_embedder(nets[name], val_images, val_ids,
                                                seed=derive_seed(self.seed, 'metrics.verify'))
                 for name in ('identity_loss', 'identity_eval')}
        style_acc = style_accuracy(nets['style'], val_images, [r['style'] for r in val_records])

        table = Table(title="📏 Metric networks", box=box.ROUNDED)
        table.add_column("Network", style="cyan")
        table.add_column("AUC", justify="right")
        table.add_column("Same/cross sim", justify="right")
        table.add_column("Style acc", justify="right")
        for name, gate in gates.items():
            table.add_row(name, f"{gate.auc:.3f}",
                          f"{gate.same_identity_mean:.2f} / {gate.cross_identity_mean:.2f}", "-")
        table.add_row('style', "-", "-", f"{style_acc:.1%}")
        console.print(table)

        if cfg.enforce_gates:
            for gate in gates.values():
                check_identity_gate(gate, cfg)
            check_style_gate(style_acc, cfg)
        report = {'identity': {k: g.to_dict() for k, g in gates.items()},
                  'style_accuracy': style_acc}
        gates_path = self.workspace / 'metrics' / 'gates.json'
        path = save_checkpoint(self.pipeline.artifact_path('train-metrics'), nets, metadata=report)
        gates_path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding='utf-8')
        console.print(f"[green]✓[/] Metric networks frozen → {path}")
        self.pipeline.record('train-metrics', SHARED_RUN, [path, gates_path], inputs, self.seed,
                             started)

    # ------------------------------------------------------------------
    # Run stages
    # ------------------------------------------------------------------

    def _alignment_drift(self, generator: PersonalizedGenerator, lcm, images, prompts) -> float:
        """Preview vs multi-step gap at fixed probe latents under the encoder's conditioning."""
        gen = seed_stream(self.seed, 'probe.drift')
        cond = generator.conditioning(images, prompts, gen)
        shape = (generator.denoiser.config.in_channels, generator.denoiser.config.image_size,
                 generator.denoiser.config.image_size)
        z0 = initial_latent((images.shape[0], *shape), gen)
        eps = initial_latent((images.shape[0], *shape), gen)
        t = generator.schedule.T // 2
        z_t = add_noise(generator.schedule, z0, t, eps)
        return preview_divergence(generator.denoiser, generator.schedule, lcm, cond, z_t, t)

    def train_encoder(self, run: str, preset: Optional[str] = None,
                      iterations: Optional[int] = None):
        """Train the personalization encoder for one named run."""
        started = time.time()
        overrides = {'iterations': iterations} if iterations is not None else {}
        self.pipeline.write_run_settings(run, preset, overrides)
        inputs = self.pipeline.check_ready('train-encoder', run, force=self.force)
        cfg = self.pipeline.run_config(run).encoder

        codec, denoiser, schedule = self._load_base()
        lcm = self._load_lcm()
        metrics = self._load_metrics()
        images, records = self._split('train')
        sampler = PairSampler(images, records, self.config.data.cross_style_prob)

        init = seed_stream(self.seed, 'encoder.init')
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(torch.randint(0, 2 ** 31 - 1, (1,), generator=init)))
            encoder = AdapterEncoder(self.config.adapter)
        trainer = EncoderTrainer(denoiser, codec, schedule, encoder, cfg, lcm_lora=lcm,
                                 metric_net=metric_network_for(cfg.metric, metrics), generator=init)

        probe_batch = sampler.batch(8, seed_stream(self.seed, 'probe.pairs'))
        probe_prompts = probe_batch.prompt_r
        personalized = PersonalizedGenerator(denoiser, codec, schedule, encoder, trainer.kv_lora)
        before = self._alignment_drift(personalized, lcm, probe_batch.conditioning_images,
                                       probe_prompts)

        run_dir = self.pipeline.run_dir(run)
        modules = {'adapter_encoder': encoder, 'denoiser': denoiser}
        if trainer.kv_lora is not None:
            modules['kv_lora'] = trainer.kv_lora
        metadata = {'preset': preset, 'encoder': cfg.to_dict()}

        with self._progress(f"Training encoder ({run})", cfg.iterations) as update:
            def on_step(iteration: int, breakdown):
                update(iteration, breakdown.total)
                if cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(run_dir / 'encoder.partial.pt', modules,
                                    optimizers={'optimizer': trainer.optimizer},
                                    metadata={**metadata, 'iteration': iteration + 1})

            trainer.train(sampler.batch, seed_stream(self.seed, 'encoder'),
                          data_generator=seed_stream(self.seed, 'encoder.data'),
                          log_path=run_dir / 'train.jsonl', progress=on_step)

        after = self._alignment_drift(personalized, lcm, probe_batch.conditioning_images,
                                      probe_prompts)
        drift_path = run_dir / 'drift.json'
        drift = {'before': before, 'after': after, 'growth': after - before,
                 'alignment': cfg.alignment.kind}
        drift_path.write_text(json.dumps(drift, indent=2), encoding='utf-8')

        path = save_checkpoint(self.pipeline.artifact_path('train-encoder', run), modules,
                               optimizers={'optimizer': trainer.optimizer}, metadata=metadata)
        console.print(f"[green]✓[/] Encoder '{run}' trained ({cfg.iterations} iterations, "
                      f"preview drift {before:.4f} → {after:.4f}) → {path}")
        self.pipeline.record('train-encoder', run, [path, drift_path], inputs, self.seed, started)

    def sample(self, run: str, prompt: str, identity: Optional[int] = None,
               image: Optional[str] = None, count: int = 1, adapter_weight: float = 1.0,
               **sampling):
        """Generate images of one subject for a prompt."""
        started = time.time()
        inputs = self.pipeline.check_ready('sample', run, force=self.force)
        cfg = self._sampling(sampling)
        generator = self._load_generator(run, cfg)
        if image is not None:
            cond_image = load_image(image).unsqueeze(0)
        else:
            test_images, test_records = self._split('test')
            choices = [i for i, r in enumerate(test_records)
                       if identity is None or r['identity_id'] == identity]
            if not choices:
                raise StateError(f"identity {identity} is not in the test split")
            photo = [i for i in choices if test_records[i]['style'] == 'photo'] or choices
            cond_image = test_images[photo[0]].unsqueeze(0)
        ids = parse_prompt(prompt)
        n = count * cfg.samples_per_prompt
        gen = seed_stream(self.seed, 'sample')
        images = generator.images(cond_image.expand(n, -1, -1, -1),
                                  torch.tensor([ids] * n, dtype=torch.long), gen,
                                  adapter_weight=adapter_weight)
        config_hash = replace(self.config, sampling=cfg).sections_hash(STAGE_SECTIONS['sample'])
        key = hash_payload({'config': config_hash, 'tokens': ids, 'identity': identity,
                            'image': image, 'adapter_weight': adapter_weight})[:12]
        out_dir = self.pipeline.run_dir(run) / 'samples'
        outputs = []
        for k in range(n):
            path = save_image(images[k], out_dir / f"{self.seed}_{key}_{k:02d}.png")
            outputs.append(path)
            append_jsonl(out_dir / 'samples.jsonl', {
                'seed': self.seed, 'prompt': prompt_text(ids), 'tokens': ids,
                'scales': cfg.scales.to_dict(), 'steps': cfg.steps, 'eta': cfg.eta,
                'adapter_weight': adapter_weight, 'output': str(path),
            })
        console.print(f"[green]✓[/] {n} sample(s) of '{prompt_text(ids)}' → {out_dir}")
        self.pipeline.record('sample', run, outputs, inputs, self.seed, started,
                             config_hash=config_hash)

    def guide(self, pairs: Optional[int] = None, guide_step: Optional[int] = None,
              guide_iters: Optional[int] = None, step_size: Optional[float] = None,
              loss_kinds: Optional[List[str]] = None, symmetry: bool = False):
        """Compare lcm-preview and x0-approximation guidance."""
        started = time.time()
        inputs = self.pipeline.check_ready('guide', force=self.force)
        requested = {'pairs': pairs, 'guide_step': guide_step, 'guide_iters': guide_iters,
                     'step_size': step_size, 'loss_kinds': loss_kinds}
        overrides = {k: v for k, v in requested.items() if v is not None}
        cfg = replace(self.config.guidance, **overrides)
        codec, denoiser, schedule = self._load_base()
        lcm = self._load_lcm()
        metrics = self._load_metrics()
        test_images, test_records = self._split('test')
        photo = ([i for i, r in enumerate(test_records) if r['style'] == 'photo']
                 or list(range(len(test_records))))
        guide_images = test_images[photo]
        prompt = torch.tensor([build_prompt('photo', [FACE])], dtype=torch.long)
        cond = denoiser.prompt_conditioning(prompt)
        loss_nets = {kind: metric_network_for(kind, metrics) for kind in cfg.loss_kinds}
        arms = ('lcm', 'lcm') if symmetry else ('x0_approx', 'lcm')
        out_dir = self.workspace / 'guide' / ('symmetry' if symmetry else 'compare')
        with console.status("[bold blue]Running guided sampling..."):
            results = compare_guidance(denoiser, schedule, codec, lcm, guide_images, cond,
                                       loss_nets, metrics['identity_eval'], cfg, self.seed,
                                       arms=arms, out_dir=out_dir)
        summary_path = out_dir / 'summary.json'
        summary_path.write_text(json.dumps([r.to_dict() for r in results], indent=2),
                                encoding='utf-8')

        table = Table(title=f"🧭 Guidance at step {cfg.guide_step}/{cfg.total_steps}",
                      box=box.ROUNDED)
        table.add_column("Loss", style="cyan")
        table.add_column(f"ID ({arms[0]})", justify="right")
        table.add_column(f"ID ({arms[1]})", justify="right")
        table.add_column(f"{arms[1]} wins", justify="right", style="green")
        for r in results:
            d = r.to_dict()
            table.add_row(r.loss_kind, f"{d['mean_similarity_a']:.3f}",
                          f"{d['mean_similarity_b']:.3f}", f"{r.win_rate:.0%} of {d['pairs']}")
        console.print(table)
        config_hash = replace(self.config, guidance=cfg).sections_hash(STAGE_SECTIONS['guide'])
        self.pipeline.record('guide', SHARED_RUN, [summary_path], inputs, self.seed, started,
                             config_hash=config_hash)

    def evaluate(self, run: str, all_prompts: Optional[bool] = None, **sampling):
        """Score a run's encoder on the held-out identities."""
        started = time.time()
        inputs = self.pipeline.check_ready('eval', run, force=self.force)
        metrics = self._load_metrics()
        cfg = self._sampling(sampling)
        eval_cfg = self.config.evaluation
        if all_prompts is not None:
            eval_cfg = replace(eval_cfg, all_prompts=all_prompts)
        generator = self._load_generator(run, cfg)
        images, records = self._split('test')
        cases = build_cases(images, records, seed=derive_seed(self.seed, 'eval.cases'),
                            all_prompts=eval_cfg.all_prompts,
                            max_identities=eval_cfg.max_identities)
        run_config = replace(self.pipeline.run_config(run), sampling=cfg, evaluation=eval_cfg)
        out_dir = self.pipeline.run_dir(run) / 'eval'
        with console.status(f"[bold blue]Evaluating {run} on {len(cases)} cases..."):
            report = evaluate(generator, cases, metrics['identity_eval'], metrics['style'],
                              seed_stream(self.seed, 'eval'), run=run,
                              config_hash=run_config.config_hash(), seed=self.seed,
                              batch_size=eval_cfg.batch_size,
                              grid_path=out_dir / 'grid.png' if eval_cfg.save_grid else None)
        json_path, csv_path = write_report(report, out_dir)
        self._print_report(report)
        self.pipeline.record('eval', run, [json_path, csv_path], inputs, self.seed, started,
                             config_hash=run_config.sections_hash(STAGE_SECTIONS['eval']))

    def report(self, runs: List[str], out: Optional[str] = None):
        """Ablation table across named runs."""
        started = time.time()
        reports = []
        inputs: Dict[str, str] = {}
        for run in runs:
            inputs.update(self.pipeline.check_ready('report', run, force=self.force))
            reports.append(load_report(self.pipeline.artifact_path('eval', run)))
        rows = compare_reports(reports)
        table = Table(title="📊 Ablation", box=box.ROUNDED)
        table.add_column("Run", style="cyan")
        table.add_column("ID", justify="right")
        table.add_column("Style acc", justify="right")
        table.add_column("Samples", justify="right")
        for row in rows:
            table.add_row(row['run'], f"{row['ID']:.3f}", f"{row['style_acc']:.1%}",
                          str(row['samples']))
        console.print(table)
        out_path = Path(out) if out else self.workspace / 'reports' / 'ablation.csv'
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['run', 'ID', 'style_acc'])
            for row in rows:
                writer.writerow([row['run'], row['ID'], row['style_acc']])
        console.print(f"[green]✓[/] Report written → {out_path}")
        self.pipeline.record('report', SHARED_RUN, [out_path], inputs, self.seed, started)

    def stages(self, run: Optional[str] = None):
        """Show the stage manifest."""
        records = self.pipeline.registry.list_stages(run)
        if not records:
            console.print("[yellow]No stages recorded yet. Start with: lookahead forge-data[/]")
            return
        table = Table(title="🗂️  Stage manifest", box=box.ROUNDED)
        table.add_column("Stage", style="cyan")
        table.add_column("Run")
        table.add_column("Config", style="dim")
        table.add_column("Seed", justify="right")
        table.add_column("Wall time", justify="right")
        table.add_column("Outputs")
        for record in records:
            table.add_row(record.stage, record.run, record.config_hash[:10], str(record.seed),
                          format_duration(record.wall_time), str(len(record.output_paths)))
        console.print(table)

    def _print_report(self, report):
        content = (f"[bold]Identity similarity:[/] {report.mean_identity_similarity:.3f}\n"
                   f"[bold]Style accuracy:[/] {report.style_accuracy:.1%}\n"
                   f"[bold]Samples:[/] {report.sample_count}\n\n[cyan]Per style[/]")
        for style, stats in sorted(report.per_style.items()):
            content += (f"\n  {style:<8} ID {stats.identity_similarity:.3f}  "
                        f"style {stats.style_accuracy:.0%}")
        console.print(Panel(content, title=f"📈 {report.run}", border_style="cyan",
                            box=box.ROUNDED))


def _add_sampling_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--steps', type=int, help='DDIM steps')
    parser.add_argument('--eta', type=float, help='DDIM eta (0 deterministic, 1 ancestral)')
    parser.add_argument('--cfg-no-kv', dest='s_no_kv', type=float,
                        help='Guidance scale of the no-KV term')
    parser.add_argument('--cfg-full', dest='s_full', type=float,
                        help='Guidance scale of the full term')
    parser.add_argument('--cfg-kv', dest='s_kv', type=float, help='Guidance scale of the KV term')


def _sampling_args(args) -> Dict[str, Any]:
    return {'steps': args.steps, 'eta': args.eta, 's_no_kv': args.s_no_kv,
            's_full': args.s_full, 's_kv': args.s_kv}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='LCM-lookahead - desk-scale encoder personalization',
        formatter_class=argparse.RawDescriptionHelpFormatter
    )

    parser.add_argument('-v', '--verbose', action='store_true', help='Verbose logging')
    parser.add_argument('--config',
                        help='Config YAML (default: $LOOKAHEAD_CONFIG or lookahead.yaml)')
    parser.add_argument('--workspace', help='Workspace directory')
    parser.add_argument('--seed', type=int, help='Master seed (overrides $LOOKAHEAD_SEED)')
    parser.add_argument('--force', action='store_true',
                        help='Continue on upstream config-hash mismatch')

    subparsers = parser.add_subparsers(dest='command', help='Commands')

    subparsers.add_parser('forge-data', help='Render the procedural dataset')
    subparsers.add_parser('train-base', help='Train the codec and base denoiser')

    distill_parser = subparsers.add_parser('distill-lcm', help='Distill the consistency adapter')
    distill_parser.add_argument('--iters', type=int, help='Distillation iterations')
    distill_parser.add_argument('--ema', type=float, help='Target EMA decay')
    distill_parser.add_argument('--skip-steps', type=int, help='Teacher skip k')
    distill_parser.add_argument('--probe-seeds', type=int, default=100,
                                help='Seeds of the alignment probe')
    distill_parser.add_argument('--probe-sampler', choices=PROBE_SAMPLERS, default='ddpm',
                                help='Sampler whose final output previews are scored against')

    subparsers.add_parser('train-metrics', help='Train and gate the metric networks')

    encoder_parser = subparsers.add_parser('train-encoder', help='Train a personalization encoder')
    encoder_parser.add_argument('run', help='Run name')
    encoder_parser.add_argument('--preset', choices=sorted(ABLATION_PRESETS),
                                help='Ablation preset')
    encoder_parser.add_argument('--iters', type=int, help='Training iterations')

    sample_parser = subparsers.add_parser('sample', help='Generate images of a subject')
    sample_parser.add_argument('run', help='Run name')
    sample_parser.add_argument('--prompt', required=True, help="e.g. 'oil: face @ forest'")
    sample_parser.add_argument('--identity', type=int, help='Test identity to condition on')
    sample_parser.add_argument('--image', help='Conditioning PNG')
    sample_parser.add_argument('-n', '--count', type=int, default=4, help='Images to draw')
    sample_parser.add_argument('--adapter-weight', type=float, default=1.0,
                               help='Adapter path weight')
    _add_sampling_flags(sample_parser)

    guide_parser = subparsers.add_parser('guide', help='Compare preview kinds for latent guidance')
    guide_parser.add_argument('--pairs', type=int, help='Seeded pairs per loss')
    guide_parser.add_argument('--guide-step', type=int,
                              help='Guided step (counted like t=44 of 50)')
    guide_parser.add_argument('--guide-iters', type=int, help='Guidance iterations')
    guide_parser.add_argument('--step-size', type=float, help='Latent step size')
    guide_parser.add_argument('--loss', dest='loss_kinds', action='append',
                              choices=['perceptual', 'clip_like', 'identity'],
                              help='Loss kind (repeatable)')
    guide_parser.add_argument('--symmetry', action='store_true', help='Same preview on both arms')

    eval_parser = subparsers.add_parser('eval', help='Evaluate a run')
    eval_parser.add_argument('run', help='Run name')
    eval_parser.add_argument('--all-prompts', action='store_true', default=None,
                             help='Every eval prompt per identity')
    _add_sampling_flags(eval_parser)

    report_parser = subparsers.add_parser('report', help='Ablation table across runs')
    report_parser.add_argument('runs', nargs='+', help='Run names in table order')
    report_parser.add_argument('--out', help='CSV output path')

    stages_parser = subparsers.add_parser('stages', help='Show the stage manifest')
    stages_parser.add_argument('--run', help='Filter by run')

    return parser


def main(argv: Optional[List[str]] = None):
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(1)

    try:
        config = LookaheadConfig.load(args.config)
        if args.seed is not None:
            config = replace(config, master_seed=args.seed)
        if args.workspace:
            config = replace(config, workspace=args.workspace)
        level = (logging.DEBUG if args.verbose
                 else getattr(logging, str(config.log_level).upper(), logging.INFO))
        setup_logging(Path(config.workspace) / 'logs', level=level)

        cli = LookaheadCLI(config, force=args.force)

        if args.command == 'forge-data':
            cli.forge_data()

        elif args.command == 'train-base':
            cli.train_base()

        elif args.command == 'distill-lcm':
            cli.distill_lcm(iterations=args.iters, ema=args.ema, skip_steps=args.skip_steps,
                            probe_seeds=args.probe_seeds, probe_sampler=args.probe_sampler)

        elif args.command == 'train-metrics':
            cli.train_metrics()

        elif args.command == 'train-encoder':
            cli.train_encoder(args.run, preset=args.preset, iterations=args.iters)

        elif args.command == 'sample':
            cli.sample(args.run, args.prompt, identity=args.identity, image=args.image,
                       count=args.count, adapter_weight=args.adapter_weight,
                       **_sampling_args(args))

        elif args.command == 'guide':
            cli.guide(pairs=args.pairs, guide_step=args.guide_step, guide_iters=args.guide_iters,
                      step_size=args.step_size, loss_kinds=args.loss_kinds, symmetry=args.symmetry)

        elif args.command == 'eval':
            cli.evaluate(args.run, all_prompts=args.all_prompts, **_sampling_args(args))

        elif args.command == 'report':
            cli.report(args.runs, out=args.out)

        elif args.command == 'stages':
            cli.stages(run=args.run)

    except KeyboardInterrupt:
        console.print("\n[yellow]⚠️  Operation cancelled by user[/]")
        sys.exit(130)
    except LookaheadError as e:
        console.print(f"[red]❌ {e}[/]")
        sys.exit(1)


if __name__ == '__main__':
    main()
