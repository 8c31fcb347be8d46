"""
Evaluation: identity similarity and style alignment of generated images.
"""

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import csv
import json
import logging

import numpy as np
import torch

from core.exceptions import ConfigurationError, StateError
from core.models import EvalReport, StyleBreakdown
from evalkit.networks import IdentityEmbedder, StyleClassifier, identity_similarity
from personalization.prompts import CONTEXTS, FACE, STYLES, VOCAB, build_prompt
from utils import hash_payload, save_image_grid

logger = logging.getLogger(__name__)

# 6 styles x 3 contexts
EVAL_PROMPTS: List[List[int]] = [build_prompt(style, [FACE], context)
                                 for style in STYLES for context in CONTEXTS[:3]]


@dataclass
class EvaluationConfig:
    """Evaluation protocol settings."""

    all_prompts: bool = False
    batch_size: int = 32
    max_identities: Optional[int] = None
    save_grid: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("evaluation.batch_size", "must be >= 1")
        if self.max_identities is not None and self.max_identities < 1:
            raise ConfigurationError("evaluation.max_identities", "must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvalCase:
    """One (identity, prompt) evaluation item."""

    identity_id: int
    conditioning_image: torch.Tensor
    prompt: List[int]

    @property
    def style(self) -> str:
        return VOCAB[self.prompt[0]]


def metric_hash(embedder: IdentityEmbedder, classifier: StyleClassifier) -> str:
    """Combined content hash of the evaluation networks."""
    return hash_payload({'identity': embedder.content_hash(), 'style': classifier.content_hash()})


def build_cases(images: torch.Tensor, records: Sequence[Dict[str, Any]], seed: int,
                prompts: Sequence[List[int]] = EVAL_PROMPTS, all_prompts: bool = False,
                max_identities: Optional[int] = None) -> List[EvalCase]:
    """
    Pair each evaluation identity with prompts.

    The conditioning image is the identity's photo-style image (its first
    image otherwise). By default one prompt is drawn per identity.
    """
    rng = np.random.default_rng(seed)
    chosen: Dict[int, int] = {}
    for i, r in enumerate(records):
        ident = r['identity_id']
        current = records[chosen[ident]]['style'] if ident in chosen else None
        if current is None or (r['style'] == 'photo' and current != 'photo'):
            chosen[ident] = i
    cases = []
    identities = sorted(chosen)
    if max_identities is not None:
        identities = identities[:max_identities]
    for ident in identities:
        image = images[chosen[ident]]
        picks = range(len(prompts)) if all_prompts else [int(rng.integers(len(prompts)))]
        cases.extend(EvalCase(ident, image, list(prompts[k])) for k in picks)
    return cases


def score_images(generated: torch.Tensor, references: torch.Tensor, requested_styles: Sequence[str],
                 embedder: IdentityEmbedder,
                 classifier: StyleClassifier) -> Tuple[List[float], List[bool]]:
    """Per-image identity similarity against references and style agreement."""
    if embedder is None or classifier is None:
        raise StateError("metric networks missing; run train-metrics")
    with torch.no_grad():
        sims = identity_similarity(embedder.embed(generated), embedder.embed(references)).tolist()
        predicted = classifier.predict(generated)
    return sims, [p == s for p, s in zip(predicted, requested_styles)]


def summarize(run: str, sims: Sequence[float], hits: Sequence[bool], styles: Sequence[str],
              config_hash: str, metrics_hash: str, seed: int) -> EvalReport:
    """Aggregate per-image scores into an EvalReport."""
    per_style = {}
    for style in sorted(set(styles)):
        idx = [i for i, s in enumerate(styles) if s == style]
        per_style[style] = StyleBreakdown(
            identity_similarity=float(np.mean([sims[i] for i in idx])),
            style_accuracy=float(np.mean([hits[i] for i in idx])),
            sample_count=len(idx),
        )
    return EvalReport(
        run=run,
        mean_identity_similarity=float(np.mean(sims)) if sims else 0.0,
        style_accuracy=float(np.mean(hits)) if hits else 0.0,
        sample_count=len(sims),
        config_hash=config_hash,
        metric_hash=metrics_hash,
        seed=seed,
        per_style=per_style,
    )


def evaluate(generator, cases: Sequence[EvalCase], embedder: Optional[IdentityEmbedder],
             classifier: Optional[StyleClassifier], torch_generator: torch.Generator, run: str,
             config_hash: str, seed: int, batch_size: int = 32,
             grid_path: Optional[Union[str, Path]] = None) -> EvalReport:
    """
    Sample one image per case and score it.

    Args:
        generator: PersonalizedGenerator of the model under test
        cases: Evaluation items from ``build_cases``
        embedder: Frozen evaluation identity embedder
        classifier: Frozen style classifier
        torch_generator: Seeded generator for sampling
        run: Run name recorded in the report
        config_hash: Hash of the run's configuration
        seed: Master seed recorded in the report
        batch_size: Cases sampled per batch
        grid_path: Optional PNG of (conditioning, generated) rows

    Returns:
        EvalReport

    Raises:
        StateError: If a metric network is missing
    """
    if embedder is None or classifier is None:
        raise StateError("metric networks missing; run train-metrics")
    sims, hits, styles, grid = [], [], [], []
    for start in range(0, len(cases), batch_size):
        chunk = cases[start:start + batch_size]
        cond = torch.stack([c.conditioning_image for c in chunk])
        prompts = torch.tensor([c.prompt for c in chunk], dtype=torch.long)
        images = generator.images(cond, prompts, torch_generator).cpu().to(cond.dtype)
        s, h = score_images(images, cond, [c.style for c in chunk], embedder, classifier)
        sims.extend(s)
        hits.extend(h)
        styles.extend(c.style for c in chunk)
        grid.extend([c.conditioning_image, img] for c, img in zip(chunk, images))
    if grid_path is not None and grid:
        save_image_grid(grid, grid_path)
    metrics = metric_hash(embedder, classifier)
    report = summarize(run, sims, hits, styles, config_hash, metrics, seed)
    logger.info("eval %s: ID=%.3f style_acc=%.3f (n=%d)", run, report.mean_identity_similarity,
                report.style_accuracy, report.sample_count)
    return report


def write_report(report: EvalReport, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Write ``<run>.json`` and ``<run>.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{report.run}.json"
    json_path.write_text(report.to_json(), encoding='utf-8')
    csv_path = out_dir / f"{report.run}.csv"
    rows = report.csv_rows()
    with open(csv_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return json_path, csv_path


def load_report(path: Union[str, Path]) -> EvalReport:
    path = Path(path)
    if not path.exists():
        raise StateError(f"eval report missing at {path}; run eval")
    return EvalReport.from_dict(json.loads(path.read_text(encoding='utf-8')))


def compare_reports(reports: Sequence[EvalReport]) -> List[Dict[str, Any]]:
    """
    Ablation table rows {run, ID, style_acc} in the given order.

    Raises:
        StateError: If the reports were scored with different metric networks
    """
    hashes = {r.metric_hash for r in reports}
    if len(hashes) > 1:
        raise StateError("reports were scored with different metric networks; re-run eval")
    return [{'run': r.run, 'ID': round(r.mean_identity_similarity, 4),
             'style_acc': round(r.style_accuracy, 4), 'samples': r.sample_count} for r in reports]
