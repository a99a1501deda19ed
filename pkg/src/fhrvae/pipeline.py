"""
End-to-end pipeline stages
Each stage reads validated inputs, writes its outputs into a directory and
returns the paths it produced. The CLI wraps every call in an atomic output
directory and echoes the resolved configuration next to the outputs.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from .checkpoint import CHECKPOINT_FILE, ModelCheckpoint
from .config import PreprocessConfig, RunConfig
from .errors import DataValidationError
from .features import feature_frame
from .formats import FORMAT_VERSION, load_segments, read_corpus, save_segments, write_corpus, write_frame, write_json
from .history import HISTORY_FILE
from .interpret import (
    Direction,
    LatentMatrix,
    dimensions_to_traverse,
    ica,
    pca,
    pls_direction,
    r2_panel,
    traverse_component,
    traverse_dimension,
    traverse_direction,
)
from .metrics import (
    ConditionEntry,
    aggregate_case,
    aggregation_comparison,
    auroc,
    build_metrics_report,
    ece,
    roc_points,
    score_histogram,
)
from .models import FEATURE_NAMES, CtgRecord, Group, MaskCode, NormStats, SegmentSet
from .preprocess import SPLITS, create_segment_processor
from .reports import (
    TraceReport,
    create_report_renderer,
    masked_mse,
    reconstructions_bpm,
    segment_lengths,
    segment_scores_frame,
    trace_report,
    traversal_frame,
)
from .synth import corpus_summary, generate_corpus, split_summary
from .training import ModelInputs, train
from .vae import Inference, SupervisedVae

logger = logging.getLogger(__name__)

CORPUS_FILE = "corpus.ndjson"
SEGMENTS_FILE = "segments.bin"


@contextmanager
def timed_stage(name: str) -> Iterator[None]:
    start_time = time.time()
    logger.info(f"Starting {name}")
    try:
        yield
    except Exception as e:
        logger.error(f"{name} failed: {e}")
        raise
    logger.info(f"{name} completed in {int((time.time() - start_time) * 1000)} ms")


@dataclass
class SegmentCorpus:
    """A segments file with its split manifest and training normalisation."""
    segments: SegmentSet
    splits: Dict[str, List[str]]
    norm_stats: NormStats
    preprocess: PreprocessConfig

    def split(self, name: str) -> SegmentSet:
        part = self.segments.select_records(self.splits[name])
        if len(part) == 0:
            raise DataValidationError(f"{name} split has no segments")
        return part

    @classmethod
    def load(cls, path: Path) -> "SegmentCorpus":
        segments, meta = load_segments(path)
        try:
            splits = {name: list(meta["splits"][name]) for name in SPLITS}
            stats = NormStats.model_validate(meta["norm_stats"])
            preprocess = PreprocessConfig.model_validate(meta.get("preprocess", {}))
        except (KeyError, ValueError) as e:
            raise DataValidationError(f"{path}: segment metadata is incomplete: {e}") from e
        return cls(segments=segments, splits=splits, norm_stats=stats, preprocess=preprocess)


def _inputs(segments: SegmentSet, checkpoint: ModelCheckpoint) -> ModelInputs:
    data = ModelInputs.from_segments(segments, checkpoint.norm_stats)
    return data.astype(np.dtype(checkpoint.config.precision))


def _infer(model: SupervisedVae, checkpoint: ModelCheckpoint, segments: SegmentSet) -> Tuple[Inference, ModelInputs]:
    data = _inputs(segments, checkpoint)
    inference = model.infer(data.values, data.mask, data.fft, checkpoint.config.batch_size)
    return inference, data


class Pipeline:
    """Runs the stages of one CLI invocation under a resolved RunConfig"""

    def __init__(self, config: RunConfig, render: bool = False):
        self.config = config
        self.render = render
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    def _render(self, out: Path) -> List[Path]:
        if not self.render:
            return []
        return create_report_renderer().render_directory(out)

    def synth(self, out: Path) -> List[Path]:
        with timed_stage("synth"):
            records = generate_corpus(self.config.synth, self.config.threads)
            write_corpus(records, out / CORPUS_FILE)
            summary = corpus_summary(records)
            write_json(summary.model_dump(mode="json"), out / "corpus_summary.json")
            self.logger.info(
                f"Corpus: {summary.counts}, mean gestation {summary.mean_gestational_age:.1f} weeks, "
                f"{summary.missing_percentage:.2f}% missing"
            )
        return [out / CORPUS_FILE, out / "corpus_summary.json"]

    def preprocess(self, corpus: Path, out: Path) -> List[Path]:
        with timed_stage("preprocess"):
            records = read_corpus(corpus)
            prepared = create_segment_processor(self.config.preprocess).prepare(records, self.config.threads)
            meta = {
                "splits": prepared.splits,
                "norm_stats": prepared.norm_stats.model_dump(mode="json"),
                "preprocess": self.config.preprocess.model_dump(mode="json"),
            }
            save_segments(prepared.segments, out / SEGMENTS_FILE, meta)
            write_json({"format_version": FORMAT_VERSION, **prepared.splits}, out / "splits.json")
            write_json(prepared.norm_stats.model_dump(mode="json"), out / "norm_stats.json")
            write_frame(split_summary(records, prepared.splits, prepared.segments), out / "dataset_summary.csv")
        return [out / SEGMENTS_FILE, out / "splits.json", out / "norm_stats.json", out / "dataset_summary.csv"]

    def features(self, segments_path: Path, out: Path) -> List[Path]:
        with timed_stage("features"):
            corpus = SegmentCorpus.load(segments_path)
            frame = feature_frame(corpus.segments, self.config.features, self.config.threads)
            write_frame(frame, out / "features.csv")
        return [out / "features.csv"]

    def train(self, segments_path: Path, out: Path) -> List[Path]:
        with timed_stage("train"):
            corpus = SegmentCorpus.load(segments_path)
            train_data = ModelInputs.from_segments(corpus.split("train"), corpus.norm_stats)
            validation_data = ModelInputs.from_segments(corpus.split("validation"), corpus.norm_stats)
            result = train(self.config.model, train_data, validation_data, corpus.norm_stats)
            result.checkpoint.save(out / CHECKPOINT_FILE)
            result.history.save(out / HISTORY_FILE)
            write_json(result.checkpoint.training, out / "training.json")
        return [out / CHECKPOINT_FILE, out / HISTORY_FILE, out / "training.json"]

    def evaluate(
        self, checkpoint_path: Path, segments_path: Path, out: Path, corpus_path: Optional[Path] = None
    ) -> List[Path]:
        cfg = self.config.eval
        with timed_stage("eval"):
            checkpoint = ModelCheckpoint.load(checkpoint_path, self.config.model)
            corpus = SegmentCorpus.load(segments_path)
            model = checkpoint.model()
            test = corpus.split("test")
            inference, data = _infer(model, checkpoint, test)
            mse = masked_mse(inference.reconstruction, data.values, data.mask, checkpoint.norm_stats)
            scores = segment_scores_frame(test, inference.scores)
            report = build_metrics_report(scores, test.records, mse, cfg, "test")

            cases = aggregate_case(scores["ctg_id"].tolist(), scores["score"], scores["label"])
            write_json({"format_version": FORMAT_VERSION, **report.model_dump(mode="json")}, out / "metrics.json")
            write_frame(scores, out / "segment_scores.csv")
            write_frame(cases, out / "case_scores.csv")
            write_frame(aggregation_comparison(cases), out / "aggregation_comparison.csv")
            write_frame(roc_points(scores["score"], scores["label"]), out / "roc_segment.csv")
            write_frame(roc_points(cases["median"], cases["label"]), out / "roc_case.csv")
            write_frame(self._condition_roc(scores, test, report.per_condition), out / "roc_conditions.csv")
            write_frame(
                score_histogram(scores["score"], scores["label"], cfg.histogram_bins),
                out / "score_histogram_segment.csv",
            )
            write_frame(
                score_histogram(cases["median"], cases["label"], cfg.histogram_bins), out / "score_histogram_case.csv"
            )

            trace = self._trace(model, checkpoint, corpus, test, inference, report.youden_threshold, corpus_path)
            intervals = trace.intervals.copy()
            intervals.insert(0, "ctg_id", trace.ctg_id)
            write_frame(intervals, out / "trace.csv")
            write_frame(trace.signal, out / "trace_signal.csv")
            self._render(out)
        return sorted(out.iterdir())

    def _condition_roc(
        self, scores: pd.DataFrame, segments: SegmentSet, per_condition: Dict[str, ConditionEntry]
    ) -> pd.DataFrame:
        npo = {c for c, r in segments.records.items() if r.group == Group.NPO}
        frames = []
        for name, entry in sorted(per_condition.items()):
            if not entry.present:
                continue
            positive = {
                c for c, r in segments.records.items() if r.group == Group.APO and entry.condition in r.conditions
            }
            chosen = scores[scores["ctg_id"].isin(positive | npo)]
            cases = aggregate_case(chosen["ctg_id"].tolist(), chosen["score"], chosen["label"])
            for level, s, y in (
                ("segment", chosen["score"], chosen["label"]),
                ("case", cases["median"], cases["label"]),
            ):
                curve = roc_points(s, y)
                curve.insert(0, "level", level)
                curve.insert(0, "condition", name)
                frames.append(curve)
        if not frames:
            return pd.DataFrame(columns=["condition", "level", "threshold", "fpr", "tpr"])
        return pd.concat(frames, ignore_index=True)

    def _trace_id(self, test: SegmentSet) -> str:
        wanted = self.config.eval.trace_ctg_id
        if wanted is not None:
            return wanted
        counts = pd.Series([str(p) for p in test.parent_ids]).value_counts()
        npo = [c for c, r in test.records.items() if r.group == Group.NPO]
        pool = counts[counts.index.isin(npo)] if npo else counts
        if pool.empty:
            pool = counts
        return str(sorted(pool.index, key=lambda c: (-int(pool[c]), c))[0])

    def _trace(
        self,
        model: SupervisedVae,
        checkpoint: ModelCheckpoint,
        corpus: SegmentCorpus,
        test: SegmentSet,
        inference: Inference,
        threshold: float,
        corpus_path: Optional[Path],
    ) -> TraceReport:
        ctg_id = self._trace_id(test)
        band = self.config.eval.trace_band
        if corpus_path is not None:
            records = {r.ctg_id: r for r in read_corpus(corpus_path)}
            if ctg_id not in records:
                raise DataValidationError(f"trace record {ctg_id} is not in {corpus_path}")
            return trace_record(records[ctg_id], checkpoint, corpus.preprocess, threshold, band, model)

        chosen = np.flatnonzero(np.array([str(p) == ctg_id for p in corpus.segments.parent_ids]))
        if chosen.size == 0:
            raise DataValidationError(f"trace record {ctg_id} has no segments")
        segments = corpus.segments.subset(chosen)
        in_test = np.array([str(p) == ctg_id for p in test.parent_ids])
        if in_test.sum() == len(segments):
            scores, recon = inference.scores[in_test], inference.reconstruction[in_test]
        else:
            own, _ = _infer(model, checkpoint, segments)
            scores, recon = own.scores, own.reconstruction
        return trace_report(
            ctg_id,
            series_from_segments(segments),
            segments.start_offsets,
            segment_lengths(segments),
            scores,
            reconstructions_bpm(recon, checkpoint.norm_stats),
            threshold,
            band,
        )

    def tc_sweep(self, segments_path: Path, out: Path) -> List[Path]:
        sweep = self.config.sweep
        with timed_stage("tc-sweep"):
            corpus = SegmentCorpus.load(segments_path)
            train_data = ModelInputs.from_segments(corpus.split("train"), corpus.norm_stats)
            validation_data = ModelInputs.from_segments(corpus.split("validation"), corpus.norm_stats)
            test = corpus.split("test")
            rows = []
            for target in sweep.tc_targets:
                for seed in sweep.seeds:
                    model_config = self.config.model.model_copy(update={"tc_target": float(target), "seed": int(seed)})
                    self.logger.info(f"Sweep run: tc_target={target}, seed={seed}")
                    result = train(model_config, train_data, validation_data, corpus.norm_stats)
                    checkpoint = result.checkpoint
                    inference, data = _infer(checkpoint.model(), checkpoint, test)
                    rows.append(
                        {
                            "tc_target": float(target),
                            "seed": int(seed),
                            "best_epoch": result.best_epoch,
                            "final_tc": float(checkpoint.training["final_tc"]),
                            "final_kl": float(checkpoint.training["final_kl"]),
                            "mse": masked_mse(inference.reconstruction, data.values, data.mask, corpus.norm_stats),
                            "auroc": auroc(inference.scores, test.labels),
                            "ece": ece(inference.scores, test.labels, self.config.eval.ece_bins),
                        }
                    )
            runs = pd.DataFrame(rows)
            write_frame(runs, out / "tc_sweep_runs.csv")
            write_frame(sweep_summary(runs), out / "tc_sweep_summary.csv")
        return [out / "tc_sweep_runs.csv", out / "tc_sweep_summary.csv"]

    def interpret(self, checkpoint_path: Path, segments_path: Path, out: Path) -> List[Path]:
        cfg = self.config.interpret
        with timed_stage("interpret"):
            checkpoint = ModelCheckpoint.load(checkpoint_path, self.config.model)
            corpus = SegmentCorpus.load(segments_path)
            model = checkpoint.model()
            test = corpus.split("test")
            inference, _ = _infer(model, checkpoint, test)
            latents = LatentMatrix.from_segments(test, inference.mu)
            features = feature_frame(test, self.config.features, self.config.threads)

            write_frame(latents.to_pandas(), out / "latents.csv")
            write_frame(r2_panel(features, latents, inference.scores, test.labels), out / "r2_panel.csv")

            directions = {}
            for name in FEATURE_NAMES:
                values = features[name].to_numpy(dtype=np.float64)
                keep = np.isfinite(values)
                if keep.sum() < 3:
                    self.logger.warning(f"Skipping {name} direction: only {int(keep.sum())} defined values")
                    continue
                sub = LatentMatrix(latents.values[keep], latents.ctg_ids[keep], latents.start_offsets[keep])
                try:
                    directions[name] = pls_direction(sub, values[keep], name)
                except DataValidationError as e:
                    self.logger.warning(f"Skipping {name} direction: {e}")
            write_frame(directions_frame(directions.values(), latents.latent_dim), out / "pls_directions.csv")

            for name, direction in directions.items():
                family = traverse_direction(
                    checkpoint, latents, direction, cfg.traversal_steps, cfg.direction_span, model
                )
                frame = traversal_frame(family.multipliers, family.signals)
                write_frame(frame, out / f"traversal_direction_{name}.csv")

            anchors = [directions[n] for n in ("baseline", "baseline_shift") if n in directions]
            dims = dimensions_to_traverse(anchors, latents, cfg.n_dimension_traversals)
            for dim in dims:
                family = traverse_dimension(checkpoint, latents, dim, cfg.traversal_steps, cfg.dimension_span, model)
                write_frame(traversal_frame(family.multipliers, family.signals), out / f"traversal_dimension_{dim}.csv")

            pca_result = pca(latents)
            write_frame(pca_result.loadings(), out / "pca_loadings.csv")
            for k in range(min(cfg.ica_components, latents.latent_dim)):
                step = pca_result.components[k] * np.sqrt(pca_result.explained_variance[k])
                family = traverse_component(
                    checkpoint, latents.mean, step, f"pca_{k}", cfg.traversal_steps, cfg.component_span, model
                )
                write_frame(traversal_frame(family.multipliers, family.signals), out / f"pca_traversal_{k}.csv")

            ica_result = ica(
                latents, cfg.ica_components, cfg.ica_seed, cfg.ica_max_iter, cfg.ica_tol, cfg.ica_require_convergence
            )
            write_frame(ica_result.loadings(), out / "ica_loadings.csv")
            for k, mixing in enumerate(ica_result.mixing):
                family = traverse_component(
                    checkpoint, latents.mean, mixing, f"ica_{k}", cfg.traversal_steps, cfg.component_span, model
                )
                write_frame(traversal_frame(family.multipliers, family.signals), out / f"ica_traversal_{k}.csv")

            write_json(
                {
                    "format_version": FORMAT_VERSION,
                    "n_segments": len(test),
                    "directions": sorted(directions),
                    "traversed_dimensions": dims,
                    "ica_converged": ica_result.converged,
                    "ica_iterations": ica_result.n_iter,
                },
                out / "interpret_summary.json",
            )
            self._render(out)
        return sorted(out.iterdir())


def series_from_segments(segments: SegmentSet) -> np.ndarray:
    """Rebuild a record's cleaned 4 Hz series (NaN where not VALID) from its segments."""
    lengths = segment_lengths(segments)
    starts = np.array([int(round(s * 4.0)) for s in segments.start_offsets])
    series = np.full(int((starts + lengths).max()), np.nan)
    for start, length, values, mask in zip(starts, lengths, segments.values, segments.mask):
        valid = mask[:length] == MaskCode.VALID
        window = series[start:start + length]
        window[valid] = values[:length][valid]
    return series


def trace_record(
    record: CtgRecord,
    checkpoint: ModelCheckpoint,
    preprocess: PreprocessConfig,
    threshold: float,
    band: float = 0.05,
    model: Optional[SupervisedVae] = None,
) -> TraceReport:
    """Clean, segment and score one raw record, then build its trace report."""
    processor = create_segment_processor(preprocess)
    series = processor.clean_record(record)
    segments = SegmentSet.from_segments(processor.process_record(record))
    if len(segments) == 0:
        raise DataValidationError(f"{record.ctg_id} yields no valid segments")
    inference, _ = _infer(model or checkpoint.model(), checkpoint, segments)
    return trace_report(
        record.ctg_id,
        series,
        segments.start_offsets,
        segment_lengths(segments),
        inference.scores,
        reconstructions_bpm(inference.reconstruction, checkpoint.norm_stats),
        threshold,
        band,
    )


def sweep_summary(runs: pd.DataFrame) -> pd.DataFrame:
    """Mean and SD across seeds of each sweep metric, one row per TC target."""
    metrics = ["final_tc", "mse", "auroc", "ece"]
    grouped = runs.groupby("tc_target", sort=True)[metrics].agg(["mean", "std"])
    grouped.columns = [f"{metric}_{stat}" for metric, stat in grouped.columns]
    grouped.insert(0, "n_runs", runs.groupby("tc_target", sort=True).size())
    return grouped.reset_index()


def directions_frame(directions: Iterable[Direction], latent_dim: int) -> pd.DataFrame:
    rows = []
    for direction in directions:
        row = {"feature": direction.feature, "projection_sd": direction.projection_sd}
        row.update({f"z{d}": float(v) for d, v in enumerate(direction.vector)})
        rows.append(row)
    return pd.DataFrame(rows, columns=["feature", "projection_sd"] + [f"z{d}" for d in range(latent_dim)])


def create_pipeline(config: RunConfig, render: bool = False) -> Pipeline:
    """Factory function to create a pipeline for one resolved configuration"""
    return Pipeline(config, render)
