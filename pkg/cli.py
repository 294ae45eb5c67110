# cli.py
import click
import logging
from pathlib import Path

import numpy as np

from rsn import create_app
from rsn.core import CLASS_NAMES, PEDESTRIAN_CLASS_ID, Rng, VEHICLE_CLASS_ID
from rsn.evalkit import evaluate_by_distance, evaluation_report, random_augmentations, tta_wrap, wbf_3d
from rsn.export_service import ExportService
from rsn.pipeline import RangeFeatureCache, RunConfig, bench_gamma_sweep, process_scenes, run_pipeline
from rsn.synth import load_scenes, save_scenes, split_sequences, synth_scene, synth_sequence
from rsn.voxelizer import regroup_sequence
from rsn.weights import check_weights, init_weights, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CLASS_CHOICES = {"vehicle": VEHICLE_CLASS_ID, "pedestrian": PEDESTRIAN_CLASS_ID}


def _fail(message):
    click.echo(f"❌ {message}", err=True)
    raise SystemExit(1)


def _load_config(preset, config_file):
    if config_file:
        return RunConfig.load(config_file)
    return RunConfig.preset(preset)


def _load_weights(config, weights_path):
    if weights_path is None:
        logger.info("No checkpoint given; initializing weights from seed %d", config.seed)
        return init_weights(config, Rng(config.seed))
    weights = load_checkpoint(weights_path)
    check_weights(weights, config.layer_specs())
    return weights


def _frame_groups(scenes, num_frames):
    """Latest-first windows that never reach across a sequence boundary."""
    groups = []
    for sequence in split_sequences(scenes):
        groups.extend(list(group) for group in regroup_sequence(sequence, num_frames - 1))
    return groups


@click.group()
@click.pass_context
def cli(ctx):
    """Range-image LiDAR detection: synthetic data, runs, benchmarks and evaluation."""
    ctx.obj = create_app()


@cli.command('synth')
@click.option('--seed', type=int, required=True, help='Seed for every random draw.')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None)
@click.option('--scenes', 'n_scenes', type=int, default=1, show_default=True)
@click.option('--boxes', 'n_boxes', type=int, default=5, show_default=True)
@click.option('--bg-points', type=int, default=2000, show_default=True)
@click.option('--class', 'class_name', type=click.Choice(sorted(CLASS_CHOICES)), default='vehicle')
@click.option('--max-range', type=float, default=35.0, show_default=True)
@click.option('--frames', type=int, default=1, show_default=True, help='Frames per sequence (moving ego).')
@click.option('--height', type=int, default=64, show_default=True)
@click.option('--width', type=int, default=1024, show_default=True)
@click.pass_obj
def synth(app, seed, out_dir, n_scenes, n_boxes, bg_points, class_name, max_range, frames, height, width):
    """Generate seeded synthetic scenes and write them with a manifest."""
    out_dir = Path(out_dir) if out_dir else app.output_dir / 'scenes'
    try:
        rng = Rng(seed)
        class_id = CLASS_CHOICES[class_name]
        scenes = []
        for i in range(n_scenes):
            if frames > 1:
                scenes.extend(synth_sequence(rng.child(i), frames, n_boxes, bg_points, class_id, max_range,
                                             height, width, sequence_id=f"seq-{i:04d}"))
            else:
                scenes.append(synth_scene(rng.child(i), n_boxes, bg_points, class_id, max_range,
                                          height, width, scene_id=f"scene-{i:04d}"))
        manifest = save_scenes(out_dir, scenes, {"seed": seed, "class": class_name, "frames": frames,
                                                 "height": height, "width": width})
    except Exception as e:
        _fail(f"Scene generation failed: {e}")
    click.echo(f"✅ Wrote {len(scenes)} scenes to {manifest.parent}")


@cli.command('weights-init')
@click.option('--seed', type=int, required=True)
@click.option('--preset', default='CarS', show_default=True)
@click.option('--config-file', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def weights_init(app, seed, preset, config_file, out_path):
    """Write a freshly initialized RSNW checkpoint."""
    out_path = Path(out_path) if out_path else app.output_dir / 'weights.rsnw'
    try:
        config = _load_config(preset, config_file)
        weights = init_weights(config, Rng(seed))
        save_checkpoint(out_path, weights)
    except Exception as e:
        _fail(f"Weight initialization failed: {e}")
    click.echo(f"✅ Wrote {len(weights)} tensors to {out_path}")


@cli.command('run')
@click.option('--scenes', 'scenes_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--preset', default='CarS', show_default=True)
@click.option('--config-file', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--weights', 'weights_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--oracle', is_flag=True, help='Plant segmentation and head outputs from ground truth.')
@click.option('--tta', type=int, default=0, show_default=True, help='Augmented runs fused with WBF.')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None)
@click.option('--threads', type=int, default=None, help='Defaults to RSN_THREADS.')
@click.pass_obj
def run(app, scenes_dir, preset, config_file, weights_path, oracle, tta, out_path, threads):
    """Run the detector over a scene directory and write detections as JSON lines."""
    out_path = Path(out_path) if out_path else app.output_dir / 'detections.jsonl'
    threads = threads or app.threads
    try:
        config = _load_config(preset, config_file)
        weights = _load_weights(config, weights_path)
        scenes = load_scenes(scenes_dir)
        if tta:
            if config.num_frames != 1:
                raise ValueError("--tta runs single-frame configurations only")
            augmentations = random_augmentations(Rng(config.seed).child(1), tta)
            pairs = []
            for scene in scenes:
                sets = tta_wrap(lambda s: run_pipeline(s, config, weights, oracle).detections, scene, augmentations)
                pairs.append((scene.scene_id, wbf_3d(sets)))
            ExportService.write_detections(out_path, pairs)
            click.echo(f"✅ Fused {tta} augmented runs for {len(scenes)} scenes into {out_path}")
            return
        cache = RangeFeatureCache(app.feature_cache_size) if config.temporal else None
        results = process_scenes(_frame_groups(scenes, config.num_frames), config, weights, threads,
                                 oracle, cache, progress=True)
        ExportService.write_detections(out_path, [(r.scene_id, r.detections) for r in results])
    except Exception as e:
        _fail(f"Run failed: {e}")
    click.echo(ExportService.run_summary(results))
    click.echo(f"✅ Wrote {sum(len(r.detections) for r in results)} detections to {out_path}")


@cli.command('bench-gamma')
@click.option('--scenes', 'scenes_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--preset', default='CarS', show_default=True)
@click.option('--config-file', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--weights', 'weights_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--gammas', default=None, help='Comma-separated thresholds; default 10 values in [0, 1].')
@click.option('--network', is_flag=True, help='Use network segmentation scores instead of planted ones.')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def bench_gamma(app, scenes_dir, preset, config_file, weights_path, gammas, network, out_path):
    """Sweep the foreground threshold and record point counts, pairs, time and recall."""
    out_path = Path(out_path) if out_path else app.output_dir / 'bench_gamma.csv'
    try:
        values = [float(g) for g in gammas.split(',')] if gammas else np.linspace(0.0, 1.0, 10).tolist()
        config = _load_config(preset, config_file)
        if config.num_frames != 1:
            config = RunConfig.model_validate(dict(config.model_dump(), num_frames=1))
        weights = _load_weights(config, weights_path)
        table = bench_gamma_sweep(load_scenes(scenes_dir), config, weights, values, oracle=not network)
        ExportService.write_bench_csv(out_path, table)
    except Exception as e:
        _fail(f"Benchmark failed: {e}")
    click.echo(ExportService.format_table(table.to_dict('records'), [(c.upper(), c) for c in table.columns]))
    click.echo(f"✅ Wrote {len(table)} rows to {out_path}")


@cli.command('eval')
@click.option('--detections', 'detections_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--scenes', 'scenes_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--mode', type=click.Choice(['BEV', '3D'], case_sensitive=False), default='3D')
@click.option('--iou', type=float, default=None, help='Overrides the per-class thresholds (0.7 / 0.5).')
@click.option('--by-distance', is_flag=True, help='Add range buckets 0-30, 30-50, 50+ m.')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def eval_detections(app, detections_path, scenes_dir, mode, iou, by_distance, out_path):
    """Evaluate AP/APH of a detections file against scene ground truth."""
    out_path = Path(out_path) if out_path else app.output_dir / 'eval_report.json'
    try:
        detections = ExportService.read_detections(detections_path)
        scenes = load_scenes(scenes_dir)
        triples = [(detections.get(s.scene_id, []), list(s.boxes), s.class_ids.tolist()) for s in scenes]
        thresholds = {
            VEHICLE_CLASS_ID: iou if iou is not None else RunConfig.preset('CarS').detector.iou_threshold,
            PEDESTRIAN_CLASS_ID: iou if iou is not None else RunConfig.preset('PedS').detector.iou_threshold,
        }
        report = evaluation_report(triples, thresholds, mode, CLASS_NAMES)
        if by_distance:
            for class_id, name in CLASS_NAMES.items():
                if name not in report:
                    continue
                per_class = [([d for d in dets if d.class_id == class_id],
                              [g for g, c in zip(gts, classes) if c == class_id]) for dets, gts, classes in triples]
                report[name]["by_distance"] = evaluate_by_distance(per_class, thresholds[class_id], mode)
        ExportService.write_report(out_path, report)
    except Exception as e:
        _fail(f"Evaluation failed: {e}")
    click.echo(ExportService.report_summary(report))
    click.echo(f"✅ Wrote evaluation report to {out_path}")


@cli.command('fuse')
@click.argument('inputs', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--iou-cluster', type=float, default=0.55, show_default=True)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def fuse(app, inputs, iou_cluster, out_path):
    """Fuse several detection files scene by scene with 3D weighted boxes fusion."""
    out_path = Path(out_path) if out_path else app.output_dir / 'fused.jsonl'
    try:
        sources = [ExportService.read_detections(path) for path in inputs]
        scene_ids = []
        for source in sources:
            scene_ids.extend(s for s in source if s not in scene_ids)
        fused = [(sid, wbf_3d([source.get(sid, []) for source in sources], iou_cluster)) for sid in scene_ids]
        ExportService.write_detections(out_path, fused)
    except Exception as e:
        _fail(f"Fusion failed: {e}")
    click.echo(f"✅ Fused {len(inputs)} files over {len(scene_ids)} scenes into {out_path}")


if __name__ == '__main__':
    cli()
