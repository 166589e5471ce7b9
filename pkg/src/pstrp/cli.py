"""Command-line entry point wiring the pipeline stages together.

Commands: ``synth`` (materialize a synthetic dataset), ``extract`` (build
an STC store from the training split), ``train``, ``score``, ``eval``
(print AUROC for a scores file), and ``plot`` (per-video score curves).
Every command takes ``--config <path-or-preset>`` plus repeatable
``--override section.key=value`` flags; the fully-resolved config is
echoed into the output directory for provenance. Exit codes: 0 success,
1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import PipelineConfig, dump_config, load_config
from .errors import ConfigError, PstrpError, ValidationError

log = logging.getLogger(__name__)


def _echo_config(cfg: PipelineConfig, out_dir: Path, command: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / f"resolved_config.{command}.yaml")


def cmd_synth(cfg: PipelineConfig, out_root) -> Path:
    from .ingestion import materialize_synthetic

    if cfg.synthetic is None:
        raise ConfigError("config has no 'synthetic' section")
    out_root = Path(out_root)
    materialize_synthetic(cfg.synthetic, out_root)
    _echo_config(cfg, out_root, "synth")
    log.info("wrote synthetic dataset to %s", out_root)
    return out_root


def cmd_extract(cfg: PipelineConfig, dataset_root, out_store, dump_relations=None) -> Path:
    from . import roi
    from .ingestion import load_dataset
    from .store import StcStoreWriter

    train, _ = load_dataset(dataset_root, cfg.dataset.layout)
    if not train:
        raise ValidationError(f"no training videos under {dataset_root}")
    params = roi.MotionParams(
        diff_threshold=cfg.extraction.diff_threshold,
        min_area=cfg.extraction.min_area,
        dilation=cfg.extraction.dilation,
    )
    writer = StcStoreWriter(
        out_store, half_window=cfg.extraction.half_window, channels=train[0].channels
    )
    total = skipped_total = 0
    for seq in train:
        appearance = {}
        if cfg.extraction.boxes_file:
            appearance = roi.load_appearance_rois(
                cfg.extraction.boxes_file, seq.video_id,
                cfg.extraction.confidence_threshold,
            )
        rois = {}
        for t in range(seq.frame_count):
            motion = roi.motion_rois(seq, t, params) if t >= 1 else []
            rois[t] = roi.merge_rois(
                appearance.get(t, []), motion, cfg.extraction.merge_iou
            )
        cubes, skipped = roi.build_stcs(seq, rois, cfg.extraction.half_window)
        writer.add_video(seq.video_id, cubes)
        if dump_relations is not None:
            _dump_relations(cubes, cfg.patching.spatial_grid, Path(dump_relations))
        total += len(cubes)
        skipped_total += skipped
        log.info("%s: %d cubes (%d boxes skipped)", seq.video_id, len(cubes), skipped)
    writer.close()
    _echo_config(cfg, Path(out_store), "extract")
    log.info("stored %d cubes in %s", total, out_store)
    return Path(out_store)


def _dump_relations(cubes, spatial_grid, dump_dir):
    """Debug dump of the relation-matrix targets, one CSV per video."""
    import csv

    from . import patching, relations

    if not cubes:
        return
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"{cubes[0].video_id}.relations.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cube", "frame", "kind", "i", "j", "value"])
        for offset, cube in enumerate(cubes):
            matrices = (
                relations.canberra_matrix(patching.slice_spatial(cube, spatial_grid)),
                relations.cosine_matrix(patching.slice_temporal(cube)),
            )
            for matrix in matrices:
                for i in range(matrix.n):
                    for j in range(matrix.n):
                        writer.writerow(
                            [offset, cube.center_frame_index, matrix.kind,
                             i, j, f"{matrix.d[i, j]:.10f}"]
                        )


def cmd_train(cfg: PipelineConfig, store_path, out_dir):
    import torch

    from .model import build_two_stream, stream_configs_for
    from .store import StcStore
    from .training import train

    store = StcStore(store_path)
    spatial_cfg, temporal_cfg = stream_configs_for(
        cfg.model.size_preset,
        half_window=store.half_window,
        spatial_grid=cfg.patching.spatial_grid,
        channels=store.channels,
        cube_size=store.cube_size,
        dropout=cfg.model.dropout,
        overrides=cfg.model.overrides(),
    )
    if store.half_window != cfg.extraction.half_window:
        raise ConfigError(
            f"store half_window {store.half_window} != config "
            f"{cfg.extraction.half_window}"
        )
    torch.manual_seed(cfg.training.seed)
    model = build_two_stream(spatial_cfg, temporal_cfg)
    result = train(
        store,
        model,
        cfg.training,
        cfg.loss_weights,
        spatial_grid=cfg.patching.spatial_grid,
        out_dir=out_dir,
        run_config=cfg.to_dict(),
    )
    _echo_config(cfg, Path(out_dir), "train")
    return result


def cmd_score(cfg: PipelineConfig, checkpoint, dataset_root, out_csv) -> Path:
    from .ingestion import load_dataset
    from .scoring import score_dataset, write_scores_csv

    _, test = load_dataset(dataset_root, cfg.dataset.layout)
    if not test:
        raise ValidationError(f"no labeled test videos under {dataset_root}")
    series = score_dataset(checkpoint, test, cfg)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out_csv, series)
    _echo_config(cfg, out_csv.parent, "score")
    log.info("wrote scores for %d videos to %s", len(series), out_csv)
    return out_csv


def cmd_eval(scores_csv) -> float:
    from .scoring import dataset_auroc, read_scores_csv

    value = dataset_auroc(read_scores_csv(scores_csv))
    print(f"AUROC={value:.4f}")
    return value


def cmd_plot(scores_csv, out_dir) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .scoring import read_scores_csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for series in read_scores_csv(scores_csv):
        fig, ax = plt.subplots(figsize=(8, 3))
        frames = range(len(series.anomaly))
        if series.labels is not None:
            in_interval = False
            start = 0
            for t, flag in enumerate(list(series.labels) + [0]):
                if flag and not in_interval:
                    in_interval, start = True, t
                elif not flag and in_interval:
                    ax.axvspan(start, t, color="orange", alpha=0.3)
                    in_interval = False
        ax.plot(frames, series.anomaly, color="red", linewidth=1.2)
        ax.set_xlabel("frame")
        ax.set_ylabel("anomaly score")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(series.video_id)
        fig.tight_layout()
        fig.savefig(out_dir / f"{series.video_id}.png", dpi=120)
        plt.close(fig)
    return out_dir


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pstrp",
        description="Self-supervised video anomaly detection pipeline",
    )
    parser.add_argument("--version", action="version", version=f"pstrp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file path or preset name")
        p.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE",
            help="override a config entry, e.g. training.epochs=5",
        )
        p.add_argument("--workers", type=int, default=None,
                       help="bound worker-thread parallelism")

    p = sub.add_parser("synth", help="materialize a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="dataset root to write")

    p = sub.add_parser("extract", help="build an STC store from the training split")
    common(p)
    p.add_argument("--dataset", help="dataset root (default: config dataset.root)")
    p.add_argument("--boxes", help="detector boxes file, or 'none'")
    p.add_argument("--half-window", type=int, dest="half_window")
    p.add_argument("--dump-relations", dest="dump_relations", metavar="DIR",
                   help="also write per-video relation-matrix CSVs for inspection")
    p.add_argument("--out", required=True, help="STC store directory")

    p = sub.add_parser("train", help="train the two-stream model")
    common(p)
    p.add_argument("--stcs", required=True, help="STC store directory")
    p.add_argument("--out", required=True, help="checkpoint/loss-log directory")

    p = sub.add_parser("score", help="score a labeled test set")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--dataset", help="dataset root (default: config dataset.root)")
    p.add_argument("--out", required=True, help="scores CSV path")

    p = sub.add_parser("eval", help="print frame-level AUROC for a scores file")
    common(p)
    p.add_argument("--scores", required=True, help="scores CSV path")

    p = sub.add_parser("plot", help="write per-video anomaly score curves")
    common(p)
    p.add_argument("--scores", required=True, help="scores CSV path")
    p.add_argument("--out", required=True, help="output directory for images")
    return parser


def _apply_workers(workers: int | None):
    if workers is None:
        return
    if workers < 1:
        raise ConfigError(f"--workers must be positive, got {workers}")
    import cv2
    import torch

    torch.set_num_threads(workers)
    cv2.setNumThreads(workers)


def _dispatch(args) -> int:
    overrides = list(args.override)
    if args.command == "extract":
        if args.boxes is not None:
            value = "null" if args.boxes == "none" else args.boxes
            overrides.append(f"extraction.boxes_file={value}")
        if args.half_window is not None:
            overrides.append(f"extraction.half_window={args.half_window}")
    cfg = load_config(args.config, overrides)
    _apply_workers(args.workers)

    if args.command == "synth":
        cmd_synth(cfg, args.out)
    elif args.command == "extract":
        cmd_extract(cfg, args.dataset or cfg.dataset.root, args.out,
                    dump_relations=args.dump_relations)
    elif args.command == "train":
        cmd_train(cfg, args.stcs, args.out)
    elif args.command == "score":
        cmd_score(cfg, args.ckpt, args.dataset or cfg.dataset.root, args.out)
    elif args.command == "eval":
        cmd_eval(args.scores)
    elif args.command == "plot":
        cmd_plot(args.scores, args.out)
    else:  # unreachable: argparse enforces the command set
        raise ConfigError(f"unknown command {args.command!r}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error {exc.code}: {exc}", file=sys.stderr)
        return 2
    except PstrpError as exc:
        print(f"error {exc.code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
