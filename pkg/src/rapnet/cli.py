"""Command-line entry point: ``rapnet {synth,train,eval,predict,plot}``.

Exit codes: 0 success, 2 usage error, 3 data/validation error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text, git_blob_hash
from .errors import DataError, NumericError, RapNetError

log = logging.getLogger("rapnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# Piecewise reflectivity colour table: (lower dBZ edge, RGB hex) per bin, top edge 85 dBZ.
DBZ_COLOR_TABLE = [
    (-10, "#ffffff"),
    (5, "#04e9e7"),
    (10, "#019ff4"),
    (15, "#0300f4"),
    (20, "#02fd02"),
    (25, "#01c501"),
    (30, "#008e00"),
    (35, "#fdf802"),
    (40, "#e5bc00"),
    (45, "#fd9500"),
    (50, "#fd0000"),
    (55, "#d40000"),
    (60, "#bc0000"),
    (65, "#f800fd"),
    (70, "#9854c6"),
]
DBZ_MAX = 85


def _parse_size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 32x32, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rapnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic moving-echo dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", required=True, type=_positive_int)
    p.add_argument("--frames", type=_positive_int, default=15)
    p.add_argument("--size", type=_parse_size, default=(32, 32))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on an RSEQ dataset")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--ablation", choices=["x", "h", "cell", "full"])

    p = sub.add_parser("eval", help="score forecasts against the last frames of each sequence")
    p.add_argument("--data", required=True, type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path)
    src.add_argument("--baseline", choices=["persistence", "identity"])
    p.add_argument("--t-in", type=_positive_int, default=5, help="observed frames for baselines")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--csv", type=Path, help="optional per-sequence score table")
    p.add_argument("--thresholds", type=float, nargs="+", default=[5.0, 20.0, 40.0])

    p = sub.add_parser("predict", help="forecast from the observed frames of each sequence")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("plot", help="render truth and forecast frames as PNG images")
    p.add_argument("--truth", required=True, type=Path)
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    return parser


def _manifest(path: Path, args, argv, **extra) -> None:
    from .data import write_manifest

    snapshot = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    write_manifest(path, command=args.command, argv=list(argv), args=snapshot, **extra)


def _file_hash(path: Path) -> str:
    return git_blob_hash(Path(path).read_bytes())


def cmd_synth(args, argv) -> None:
    from .data import SynthParams, generate_synthetic, write_rseq

    h, w = args.size
    seqs = generate_synthetic(args.n, args.frames, h, w, args.seed)
    write_rseq(args.out, seqs)
    _manifest(
        args.out.with_name(args.out.name + ".manifest.json"),
        args,
        argv,
        seed=args.seed,
        config=SynthParams(),
        outputs={str(args.out): _file_hash(args.out)},
    )


def load_run_config(path: Path, ablation=None):
    """Parse a run config JSON with optional ``model``, ``train`` and ``split`` sections."""
    from .cell import AblationFlags
    from .model import ModelConfig
    from .trainer import TrainConfig

    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}")
    unknown = set(raw) - {"model", "train", "split"}
    if unknown:
        raise DataError(f"unknown config sections: {sorted(unknown)}")
    model_raw = dict(raw.get("model", {}))
    if ablation is not None:
        model_raw["flags"] = AblationFlags.from_variant(ablation)
    try:
        model_cfg = ModelConfig.from_dict(model_raw)
        train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    except TypeError as exc:
        raise DataError(f"invalid config field: {exc}")
    split = {"n_val": 0.1, "seed": train_cfg.seed, **raw.get("split", {})}
    return model_cfg, train_cfg, split


def cmd_train(args, argv) -> None:
    from .data import read_rseq, split_dataset
    from .model import save_checkpoint
    from .trainer import train

    model_cfg, train_cfg, split_cfg = load_run_config(args.config, args.ablation)
    seqs = read_rseq(args.data)
    n_val = split_cfg["n_val"]
    if isinstance(n_val, float):
        n_val = max(1, int(round(n_val * len(seqs)))) if len(seqs) > 1 else 0
    split = split_dataset(len(seqs), n_val, split_cfg["seed"])

    args.out.mkdir(parents=True, exist_ok=True)
    log_path = args.out / "train_log.jsonl"
    lines = []

    def on_record(record):
        lines.append(json.dumps(record, sort_keys=True))
        atomic_write_text(log_path, "".join(line + "\n" for line in lines))

    atomic_write_text(log_path, "")
    result = train(model_cfg, train_cfg, seqs, split, on_record=on_record)
    ckpt = args.out / "checkpoint.rapnet"
    save_checkpoint(ckpt, result.model, result.meta(train_cfg))
    _manifest(
        args.out / "manifest.json",
        args,
        argv,
        seed=train_cfg.seed,
        config={"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "split": split_cfg},
        checkpoint_hash=_file_hash(ckpt),
        outputs={str(ckpt): _file_hash(ckpt)},
    )


def forecast(model, sequences, batch_size: int = 8) -> np.ndarray:
    """uint8 forecasts ``[S, t_total - t_in, H, W]`` from the first ``t_in`` frames."""
    import torch

    from .data import denormalize, normalize

    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    model.eval()
    out = []
    for start in range(0, len(sequences), batch_size):
        obs = torch.from_numpy(normalize(sequences[start : start + batch_size, : cfg.t_in]))
        pred = model.predict(obs.to(dtype).unsqueeze(2))
        out.append(denormalize(pred[:, :, 0].cpu().numpy()))
    return np.concatenate(out) if out else np.zeros((0, cfg.n_forecast, cfg.height, cfg.width), np.uint8)


def _check_dims(model, seqs, min_frames) -> None:
    cfg = model.cfg
    if seqs.shape[2:] != (cfg.height, cfg.width):
        raise DataError(f"data frames are {seqs.shape[2:]}, checkpoint expects {(cfg.height, cfg.width)}")
    if seqs.shape[1] < min_frames:
        raise DataError(f"data has {seqs.shape[1]} frames per sequence, need {min_frames}")


def cmd_eval(args, argv) -> None:
    from .data import read_rseq
    from .metrics import evaluate, report_fields
    from .model import load_checkpoint

    seqs = read_rseq(args.data)
    if len(seqs) == 0:
        raise DataError("dataset is empty")
    extra = {}
    if args.ckpt is not None:
        model, _ = load_checkpoint(args.ckpt)
        _check_dims(model, seqs, model.cfg.t_total)
        t_in, t_total = model.cfg.t_in, model.cfg.t_total
        preds = forecast(model, seqs)
        extra["checkpoint_hash"] = _file_hash(args.ckpt)
    else:
        t_in, t_total = args.t_in, seqs.shape[1]
        if not 1 <= t_in < t_total:
            raise DataError(f"--t-in {t_in} leaves no frames to forecast")
        if args.baseline == "identity":
            preds = seqs[:, t_in:t_total]
        else:
            preds = np.repeat(seqs[:, t_in - 1 : t_in], t_total - t_in, axis=1)
    truths = seqs[:, t_in:t_total]
    report = evaluate(preds, truths, args.thresholds)
    atomic_write_text(args.out, report.to_json())
    outputs = {str(args.out): _file_hash(args.out)}
    if args.csv is not None:
        buf = io.StringIO()
        names = report_fields(args.thresholds)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sequence"] + names)
        for i in range(len(seqs)):
            row = evaluate(preds[i], truths[i], args.thresholds).to_dict()
            writer.writerow([i] + ["" if row[k] is None else repr(row[k]) for k in names])
        atomic_write_text(args.csv, buf.getvalue())
        outputs[str(args.csv)] = _file_hash(args.csv)
    _manifest(args.out.with_name(args.out.name + ".manifest.json"), args, argv, outputs=outputs, **extra)


def cmd_predict(args, argv) -> None:
    from .data import read_rseq, write_rseq
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    seqs = read_rseq(args.input)
    _check_dims(model, seqs, model.cfg.t_in)
    preds = forecast(model, seqs)
    write_rseq(args.out, preds)
    _manifest(
        args.out.with_name(args.out.name + ".manifest.json"),
        args,
        argv,
        checkpoint_hash=_file_hash(args.ckpt),
        outputs={str(args.out): _file_hash(args.out)},
    )


def dbz_colormap():
    from matplotlib.colors import BoundaryNorm, ListedColormap

    edges = [lo for lo, _ in DBZ_COLOR_TABLE] + [DBZ_MAX]
    cmap = ListedColormap([c for _, c in DBZ_COLOR_TABLE], name="dbz")
    return cmap, BoundaryNorm(edges, cmap.N)


def cmd_plot(args, argv) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data import read_rseq
    from .metrics import pixel_to_dbz

    truth = read_rseq(args.truth)
    pred = read_rseq(args.pred)
    if len(truth) != len(pred) or truth.shape[2:] != pred.shape[2:]:
        raise DataError(f"truth {truth.shape} and forecast {pred.shape} do not align")
    if truth.shape[1] < pred.shape[1]:
        raise DataError("truth has fewer frames than the forecast")
    truth = truth[:, truth.shape[1] - pred.shape[1] :]
    cmap, norm = dbz_colormap()
    args.out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for s in range(len(pred)):
        for t in range(pred.shape[1]):
            fig, axes = plt.subplots(1, 2, figsize=(6.4, 3.2), constrained_layout=True)
            for ax, frame, title in ((axes[0], truth[s, t], "observed"), (axes[1], pred[s, t], "forecast")):
                im = ax.imshow(pixel_to_dbz(frame), cmap=cmap, norm=norm, interpolation="nearest")
                ax.set_title(f"{title}  +{t + 1}")
                ax.set_xticks([])
                ax.set_yticks([])
            fig.colorbar(im, ax=axes, label="dBZ", shrink=0.85)
            buf = io.BytesIO()
            fig.savefig(buf, format="png", dpi=80)
            plt.close(fig)
            path = args.out / f"seq{s:04d}_t{t + 1:02d}.png"
            atomic_write_bytes(path, buf.getvalue())
            outputs[str(path)] = git_blob_hash(buf.getvalue())
    _manifest(args.out / "manifest.json", args, argv, outputs=outputs)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("RAPNET_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    try:
        COMMANDS[args.command](args, argv)
    except NumericError as exc:
        print(f"rapnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, RapNetError, OSError) as exc:
        print(f"rapnet: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
