"""Command-line entry point: ``vcaseg <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines
(``#`` comments allowed); explicit flags override file values.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_weights, read_checkpoint
from .data import (
    PackedDataset,
    SplitSpec,
    load_packed,
    pack_dataset,
    preprocess_volume,
    read_manifest,
    read_nifti,
    split,
    synth_generate,
)
from .data.nifti import Volume
from .errors import DataError, FormatError, NumericAbort, ShapeError, VcaError
from .losses import LossConfig
from .metrics import AGG_MODES, aggregate, evaluate_pair
from .model import ModelConfig, build, predict_mask
from .report import (
    MODE_LABELS,
    OverlaySpec,
    read_mask_png,
    render_overlay,
    write_mask_png,
    write_rows_csv,
    write_summary_csv,
)
from .trainer import TrainConfig, evaluate, train, write_manifest

log = logging.getLogger("vcaseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# Defaults live here rather than in argparse so that "flag given" can be told
# apart from "flag omitted" when merging with a config file.
DEFAULTS = {
    "synth": {"n": 64, "lesion_prob": 0.5, "seed": 0, "slices_per_volume": 8, "out": None},
    "preprocess": {"manifest": None, "out": None, "p_lo": 0.0, "p_hi": 99.0},
    "train": {
        "data": None, "val_split": 0.1, "split_level": "slice", "epochs": 50, "batch": 8, "lr": 0.001,
        "momentum": 0.9, "weight_decay": 1e-8, "seed": 0, "include_empty_slices": False, "out": None,
        # config-file only
        "c1": 64, "c2": 128, "c4": 256, "t": 256, "decoder": "256,128,64,32", "upsample_kind": "nearest",
        "leaky_slope": 0.01, "alpha": 0.25, "gamma": 2.0, "patience": 10, "resume": None,
    },
    "eval": {"weights": None, "data": None, "agg": "both", "threshold": 0.5, "out": None},
    "predict": {"weights": None, "input": None, "threshold": 0.5, "out": None},
    "metrics": {"pred": None, "truth": None, "agg": "both", "out": None},
    "report": {"weights": None, "data": None, "threshold": 0.5, "agg": "both", "out": None, "max_overlays": 20},
    "inspect": {"path": None},
}
REQUIRED = {
    "synth": ["out"], "preprocess": ["manifest", "out"], "train": ["data", "out"], "eval": ["weights", "data"],
    "predict": ["weights", "input", "out"], "metrics": ["pred", "truth"], "report": ["weights", "data", "out"],
    "inspect": ["path"],
}


def _build_parser():
    p = _Parser(prog="vcaseg", description="Stroke-lesion slice segmentation toolkit.")
    p.add_argument("--version", action="version", version=f"vcaseg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    S = argparse.SUPPRESS

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=S)
        sp.add_argument("--config", default=None, help="flat key = value file; flags override it")
        return sp

    sp = cmd("synth", "generate a synthetic packed dataset")
    sp.add_argument("--n", type=int)
    sp.add_argument("--lesion-prob", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--slices-per-volume", type=int)
    sp.add_argument("--out", help="packed dataset file to write")

    sp = cmd("preprocess", "NIfTI image/mask pairs -> packed 224x192 slices")
    sp.add_argument("--manifest", help="tab-separated image/mask path pairs")
    sp.add_argument("--out")
    sp.add_argument("--p-lo", type=float)
    sp.add_argument("--p-hi", type=float)

    sp = cmd("train", "train a network with momentum SGD")
    sp.add_argument("--data")
    sp.add_argument("--val-split", type=float)
    sp.add_argument("--split-level", choices=["slice", "volume"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--momentum", type=float)
    sp.add_argument("--weight-decay", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--include-empty-slices", action="store_true")
    sp.add_argument("--out")

    sp = cmd("eval", "evaluate weights on a packed dataset")
    sp.add_argument("--weights")
    sp.add_argument("--data")
    sp.add_argument("--agg", choices=["modeA", "modeB", "both"])
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out", help="directory for rows.csv and summary.csv")

    sp = cmd("predict", "predict masks for a NIfTI volume or packed file")
    sp.add_argument("--weights")
    sp.add_argument("--input")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out")

    sp = cmd("metrics", "compare predicted and reference masks (PNG or packed)")
    sp.add_argument("--pred")
    sp.add_argument("--truth")
    sp.add_argument("--agg", choices=["modeA", "modeB", "both"])
    sp.add_argument("--out", help="CSV file for per-slice rows")

    sp = cmd("report", "evaluation CSVs plus TP/FP/FN overlay PNGs")
    sp.add_argument("--weights")
    sp.add_argument("--data")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--agg", choices=["modeA", "modeB", "both"])
    sp.add_argument("--max-overlays", type=int)
    sp.add_argument("--out")

    sp = cmd("inspect", "describe a weight file or packed dataset")
    sp.add_argument("--path")
    return p


def read_config_file(path):
    items = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            items[k.replace("-", "_")] = v
    return items


def _coerce(default, value):
    if isinstance(value, str) and default is not None and not isinstance(default, str):
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes", "on")
        return type(default)(value)
    return value


def resolve(command, ns):
    """Merge defaults < config file < flags; unknown config keys are usage errors."""
    defaults = DEFAULTS[command]
    opts = dict(defaults)
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        try:
            file_items = read_config_file(cfg_path)
        except OSError as exc:
            raise UsageError(f"cannot read config file {cfg_path}: {exc.strerror}") from exc
        unknown = sorted(set(file_items) - set(defaults))
        if unknown:
            raise UsageError(f"unknown key(s) in {cfg_path}: {', '.join(unknown)}")
        for k, v in file_items.items():
            try:
                opts[k] = _coerce(defaults[k], v)
            except ValueError as exc:
                raise UsageError(f"{cfg_path}: bad value for {k}: {v!r}") from exc
    for k, v in vars(ns).items():
        if k in defaults:
            opts[k] = v
    missing = [k for k in REQUIRED[command] if opts.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    opts["config"] = cfg_path
    return opts


def _agg_modes(label):
    if label == "both":
        return list(AGG_MODES)
    return [m for m, lab in MODE_LABELS.items() if lab == label]


def _print_summary(summaries, out):
    for mode, s in summaries.items():
        parts = [f"{k}={'NA' if v is None else f'{v:.6f}'}" for k, v in s.means.items()]
        print(f"[{MODE_LABELS[mode]}] " + " ".join(parts), file=out)


# --------------------------------------------------------------------------
# subcommands


def _manifest_items(opts):
    return {k: ("" if v is None else v) for k, v in opts.items()}


def cmd_synth(o, out):
    spv = max(1, o["slices_per_volume"])
    samples = synth_generate(o["n"], o["lesion_prob"], o["seed"])
    for s in samples:
        s.volume_id = f"synth{s.slice_index // spv:04d}"
    n = pack_dataset(samples, o["out"])
    write_manifest(str(o["out"]) + ".manifest.txt", [("synth", _manifest_items(o))])
    print(f"wrote {n} slices to {o['out']}", file=out)


def cmd_preprocess(o, out):
    pairs = read_manifest(o["manifest"])
    base = Path(o["manifest"]).parent

    def gen():
        for img_path, mask_path in pairs:
            ip, mp = base / img_path, base / mask_path
            img, mask = read_nifti(ip, "image"), read_nifti(mp, "mask")
            vid = ip.name.split(".")[0]
            yield from preprocess_volume(img, mask, vid, p_lo=o["p_lo"], p_hi=o["p_hi"])

    n = pack_dataset(gen(), o["out"])
    write_manifest(str(o["out"]) + ".manifest.txt", [("preprocess", _manifest_items(o))])
    print(f"wrote {n} slices from {len(pairs)} volume(s) to {o['out']}", file=out)


def cmd_train(o, out):
    samples = load_packed(o["data"])
    train_set, val_set = split(samples, SplitSpec(o["val_split"], o["split_level"], o["seed"]))
    model_cfg = ModelConfig(
        c1=o["c1"], c2=o["c2"], c4=o["c4"], t=o["t"],
        decoder=tuple(int(v) for v in str(o["decoder"]).split(",")),
        upsample_kind=o["upsample_kind"], leaky_slope=o["leaky_slope"], seed=o["seed"],
    )
    cfg = TrainConfig(
        lr=o["lr"], momentum=o["momentum"], weight_decay=o["weight_decay"], batch_size=o["batch"],
        epochs=o["epochs"], seed=o["seed"], loss=LossConfig(alpha=o["alpha"], gamma=o["gamma"]),
        include_empty_slices=o["include_empty_slices"], patience=o["patience"] if o["patience"] > 0 else None,
    )
    net = build(model_cfg)
    Path(o["out"]).mkdir(parents=True, exist_ok=True)
    write_manifest(Path(o["out"]) / "cli_manifest.txt", [("train", _manifest_items(o))])
    hist = train(net, train_set, val_set, cfg, o["out"], resume_from=o["resume"])
    for r in hist.records:
        print(f"epoch {r.epoch}: loss={r.loss.total:.6f} val_soft_dice="
              f"{'NA' if r.val_soft_dice is None else f'{r.val_soft_dice:.6f}'}", file=out)


def _eval_outputs(o, out, write_overlays=False):
    net = load_weights(o["weights"])
    data = load_packed(o["data"])
    res = evaluate(net, data, o["threshold"], keep_probs=write_overlays)
    summaries = {m: res.summaries[m] for m in _agg_modes(o["agg"])}
    _print_summary(summaries, out)
    if o["out"]:
        d = Path(o["out"])
        d.mkdir(parents=True, exist_ok=True)
        write_rows_csv(res.rows, d / "rows.csv")
        write_summary_csv(summaries, d / "summary.csv")
        write_manifest(d / "manifest.txt", [(o["command"], _manifest_items(o))])
        if write_overlays:
            (d / "overlays").mkdir(exist_ok=True)
            for s, prob in list(zip(data, res.probs))[: o["max_overlays"]]:
                render_overlay(OverlaySpec(s.image, predict_mask(prob, o["threshold"]), s.mask,
                                           str(d / "overlays" / f"{s.volume_id}_{s.slice_index:04d}.png")))
    return res


def cmd_eval(o, out):
    _eval_outputs(o, out)


def cmd_report(o, out):
    _eval_outputs(o, out, write_overlays=True)


def cmd_predict(o, out):
    net = load_weights(o["weights"])
    src = Path(o["input"])
    if src.name.endswith((".nii", ".nii.gz")):
        img = read_nifti(src, "image")
        blank = Volume(np.zeros_like(img.voxels), img.header, "", "mask")
        samples = preprocess_volume(img, blank, src.name.split(".")[0])
    else:
        samples = load_packed(src)
    d = Path(o["out"])
    (d / "masks").mkdir(parents=True, exist_ok=True)
    preds = []
    for start in range(0, len(samples), 8):
        chunk = samples[start : start + 8]
        x = np.stack([s.image for s in chunk])[:, None]
        prob, _ = net.forward(x, training=False)
        for k, s in enumerate(chunk):
            m = predict_mask(prob[k, 0], o["threshold"])
            preds.append(type(s)(s.image, m, s.volume_id, s.slice_index))
            write_mask_png(m, d / "masks" / f"{s.volume_id}_{s.slice_index:04d}.png")
    pack_dataset(preds, d / "predictions.vcad")
    write_manifest(d / "manifest.txt", [("predict", _manifest_items(o))])
    print(f"predicted {len(preds)} slices into {d}", file=out)


def _load_masks(path):
    p = Path(path)
    if p.suffix.lower() == ".png":
        return [(p.stem, 0, read_mask_png(p))]
    return [(s.volume_id, s.slice_index, s.mask) for s in load_packed(p)]


def cmd_metrics(o, out):
    preds, truths = _load_masks(o["pred"]), _load_masks(o["truth"])
    if len(preds) != len(truths):
        raise DataError(f"{o['pred']} has {len(preds)} masks but {o['truth']} has {len(truths)}")
    rows = [evaluate_pair(pm, tm, vid, idx) for (_, _, pm), (vid, idx, tm) in zip(preds, truths)]
    if len(rows) == 1:
        r = rows[0]
        print(" ".join(f"{k}={'NA' if getattr(r, k) is None else f'{getattr(r, k):.6f}'}"
                       for k in ("dsc", "iou", "hd", "sensitivity", "precision", "f1")), file=out)
    else:
        _print_summary({m: aggregate(rows, m) for m in _agg_modes(o["agg"])}, out)
    if o["out"]:
        write_rows_csv(rows, o["out"])


def cmd_inspect(o, out):
    p = Path(o["path"])
    with open(p, "rb") as fh:
        magic = fh.read(4)
    if magic == b"VCAW":
        items, arrays = read_checkpoint(p)
        print(f"weight file {p}", file=out)
        for k, v in items.items():
            print(f"  {k} = {v}", file=out)
        n = sum(a.size for k, a in arrays.items() if not k.startswith("sgd.") and not k.endswith(("running_mean", "running_var")))
        print(f"  entries: {len(arrays)}  trainable values: {n}", file=out)
    else:
        ds = PackedDataset(p)
        vols = sorted({v for v, _ in ds.ids()})
        print(f"packed dataset {p}: {len(ds)} slices from {len(vols)} volume(s)", file=out)


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
    "predict": cmd_predict, "metrics": cmd_metrics, "report": cmd_report, "inspect": cmd_inspect,
}


def run(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING)
        opts = resolve(ns.command, ns)
        opts["command"] = ns.command
        COMMANDS[ns.command](opts, out)
        return EXIT_OK
    except UsageError as exc:
        print(str(exc).rstrip(), file=err)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"error: {exc}\n{exc.diagnostic}", file=err)
        return EXIT_NUMERIC
    except (DataError, FormatError, ShapeError, VcaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
