"""Command-line interface.

Subcommands: synth, train, eval, predict, ablate, stats. A YAML config file
drives every run; unknown keys are rejected and relative paths inside the
config resolve against the config file's directory. Every output file
embeds the effective config and the toolkit version (CSV as leading '#'
comment lines, JSON as fields, PNG as text chunks).

Exit codes: 0 success, 2 config error, 3 IO error, 4 checkpoint error,
5 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from . import __version__
from . import network as N
from .data import (
    SynthParams,
    generate_synthetic,
    load_directory,
    prepare_samples,
    write_dataset,
)
from .losses import LossConfig
from .metrics import (
    aggregate,
    binarize,
    dsc as dsc_of,
    ecdf,
    report_rows,
    report_to_json,
    wilcoxon_signed_rank,
)
from .network import CheckpointError
from .training import (
    Schedule,
    TrainConfig,
    evaluate_model,
    predict_probabilities,
    run_ablation,
    train,
)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

_SYNTH_KEYS = {"count", "canvas", "area_ratio", "shape", "texture_amplitude",
               "contrast_gap"}
_DATA_KEYS = {"root", "synth", "size", "crop_threshold", "crop"}
_MODEL_KEYS = {"encoder_unit", "decoder_unit", "upsampler", "base_width",
               "reduction_ratio", "unit_batch_norm"}
_TRAIN_KEYS = {"batch_size", "epoch_spans", "learning_rates", "ce_weight",
               "dice_smoothing", "dice_per_image", "checkpoint_every", "init_from"}
_EVAL_KEYS = {"threshold", "axes"}
_TOP_KEYS = {"seed", "deterministic", "model", "data", "train", "eval"}


def _reject_unknown(section, mapping, allowed):
    if not isinstance(mapping, dict):
        raise ConfigError(f"config section {section!r} must be a mapping")
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key {section}.{unknown[0]!r} "
                          f"(allowed: {sorted(allowed)})")


class RunConfig:
    """Validated run configuration with resolved paths."""

    def __init__(self, doc, base_dir: Path):
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
        _reject_unknown("<root>", doc, _TOP_KEYS)
        self.base_dir = base_dir
        self.seed = int(doc.get("seed", 0))
        self.deterministic = bool(doc.get("deterministic", True))
        model = doc.get("model", {}) or {}
        _reject_unknown("model", model, _MODEL_KEYS)
        data = doc.get("data", {}) or {}
        _reject_unknown("data", data, _DATA_KEYS)
        train_sec = doc.get("train", {}) or {}
        _reject_unknown("train", train_sec, _TRAIN_KEYS)
        eval_sec = doc.get("eval", {}) or {}
        _reject_unknown("eval", eval_sec, _EVAL_KEYS)

        try:
            self.model = N.ModelConfig(
                encoder_unit=model.get("encoder_unit", "res"),
                decoder_unit=model.get("decoder_unit", "basic"),
                upsampler=model.get("upsampler", "au"),
                base_width=int(model.get("base_width", 8)),
                reduction_ratio=int(model.get("reduction_ratio", 16)),
                unit_batch_norm=bool(model.get("unit_batch_norm", False)),
                seed=self.seed + 1,
            )
        except ValueError as e:
            raise ConfigError(f"model: {e}") from e

        self.data_root = None
        self.synth = None
        if "root" in data and data.get("synth"):
            raise ConfigError("data: give either 'root' or 'synth', not both")
        if "root" in data:
            self.data_root = (base_dir / str(data["root"])).resolve()
        elif data.get("synth"):
            synth = data["synth"]
            _reject_unknown("data.synth", synth, _SYNTH_KEYS)
            try:
                self.synth = SynthParams(
                    canvas_size=int(synth.get("canvas", 64)),
                    area_ratio=tuple(synth.get("area_ratio", (0.01, 0.06))),
                    shape=str(synth.get("shape", "mixed")),
                    texture_amplitude=float(synth.get("texture_amplitude", 0.12)),
                    contrast_gap=float(synth.get("contrast_gap", 0.35)),
                    seed=self.seed,
                )
                self.synth_count = int(synth.get("count", 8))
            except ValueError as e:
                raise ConfigError(f"data.synth: {e}") from e
        self.size = int(data.get("size", 64))
        if self.size % 16 != 0 or self.size < 16:
            raise ConfigError(f"data.size must be a positive multiple of 16, got {self.size}")
        self.crop = bool(data.get("crop", False))
        self.crop_threshold = float(data.get("crop_threshold", 0.05))

        try:
            schedule = Schedule(
                spans=tuple(train_sec.get("epoch_spans", (40, 30, 30, 20))),
                rates=tuple(train_sec.get("learning_rates", (1e-4, 5e-5, 1e-5, 1e-6))))
            loss = LossConfig(
                ce_weight=float(train_sec.get("ce_weight", 1.0)),
                dice_smoothing=float(train_sec.get("dice_smoothing", 1.0)),
                dice_per_image=bool(train_sec.get("dice_per_image", False)))
        except ValueError as e:
            raise ConfigError(f"train: {e}") from e
        init_from = train_sec.get("init_from")
        self.train = TrainConfig(
            batch_size=int(train_sec.get("batch_size", 4)),
            loss=loss,
            schedule=schedule,
            seed=self.seed + 2,
            deterministic=self.deterministic,
            checkpoint_every=int(train_sec.get("checkpoint_every", 0)),
            init_from=str((base_dir / init_from).resolve()) if init_from else None,
            threshold=float(eval_sec.get("threshold", 0.5)),
        )
        self.eval_threshold = float(eval_sec.get("threshold", 0.5))
        if not (0.0 < self.eval_threshold < 1.0):
            raise ConfigError(f"eval.threshold must be in (0, 1), got {self.eval_threshold}")
        self.eval_axes = tuple(eval_sec.get("axes", ("overall",)))
        self.echo = _normalize_echo(doc)

    def load_cases(self):
        if self.data_root is not None:
            return load_directory(self.data_root)
        if self.synth is not None:
            return generate_synthetic(self.synth, self.synth_count)
        raise ConfigError("data: either 'root' or 'synth' is required for this command")

    def load_samples(self):
        return prepare_samples(self.load_cases(), size=self.size,
                               crop_threshold=self.crop_threshold, crop=self.crop)


def _normalize_echo(doc):
    def norm(v):
        if isinstance(v, dict):
            return {k: norm(v[k]) for k in sorted(v)}
        if isinstance(v, (list, tuple)):
            return [norm(x) for x in v]
        return v
    return norm(doc)


def load_config(path, seed_override=None, deterministic_override=False):
    path = Path(path)
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError:
        raise
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if seed_override is not None:
        doc["seed"] = int(seed_override)
    if deterministic_override:
        doc["deterministic"] = True
    return RunConfig(doc, path.parent.resolve())


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _meta_lines(cfg: RunConfig):
    return [f"# auseg {__version__}",
            f"# config {json.dumps(cfg.echo, sort_keys=True)}"]


def _write_csv(path, rows, cfg):
    lines = _meta_lines(cfg) + [",".join(r) if isinstance(r, (list, tuple)) else r
                                for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_json(path, doc, cfg):
    doc = dict(doc)
    doc["version"] = __version__
    doc["config"] = cfg.echo
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _png_info(cfg: RunConfig):
    info = PngInfo()
    info.add_text("auseg:version", __version__)
    info.add_text("auseg:config", json.dumps(cfg.echo, sort_keys=True))
    return info


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = load_config(args.config, args.seed, args.deterministic)
    if cfg.synth is None:
        raise ConfigError("synth command needs a data.synth section")
    out = _out_dir(args)
    cases = generate_synthetic(cfg.synth, cfg.synth_count)
    write_dataset(cases, out)
    ratios = [float(c.mask.mean()) for c in cases]
    _write_json(out / "manifest.json", {
        "cases": [c.image_id for c in cases],
        "area_ratios": ratios,
    }, cfg)
    print(f"wrote {len(cases)} cases to {out}")
    print(f"area ratio: min {min(ratios):.4f} mean {float(np.mean(ratios)):.4f} "
          f"max {max(ratios):.4f}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, args.seed, args.deterministic)
    out = _out_dir(args)
    samples = cfg.load_samples()
    model = N.build(cfg.model)
    result = train(model, samples, cfg.train)
    N.save_model(model, out / "model.ckpt")
    _write_csv(out / "history.csv", result.history_rows(), cfg)
    if result.aborted:
        print(f"training aborted: {result.abort_reason}", file=sys.stderr)
        print(f"last good checkpoint kept at {out / 'model.ckpt'}")
        return 5
    final = result.history[-1]
    print(f"trained {model.name} for {len(result.history)} epochs; "
          f"final loss {final.train_loss:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config, args.seed, args.deterministic)
    out = _out_dir(args)
    samples = cfg.load_samples()
    if args.pred_dir:
        records = _records_from_pred_dir(Path(args.pred_dir), samples, cfg)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --pred-dir")
        model = N.load_model(args.checkpoint, expected_config=cfg.model)
        records = evaluate_model(model, samples, threshold=cfg.eval_threshold,
                                 batch_size=cfg.train.batch_size)
    report = aggregate([records], axes=cfg.eval_axes)
    _write_csv(out / "metrics.csv", report_rows(report), cfg)
    _write_json(out / "report.json", report_to_json(report), cfg)
    dsc_curve = ecdf([r.dsc for r in records])
    _write_csv(out / "dsc_ecdf.csv", [["value", "fraction"]] +
               [[repr(v), repr(f)] for v, f in dsc_curve], cfg)
    overall = report.aggregates["overall"]["all"]
    print(f"evaluated {len(records)} images")
    for m in ("dsc", "sen", "delta_a", "hau"):
        print(f"  {m}: {overall[m].mean:.4f} +- {overall[m].sd:.4f}")
    return 0


def _records_from_pred_dir(pred_dir, samples, cfg):
    from .metrics import evaluate_masks
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"{pred_dir}: prediction directory missing")
    records = []
    for s in samples:
        p = pred_dir / f"{s.image_id}.png"
        if not p.exists():
            raise FileNotFoundError(f"{p}: no prediction for case {s.image_id!r}")
        pred = np.asarray(Image.open(p)) != 0
        if pred.shape != s.mask.shape:
            raise ConfigError(
                f"prediction {p} has shape {pred.shape}, expected {s.mask.shape}")
        records.append(evaluate_masks(pred, s.mask, s.image_id, tags=s.metadata))
    return records


def _contour(mask):
    m = mask.astype(bool)
    inner = np.ones_like(m)
    inner[1:, :] &= m[:-1, :]
    inner[:-1, :] &= m[1:, :]
    inner[:, 1:] &= m[:, :-1]
    inner[:, :-1] &= m[:, 1:]
    return m & ~inner


def cmd_predict(args):
    cfg = load_config(args.config, args.seed, args.deterministic)
    out = _out_dir(args)
    samples = [s for s in cfg.load_samples() if s.image_id == args.image]
    if not samples:
        raise ConfigError(f"case {args.image!r} not found in the configured dataset")
    sample = samples[0]
    model = N.load_model(args.checkpoint, expected_config=cfg.model)
    prob = predict_probabilities(model, [sample])[0]
    pred = binarize(prob, cfg.eval_threshold)
    info = _png_info(cfg)
    Image.fromarray(pred.astype(np.uint8) * 255).save(
        out / f"{sample.image_id}_mask.png", pnginfo=info)

    base = (np.clip(sample.image[0], 0, 1) * 255).astype(np.uint8)
    rgb = np.stack([base] * 3, axis=-1)
    rgb[_contour(sample.mask)] = (255, 255, 255)
    rgb[_contour(pred)] = (0, 255, 0)
    img = Image.fromarray(rgb)
    score = dsc_of(pred, sample.mask)
    draw = ImageDraw.Draw(img)
    text = f"DSC {score:.2f}"
    tw = draw.textlength(text)
    draw.text((img.width - tw - 4, img.height - 14), text, fill=(255, 64, 64))
    img.save(out / f"{sample.image_id}_overlay.png", pnginfo=_png_info(cfg))
    print(f"case {sample.image_id}: DSC {score:.4f}")
    print(f"wrote {out / f'{sample.image_id}_mask.png'}")
    return 0


def cmd_ablate(args):
    cfg = load_config(args.config, args.seed, args.deterministic)
    out = _out_dir(args)
    samples = cfg.load_samples()
    grids = [args.grid] if args.grid != "all" else ["backbones", "reduction"]
    for grid in grids:
        table = run_ablation(grid, samples, cfg.train, cfg.model,
                             runs=args.runs, jobs=args.jobs)
        _write_csv(out / f"{grid}.csv", table.to_csv_lines(), cfg)
        _write_json(out / f"{grid}.json", table.to_json(), cfg)
        failed = [r.label for r in table.rows if r.status != "ok"]
        print(f"{grid}: {len(table.rows)} rows "
              f"({len(failed)} failed{': ' + ', '.join(failed) if failed else ''})")
    return 0


def cmd_stats(args):
    doc_a = json.loads(Path(args.report_a).read_text())
    doc_b = json.loads(Path(args.report_b).read_text())
    recs_a = {r["image_id"]: r for run in doc_a["runs"] for r in run}
    recs_b = {r["image_id"]: r for run in doc_b["runs"] for r in run}
    common = sorted(set(recs_a) & set(recs_b))
    if not common:
        raise ConfigError("reports share no image ids")
    if len(recs_a) != len(common) or len(recs_b) != len(common):
        print(f"note: comparing the {len(common)} common images only", file=sys.stderr)
    a = [float(recs_a[i][args.metric]) for i in common]
    b = [float(recs_b[i][args.metric]) for i in common]
    res = wilcoxon_signed_rank(a, b)
    significant = "yes" if res.p_value < 0.05 else "no"
    print(f"metric: {args.metric} over {len(common)} paired images "
          f"({res.n_effective} non-zero differences, {res.method})")
    print(f"W = {res.statistic:g}")
    print(f"p = {res.p_value:.6g}")
    print(f"significant at 0.05: {significant}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="auseg",
        description="attention-guided dense-upsampling segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"auseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for independent ablation cells")
        p.add_argument("--deterministic", action="store_true",
                       help="force deterministic mode regardless of the config")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or stored predictions)")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint to evaluate")
    p.add_argument("--pred-dir", help="directory of predicted masks <id>.png "
                                      "to score instead of a checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one case and render an overlay")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="case id inside the configured dataset")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="run an ablation table")
    common(p)
    p.add_argument("--grid", choices=["backbones", "reduction", "all"],
                   default="all")
    p.add_argument("--runs", type=int, default=3, help="repeat runs per cell")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", help="paired Wilcoxon test between two eval reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--metric", default="dsc",
                   choices=["dsc", "sen", "delta_a", "hau"])
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 4
    except (OSError, FileNotFoundError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
