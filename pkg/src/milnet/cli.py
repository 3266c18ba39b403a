"""``milnet`` command line: synth, features, train, eval, grid.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Options may also come from a flat ``key = value`` TOML file given with
``--config``; explicit flags win over file values, file values win over
built-in defaults.  ``MILNET_SEED`` replaces the built-in default seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from milnet import data, features as feat, losses, metrics, training
from milnet.tensor import NonFiniteError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("milnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

INDEX = "index.json"
CONFIG_ECHO = "config.toml"
METRICS = "metrics.json"
CLIP_FRAMES = feat.n_frames(int(round(data.MAX_DURATION_S * feat.SAMPLE_RATE)))

# (training method, input type, regime, when_input, who_input, weights)
GRID_ROWS = [
    ("Separate", "HnH | nonHnH", "separate", "hnh", "plain", (0.5, 5.0)),
    ("Joint [WHEN: 0.5; WHO: 0.5]", "HnH", "joint", "hnh", "hnh", (0.5, 0.5)),
    ("Joint [WHEN: 0.5; WHO: 0.5]", "nonHnH", "joint", "plain", "plain", (0.5, 0.5)),
    ("Joint [WHEN: 0.5; WHO: 5.0]", "HnH", "joint", "hnh", "hnh", (0.5, 5.0)),
    ("Joint [WHEN: 0.5; WHO: 5.0]", "nonHnH", "joint", "plain", "plain", (0.5, 5.0)),
    ("Tied Weights", "HnH | nonHnH", "tied", "hnh", "plain", (0.5, 5.0)),
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- option handling ---------------------------------------------------------


def default_seed():
    raw = os.environ.get("MILNET_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MILNET_SEED must be an integer, got {raw!r}") from None


def _train_defaults():
    plan = training.TrainPlan()
    return {"regime": plan.regime, "when_loss": plan.when_loss,
            "when_input": None, "who_input": None,
            "weights": list(plan.loss_weights), "epochs": plan.epochs,
            "seed": default_seed(), "lr": plan.initial_lr,
            "lr_period": plan.lr_halving_period, "lr_floor": plan.lr_floor,
            "batch_size": plan.batch_size, "fmaps": plan.fmaps,
            "gru_units": plan.gru_units, "dense_units": plan.dense_units,
            "mean_ratio": plan.mean_ratio, "features": None}


def parse_weights(value):
    if isinstance(value, str):
        parts = [p for p in value.replace(" ", "").split(",") if p]
    else:
        parts = list(value)
    try:
        w = [float(p) for p in parts]
    except (TypeError, ValueError):
        raise UsageError(f"--weights expects 'wWHEN,wWHO', got {value!r}") from None
    if len(w) != 2:
        raise UsageError(f"--weights expects two numbers, got {value!r}")
    return w


def read_config(path):
    """Flat TOML: scalar or array values only; dashes in keys become
    underscores so file keys match the long flag names."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from None
    except tomllib.TOMLDecodeError as err:
        raise UsageError(f"{path}: invalid config ({err})") from None
    out = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            raise UsageError(f"{path}: nested table [{key}] not supported (flat keys only)")
        out[key.replace("-", "_")] = value
    return out


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def write_config(path, cfg):
    lines = [f"{k} = {_toml_value(v)}" for k, v in sorted(cfg.items()) if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")


def merge_options(args, defaults, flag_keys):
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        extra = read_config(args.config)
        unknown = sorted(set(extra) - set(defaults))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {unknown}")
        cfg.update(extra)
    for key in flag_keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _plan_from(cfg):
    regime = cfg["regime"]
    when_in, who_in = cfg["when_input"], cfg["who_input"]
    if regime == "joint":
        # one stream feeds both heads: an unset side follows the set one
        when_in = when_in or who_in or "plain"
        who_in = who_in or when_in
        if when_in != who_in:
            raise UsageError("joint training draws one minibatch stream for both heads, so "
                             f"--when-input ({when_in}) and --who-input ({who_in}) must match")
    else:
        when_in, who_in = when_in or "hnh", who_in or "plain"
    try:
        return training.TrainPlan(
            regime=regime, when_input=when_in, who_input=who_in,
            when_loss=cfg["when_loss"], loss_weights=parse_weights(cfg["weights"]),
            epochs=int(cfg["epochs"]), seed=int(cfg["seed"]), initial_lr=float(cfg["lr"]),
            lr_halving_period=int(cfg["lr_period"]), lr_floor=float(cfg["lr_floor"]),
            batch_size=int(cfg["batch_size"]), fmaps=int(cfg["fmaps"]),
            gru_units=int(cfg["gru_units"]), dense_units=int(cfg["dense_units"]),
            mean_ratio=float(cfg["mean_ratio"]))
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from None


# -- features ----------------------------------------------------------------


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _read_index(out_dir):
    p = Path(out_dir) / INDEX
    if not p.is_file():
        return {}
    try:
        return json.loads(p.read_text()).get("entries", {})
    except (ValueError, AttributeError):
        return {}


def extract_cached(wav_paths, out_dir):
    """Extract ``.lmel`` caches for ``wav_paths`` into ``out_dir``.

    A cache is rebuilt only when the WAV content hash differs from the
    one recorded in ``index.json`` or the cache file is missing.
    Returns the list of files written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise data.DataError(f"cannot write to {out}: {err}") from None
    index = _read_index(out)
    new_index, written = {}, []
    for wav in wav_paths:
        wav = Path(wav)
        digest = file_sha256(wav)
        name = wav.stem + ".lmel"
        entry = index.get(wav.name)
        if entry and entry.get("sha256") == digest and (out / name).is_file():
            new_index[wav.name] = entry
            continue
        y, sr = data.read_wav(wav)
        try:
            fm = feat.extract_logmel(y, sr, wav.stem)
        except feat.FeatureError as err:
            raise data.DataError(f"{wav}: {err}") from None
        feat.write_lmel(out / name, fm)
        written.append(out / name)
        new_index[wav.name] = {"sha256": digest, "lmel": name, "frames": fm.frames}
    if new_index != index:
        with open(out / INDEX, "w") as fh:
            json.dump({"entries": new_index}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        written.append(out / INDEX)
    return written


def _cache_extractor(cache_dir):
    cache = Path(cache_dir)
    index = _read_index(cache)

    def fetch(rec):
        entry = index.get(Path(rec.path).name) if rec.path else None
        if entry is None or entry.get("sha256") != file_sha256(rec.path):
            raise data.DataError(f"{rec.path}: no up-to-date feature cache in {cache} "
                                 "(run the features command)")
        return feat.FeatureMatrix(feat.read_lmel(cache / entry["lmel"]), rec.id)
    return fetch


def feature_sets(data_dir, cache_dir=None):
    ds = data.load_dataset(data_dir)
    extractor = _cache_extractor(cache_dir) if cache_dir else None
    build = lambda recs: data.build_feature_set(recs, ds.classes, CLIP_FRAMES, extractor)
    return ds, build(ds.train), build(ds.test) if ds.test else None


# -- commands ----------------------------------------------------------------


def cmd_synth(args):
    try:
        split = data.synth_dataset(args.classes, args.recordings, args.pos_fraction, args.seed,
                                   num_test=args.test_recordings, duration_s=args.duration)
    except ValueError as err:
        raise UsageError(f"synth: {err}") from None
    data.write_dataset(split, args.out)
    print(f"wrote {len(split.recordings)} recordings ({len(split.train)} train, "
          f"{len(split.test)} test) to {args.out}")


def cmd_features(args):
    audio = Path(args.data) / data.AUDIO_DIR
    if not audio.is_dir():
        raise data.DataError(f"{args.data}: no {data.AUDIO_DIR}/ directory")
    wavs = sorted(audio.glob("*.wav"))
    written = extract_cached(wavs, args.out)
    n_lmel = sum(p.suffix == ".lmel" for p in written)
    print(f"{len(wavs)} recordings, {n_lmel} caches written, {len(wavs) - n_lmel} up to date")


TRAIN_KEYS = ["regime", "when_loss", "when_input", "who_input", "weights", "epochs", "seed",
              "lr", "lr_period", "lr_floor", "batch_size", "fmaps", "gru_units",
              "dense_units", "mean_ratio", "features"]


def train_run(cfg, data_dir, out_dir):
    plan = _plan_from(cfg)
    _, train_fs, _ = feature_sets(data_dir, cfg.get("features"))
    if len(train_fs) == 0:
        raise data.DataError(f"{data_dir}: no training recordings")
    result = training.run(plan, train_fs)
    training.save_run(result, out_dir)
    echo = dict(cfg, when_input=plan.when_input, who_input=plan.who_input,
                data=str(data_dir))
    write_config(Path(out_dir) / CONFIG_ECHO, echo)
    return result


def cmd_train(args):
    cfg = merge_options(args, _train_defaults(), TRAIN_KEYS)
    if not args.data:
        raise UsageError("train: --data is required")
    train_run(cfg, args.data, args.out)
    print(f"run written to {args.out}")


def evaluate_run(run_dir, data_dir, cache_dir=None):
    if not Path(run_dir).is_dir():
        raise data.DataError(f"{run_dir}: no such run directory")
    try:
        _, models = training.load_run_models(run_dir)
    except FileNotFoundError as err:
        raise data.DataError(str(err)) from None
    ds, train_fs, test_fs = feature_sets(data_dir, cache_dir)
    fs = test_fs if test_fs is not None else train_fs
    part = "test" if test_fs is not None else "train"
    reports = []
    for task in ("when", "who"):
        if task not in models:
            continue
        rep = (metrics.eval_when if task == "when" else metrics.eval_who)(models[task], fs)
        rep["split"] = part
        reports.append(rep)
    metrics.write_metrics(Path(run_dir) / METRICS, reports)
    return reports


def cmd_eval(args):
    reports = evaluate_run(args.run, args.data, args.features)
    for rep in reports:
        print(f"{rep['task']}: auc_micro {rep['auc_micro']:.4f} ({rep['split']} split)")


def render_grid(rows):
    head = ("Training Method", "Input Type (WHEN | WHO)", "WHEN AUC", "WHO AUC")
    cells = [head] + [(m, i, f"{w:.2f}", f"{o:.2f}") for m, i, w, o in rows]
    widths = [max(len(r[k]) for r in cells) for k in range(4)]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    rule = "-" * len(fmt(head))
    return "\n".join([fmt(head), rule] + [fmt(r) for r in cells[1:]]) + "\n"


def cmd_grid(args):
    defaults = _train_defaults()
    base = merge_options(args, defaults, [k for k in TRAIN_KEYS if k not in
                                          ("regime", "when_input", "who_input", "weights")])
    out = Path(args.out)
    rows = []
    for k, (method, inputs, regime, w_in, o_in, weights) in enumerate(GRID_ROWS, 1):
        cfg = dict(base, regime=regime, when_input=w_in, who_input=o_in, weights=list(weights))
        run_dir = out / f"row{k}_{regime}"
        log.info("grid row %d: %s %s", k, method, inputs)
        train_run(cfg, args.data, run_dir)
        reps = {r["task"]: r["auc_micro"] for r in evaluate_run(run_dir, args.data,
                                                                   cfg.get("features"))}
        rows.append((method, inputs, reps["when"], reps["who"]))
    table = render_grid(rows)
    (out / "grid.txt").write_text(table)
    sys.stdout.write(table)


# -- parser ------------------------------------------------------------------


def _add_model_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="default 0, or $MILNET_SEED")
    p.add_argument("--when-loss", choices=sorted(losses.LOSSES))
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--lr-period", type=int, help="epochs between learning-rate halvings")
    p.add_argument("--lr-floor", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--fmaps", type=int, help="convolutional feature maps")
    p.add_argument("--gru-units", type=int)
    p.add_argument("--dense-units", type=int)
    p.add_argument("--mean-ratio", type=float, help="MMM mean target as a fraction of Y")
    p.add_argument("--features", help="feature cache directory written by 'features'")
    p.add_argument("--config", help="flat key = value TOML file")


def build_parser():
    parser = _Parser(prog="milnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic weakly labelled dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--recordings", type=int, required=True)
    p.add_argument("--pos-fraction", type=float, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--test-recordings", type=int, default=0,
                   help="how many of the recordings form the test split")
    p.add_argument("--duration", type=float, default=data.MAX_DURATION_S)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract log-mel caches (.lmel)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train under one regime and write a run directory")
    p.add_argument("--regime", choices=training.REGIMES)
    p.add_argument("--when-input", choices=training.INPUTS)
    p.add_argument("--who-input", choices=training.INPUTS)
    p.add_argument("--weights", help="joint loss weights 'wWHEN,wWHO'")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a run directory, writing metrics.json")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--features")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="train and score all six regime/input rows")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "synth" and args.seed is None:
            args.seed = default_seed()
        args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, feat.FeatureError, metrics.MetricError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (training.TrainingError, NonFiniteError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
