"""``usamkit`` command-line interface.

Every command first writes a run manifest next to its outputs, then the
outputs themselves. A file output ``X`` gets ``X.manifest.json``; a directory
output gets ``run_manifest.json`` inside it. CSV files are the authoritative
results and are byte-identical across runs with the same flags.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backend import GRIDS, SyntheticWorld
from .evaluation import (
    SCENARIOS,
    bench_uq_overhead,
    correlation_matrix,
    curves_to_csv,
    rel_auc_table_csv,
)
from .io import read_records, write_records
from .mlp import KNOWN_GOOD_CONFIG, TrainConfig, random_search
from .pipeline import bayes_measures, generate_sets, iou_gt, measure_table, scenario_curves
from .sampling import MODELS, AugKind, ModelId
from .svg import line_plot
from .usam import HEAD_NAMES, TOKEN_ZEROING, USAM, build_training_set, head_targets, token_ablation, training_arrays


class CommandError(Exception):
    """A command could not produce its outputs."""


# --- run manifest -----------------------------------------------------------

@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    outputs: list
    versions: dict = dataclasses.field(default_factory=lambda: {
        "usamkit": __version__, "numpy": np.__version__, "python": platform.python_version()})
    created: str = dataclasses.field(
        default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
    completed: str | None = None

    @property
    def config_digest(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["config_digest"] = self.config_digest
        return d

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n")


def manifest_path(out: Path, is_dir: bool = False) -> Path:
    return out / "run_manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


def _config_of(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _start(args, out: Path, outputs, is_dir=False, seeds=None) -> tuple[RunManifest, Path]:
    m = RunManifest(command=args.command, config=_config_of(args),
                    seeds=seeds if seeds is not None else {"seed": args.seed},
                    outputs=[str(p) for p in outputs])
    path = manifest_path(out, is_dir)
    m.write(path)
    return m, path


def _finish(m: RunManifest, path: Path) -> None:
    for p in m.outputs:
        if not Path(p).exists():
            raise CommandError(f"output {p} was not written")
    m.completed = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    m.write(path)


# --- helpers ------------------------------------------------------------------

_WORLD_FIELDS = [f for f in dataclasses.fields(SyntheticWorld)]


def _parse_model_noise(text: str) -> dict:
    out = {}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected MODEL=VALUE pairs, got {part!r}")
        out[key.strip()] = float(value)
    return out


def _parse_size(text: str) -> tuple:
    h, _, w = text.lower().partition("x")
    return (int(h), int(w or h))


def _add_world_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic world overrides")
    for f in _WORLD_FIELDS:
        flag = "--world." + f.name.replace("_", "-")
        if f.name == "model_noise":
            g.add_argument(flag, dest="world_" + f.name, type=_parse_model_noise, metavar="M=V,...",
                           help="per-model corruption, e.g. L=0.8,B+=1.3,S=1.8,T=2.4")
        elif f.name == "image_size":
            g.add_argument(flag, dest="world_" + f.name, type=_parse_size, metavar="HxW",
                           help="image size (default 32x32)")
        elif f.name == "seed":
            g.add_argument(flag, dest="world_seed", type=int, metavar="INT",
                           help="world seed (default: --seed)")
        else:
            g.add_argument(flag, dest="world_" + f.name, type=float, metavar="FLOAT",
                           help=f"default {f.default}")


def _world(args) -> SyntheticWorld:
    kw = {f.name: getattr(args, "world_" + f.name) for f in _WORLD_FIELDS
          if getattr(args, "world_" + f.name, None) is not None}
    kw.setdefault("seed", args.seed)
    return SyntheticWorld(**kw)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=KNOWN_GOOD_CONFIG.epochs)
    g.add_argument("--batch-size", type=int, default=KNOWN_GOOD_CONFIG.batch_size)
    g.add_argument("--lr", type=float, default=KNOWN_GOOD_CONFIG.learning_rate, help="learning rate")
    g.add_argument("--momentum", type=float, default=0.83)
    g.add_argument("--hidden", type=int, default=512, help="hidden layer width")


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.lr, momentum=args.momentum, seed=seed)


def _fmt(v) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _table_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(table)
    w.writerow(names)
    for row in zip(*(table[n] for n in names)):
        w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    return buf.getvalue()


def _records(path) -> list:
    sets = read_records(path)
    if not sets:
        raise CommandError(f"{path}: no sample sets")
    return sets


# --- commands -------------------------------------------------------------------

def cmd_generate(args) -> None:
    if args.n < 1:
        raise CommandError("--n must be at least 1")
    world = _world(args)
    out = Path(args.out)
    m, mpath = _start(args, out, [out], seeds={"seed": args.seed, "world_seed": world.seed})
    sets = generate_sets(world, args.n, first=args.first, grid=args.grid, n_prompts=args.n_prompts)
    header = {"grid": args.grid, "n_prompts": args.n_prompts, "first": args.first,
              "manifest": mpath.name,
              "world": {k: (v if not isinstance(v, dict) else {str(getattr(a, "value", a)): b
                                                                   for a, b in v.items()})
                        for k, v in dataclasses.asdict(world).items()}}
    write_records(out, sets, header)
    _finish(m, mpath)


def cmd_bayes(args) -> None:
    sets = _records(args.records)
    out = Path(args.out)
    m, mpath = _start(args, out, [out])
    table = {"image_id": [s.image_id for s in sets]}
    table.update(measure_table(sets, args.model, with_bayes=True))
    _write_text(out, _table_csv(table))
    _finish(m, mpath)


def cmd_train(args) -> None:
    sets = _records(args.records)
    out = Path(args.heads)
    m, mpath = _start(args, out, [out / "manifest.json"], is_dir=True)
    sources = tuple(ModelId(s) for s in args.sources)
    examples = build_training_set(sets, sources=sources)
    cfg = _train_config(args, args.seed)
    extra = {"run_manifest": mpath.name}
    if args.search:
        X, _, _ = training_arrays(examples)
        y = head_targets(examples)["usam_T"]
        result = random_search(X, y, trials=args.search, seed=args.seed, hidden=args.hidden)
        cfg = result.best_config.replace(seed=args.seed)
        extra["search"] = {"trials": args.search, "best": result.best_config.to_dict(),
                           "best_val_loss": result.best_val_loss}
    est = USAM.from_config(cfg, heads=tuple(args.head_set), hidden_size=args.hidden)
    est.fit(examples)
    est.save(out, extra=extra)
    _finish(m, mpath)


def _scenarios(arg) -> tuple:
    return SCENARIOS if arg == "all" else (arg,)


def cmd_eval(args) -> None:
    sets = _records(args.records)
    out = Path(args.out)
    scenarios = _scenarios(args.scenario)
    outputs = [out / f"curves_{sc}.csv" for sc in scenarios] + [out / "rel_auc.csv"]
    if args.svg:
        outputs += [out / f"curves_{sc}.svg" for sc in scenarios]
    m, mpath = _start(args, out, outputs, is_dir=True)
    heads = USAM.load(args.heads) if args.heads else None
    measures = measure_table(sets, args.model, heads=heads, with_bayes=not args.no_bayes)
    curves = scenario_curves(sets, measures, model=args.model, scenarios=scenarios,
                             random_seed=args.seed)
    table = {}
    for sc in scenarios:
        cs = curves[sc]
        _write_text(out / f"curves_{sc}.csv", curves_to_csv(cs))
        for name, c in cs.items():
            table[(name, sc)] = c
        ref = next(iter(cs.values()))
        table[("oracle", sc)] = dataclasses.replace(ref, auc=ref.oracle_auc, rel_auc=1.0)
        table[("worst", sc)] = dataclasses.replace(ref, auc=ref.worst_auc, rel_auc=0.0)
        if args.svg:
            series = {n: (c.ratios, c.mious) for n, c in cs.items()}
            series["oracle"] = (ref.ratios, ref.oracle_mious)
            series["worst"] = (ref.ratios, ref.worst_mious)
            _write_text(out / f"curves_{sc}.svg",
                        line_plot(series, title=sc, comment=f"manifest: {mpath.name}"))
    _write_text(out / "rel_auc.csv", rel_auc_table_csv(table))
    _finish(m, mpath)


def cmd_correlate(args) -> None:
    sets = _records(args.records)
    out = Path(args.out)
    m, mpath = _start(args, out, [out])
    model = ModelId(args.model)
    rows = [bayes_measures(s, model) for s in sets]
    cols = {"IoU_GT": [iou_gt(s, model) for s in sets],
            "SamScore": [1.0 - r["inv_samscore"] for r in rows]}
    for c in ("H_Std", "H_Y", "H_Theta", "H_XP", "H_A"):
        cols[c] = [r[c] for r in rows]
    if args.heads:
        heads = USAM.load(args.heads)
        X = np.stack([s.heads(AugKind.IDENTITY, 0, model)[0].tokens for s in sets])
        unc = heads.uncertainty_columns(X, model)
        if "usam" in unc:
            cols["USAM"] = 1.0 - unc.pop("usam")
        cols.update(unc)
    cols = {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}
    cols = {k: v for k, v in cols.items() if np.isfinite(v).all()}
    _write_text(out, correlation_matrix(cols).to_csv())
    _finish(m, mpath)


def cmd_ablate(args) -> None:
    train_sets = _records(args.records)
    test_sets = _records(args.test_records)
    out = Path(args.out)
    m, mpath = _start(args, out, [out])
    train = build_training_set(train_sets, sources=tuple(ModelId(s) for s in args.sources))
    test = build_training_set(test_sets, sources=(ModelId(args.model),))
    cfg = _train_config(args, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["zero", "model-swap", "prompt-refine", "task-supervise", "mean"])
    for zero in TOKEN_ZEROING:
        r = token_ablation(train, test, zero=zero, config=cfg, source=args.model,
                           hidden_size=args.hidden)
        vals = [r[sc] for sc in SCENARIOS[:3]]
        w.writerow([zero, *(f"{100 * v:.2f}" for v in vals), f"{100 * np.mean(vals):.2f}"])
    _write_text(out, buf.getvalue())
    _finish(m, mpath)


def cmd_bench(args) -> None:
    out = Path(args.out)
    m, mpath = _start(args, out, [out])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mask_size", "method", "median_seconds"])
    for size in args.sizes:
        r = bench_uq_overhead(mask_size=size, repeats=args.repeats, seed=args.seed)
        for name, med in r["median"].items():
            w.writerow([size, name, f"{med:.6e}"])
    _write_text(out, buf.getvalue())
    _finish(m, mpath)


def cmd_export(args) -> None:
    sets = _records(args.records)
    out = Path(args.out)
    m, mpath = _start(args, out, [out])
    table = {"image_id": [s.image_id for s in sets],
             "height": [str(s.gt.shape[0]) for s in sets],
             "width": [str(s.gt.shape[1]) for s in sets],
             "n_prompts": [str(s.n_prompts) for s in sets],
             "n_records": [str(len(s.records)) for s in sets],
             "gt_area": [str(int(s.gt.sum())) for s in sets]}
    for model in MODELS:
        present = [bool(s.present(AugKind.IDENTITY, 0, model)) for s in sets]
        table[f"iou_{model.value}"] = [iou_gt(s, model) if ok else math.nan
                                       for s, ok in zip(sets, present)]
        table[f"samscore_{model.value}"] = [
            max(r.sam_score for r in s.heads(AugKind.IDENTITY, 0, model)) if ok else math.nan
            for s, ok in zip(sets, present)]
    _write_text(out, _table_csv(table))
    _finish(m, mpath)


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="usamkit", description="Uncertainty quantification for promptable segmentation.")
    parser.add_argument("--version", action="version", version=f"usamkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "Synthesize samples and write a record file.")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--first", type=int, default=0, help="index of the first sample (default 0)")
    p.add_argument("--grid", choices=GRIDS, default="full", help="sampling grid (default full)")
    p.add_argument("--n-prompts", type=int, default=8, help="sampled prompt points (default 8)")
    p.add_argument("--out", required=True, help="record file to write")
    _add_world_flags(p)

    p = add("bayes", cmd_bayes, "Per-sample sampling-based entropies and SamScore baselines.")
    p.add_argument("--records", required=True)
    p.add_argument("--model", choices=[m.value for m in MODELS], default="L",
                   help="model whose predictions are scored (default L)")
    p.add_argument("--out", required=True, help="CSV to write")

    p = add("train", cmd_train, "Train USAM heads and write checkpoints.")
    p.add_argument("--records", required=True)
    p.add_argument("--heads", required=True, help="output directory for checkpoints")
    p.add_argument("--head-set", nargs="+", choices=HEAD_NAMES, default=list(HEAD_NAMES),
                   metavar="HEAD", help="heads to train (default all)")
    p.add_argument("--sources", nargs="+", choices=[m.value for m in MODELS],
                   default=[m.value for m in MODELS], help="models whose tokens are used")
    p.add_argument("--search", type=int, default=0, metavar="TRIALS",
                   help="random hyperparameter search with this many trials first")
    _add_train_flags(p)

    p = add("eval", cmd_eval, "Correction curves and rel-AUC table.")
    p.add_argument("--records", required=True)
    p.add_argument("--heads", help="trained USAM head directory")
    p.add_argument("--scenario", choices=SCENARIOS + ("all",), default="all")
    p.add_argument("--model", choices=[m.value for m in MODELS], default="T",
                   help="model being corrected (default T)")
    p.add_argument("--no-bayes", action="store_true", help="skip the sampling-based entropies")
    p.add_argument("--svg", action="store_true", help="also write SVG line plots")
    p.add_argument("--out", required=True, help="output directory")

    p = add("correlate", cmd_correlate, "Pearson correlation matrix of UQ measures and IoU.")
    p.add_argument("--records", required=True)
    p.add_argument("--heads", help="trained USAM head directory")
    p.add_argument("--model", choices=[m.value for m in MODELS], default="L")
    p.add_argument("--out", required=True, help="CSV to write")

    p = add("ablate", cmd_ablate, "Token ablation of the direct gap heads.")
    p.add_argument("--records", required=True, help="training record file")
    p.add_argument("--test-records", required=True)
    p.add_argument("--model", choices=[m.value for m in MODELS], default="T")
    p.add_argument("--sources", nargs="+", choices=[m.value for m in MODELS],
                   default=[m.value for m in MODELS])
    p.add_argument("--out", required=True, help="CSV to write")
    _add_train_flags(p)

    p = add("bench", cmd_bench, "Median wall-time of the UQ add-ons.")
    p.add_argument("--sizes", type=int, nargs="+", default=[256, 1024], metavar="N")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out", required=True, help="CSV to write")

    p = add("export", cmd_export, "Per-record summary table of a record file.")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True, help="CSV to write")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CommandError, ValueError, KeyError, OSError) as exc:
        print(f"usamkit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
