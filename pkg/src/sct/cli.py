"""``sct`` command-line workbench.

Every command writes ``<out>/<command>.manifest.json`` recording the resolved
configuration, FNV-1a fingerprints of its input files, its outputs, the seed
and the wall-clock duration. Settings resolve as flag > config file > default;
the seed falls back to ``SCT_SEED`` before the default of 0.

Exit codes: 0 success, 2 validation error, 3 I/O or format error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import container
from .benchmark import erase_table, toy_setup
from .data import SyntheticSpec, load_dataset, save_dataset
from .errors import ConfigError, FormatError, NumericError, ValidationError
from .finetune import (
    DEFAULT_LRS,
    DEFAULT_SCALES,
    DEFAULT_WDS,
    GridSpec,
    Mode,
    TrainConfig,
    baseline,
    evaluate,
    grid_search,
    train,
    trainable_count,
)
from .rng import Rng
from .sctm import (
    ComparatorSpec,
    InjectionPlan,
    Position,
    comparator_costs,
    count_extra_flops,
    count_extra_params,
    inject,
    load_tuned,
    save_tuned,
)
from .select import (
    ScoringMode,
    Strategy,
    collect_importance,
    load_selection,
    save_selection,
    select_channels,
)
from .vit import (
    PRESETS,
    VisionTransformer,
    VitConfig,
    load_checkpoint,
    load_config,
    parameter_count,
    save_checkpoint,
    save_config,
)

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class Run:
    """Collects inputs and outputs of one invocation and writes its manifest."""

    def __init__(self, command: str, out_dir, force: bool = False):
        self.command = command
        self.out = Path(out_dir)
        self.force = force
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        self.seed: int | None = None
        self.t0 = time.perf_counter()
        self.out.mkdir(parents=True, exist_ok=True)

    def read(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"input file not found: {path}")
        self.inputs[str(path)] = container.file_fingerprint(path)
        return path

    def target(self, name: str) -> Path:
        path = self.out / name
        if path.exists() and not self.force:
            raise ConfigError(f"{path} exists; pass --force to overwrite")
        self.outputs.append(str(path))
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.target(name)
        path.write_text(text)
        return path

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.seed,
            "duration_s": round(time.perf_counter() - self.t0, 3),
        }
        path = self.out / f"{self.command}.manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return path


def resolve_seed(flag, file_cfg: dict) -> int:
    if flag is not None:
        return int(flag)
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get("SCT_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SCT_SEED must be an integer, got {env!r}") from None
    return 0


def read_json(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return doc


def pick(flag, file_cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return file_cfg.get(key, default)


def open_backbone(run: Run, checkpoint, config=None) -> VisionTransformer:
    """Load a checkpoint; its config defaults to ``config.json`` beside it."""
    ckpt_path = run.read(checkpoint)
    cfg_path = Path(config) if config else ckpt_path.with_name("config.json")
    cfg = load_config(run.read(cfg_path))
    return VisionTransformer(cfg, load_checkpoint(ckpt_path, cfg))


def parse_k(text: str, num_layers: int):
    parts = [p for p in str(text).split(",") if p.strip()]
    try:
        ks = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"K must be an integer or comma list, got {text!r}") from None
    if len(ks) == 1:
        return ks[0]
    if len(ks) != num_layers:
        raise ConfigError(f"--k-per-layer needs {num_layers} values, got {len(ks)}")
    return ks


# ---------------------------------------------------------------------------
# commands


def cmd_init_toy(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    run = Run("init-toy", out, force=True)
    file_cfg = read_json(args.config and run.read(args.config))
    cfg = VitConfig.from_dict({**PRESETS["toy"].to_dict(), **file_cfg.get("model", {})})
    spec = SyntheticSpec(**{**asdict(SyntheticSpec(num_classes=cfg.num_classes)), **file_cfg.get("dataset", {})})
    if spec.num_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {spec.num_classes} classes but the head has {cfg.num_classes}")
    seed = resolve_seed(args.seed, file_cfg)
    vit, ds = toy_setup(seed, cfg, spec)
    save_config(run.target("config.json"), cfg)
    save_checkpoint(run.target("checkpoint.sctw"), vit.ckpt)
    save_dataset(run.target("dataset.sctw"), ds)
    train_defaults = {**asdict(TrainConfig()), "position": Position.ATTN.value, "layers": "all", "k": cfg.embed_dim // 8}
    train_defaults["seed"] = seed
    run.write_text("train.json", json.dumps(train_defaults, indent=1, sort_keys=True) + "\n")
    run.config = {"model": cfg.to_dict(), "dataset": asdict(spec)}
    run.seed = seed
    run.finish()
    print(f"wrote toy workspace to {out} (seed {seed})")
    return EXIT_OK


def cmd_select(args) -> int:
    run = Run("select", args.out, args.force)
    vit = open_backbone(run, args.checkpoint, args.vit_config)
    ds = load_dataset(run.read(args.dataset))
    cfg = vit.cfg
    seed = resolve_seed(args.seed, {})
    k = parse_k(args.k_per_layer if args.k_per_layer else (args.k if args.k is not None else cfg.embed_dim // 8), cfg.num_layers)
    mode, strategy = ScoringMode(args.mode), Strategy(args.strategy)
    ds.check_classes_present()
    tr = ds.train()
    acc = collect_importance(vit, tr.images, tr.labels, ds.num_classes, batch_size=args.batch_size)
    scores = acc.scores(mode)
    sel = select_channels(scores, k, strategy, Rng(seed))
    sel.model_fingerprint = vit.ckpt.fingerprint()
    save_selection(run.target("selection.json"), sel)

    m = ds.num_classes
    lines = ["layer,channel,z,selected," + ",".join(f"class_{c}" for c in range(m))]
    for l in scores.layers:
        chosen = set(sel[l].tolist())
        per_class = acc.class_scores(l)
        for ch in range(cfg.embed_dim):
            cols = ",".join(repr(float(v)) for v in per_class[:, ch])
            lines.append(f"{l},{ch},{float(scores[l][ch])!r},{int(ch in chosen)},{cols}")
    run.write_text("importance.csv", "\n".join(lines) + "\n")
    run.config = {"k": k, "strategy": strategy.value, "mode": mode.value, "split": "train"}
    run.seed = seed
    run.finish()
    print(f"selected K={k} channels per layer ({strategy.value}, {mode.value})")
    return EXIT_OK


def _train_config(args, file_cfg: dict, seed: int) -> TrainConfig:
    d = TrainConfig()
    return TrainConfig(
        lr=float(pick(args.lr, file_cfg, "lr", d.lr)),
        weight_decay=float(pick(args.wd, file_cfg, "weight_decay", d.weight_decay)),
        epochs=int(pick(args.epochs, file_cfg, "epochs", d.epochs)),
        warmup_epochs=int(pick(args.warmup, file_cfg, "warmup_epochs", d.warmup_epochs)),
        batch_size=int(pick(args.batch_size, file_cfg, "batch_size", d.batch_size)),
        scale=float(pick(args.scale, file_cfg, "scale", d.scale)),
        seed=seed,
    )


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"expected a comma list of numbers, got {text!r}") from None


def cmd_train(args) -> int:
    run = Run("train", args.out, args.force)
    file_cfg = read_json(args.config and run.read(args.config))
    seed = resolve_seed(args.seed, file_cfg)
    vit = open_backbone(run, args.checkpoint, args.vit_config)
    ds = load_dataset(run.read(args.dataset))
    ds.check_classes_present()
    mode = Mode(args.mode)
    cfg = _train_config(args, file_cfg, seed)
    position = Position(pick(args.position, file_cfg, "position", Position.ATTN.value))
    layers = str(pick(args.layers, file_cfg, "layers", "all"))
    plan = InjectionPlan.parse(layers, vit.cfg.num_layers, position)
    run.seed = seed
    run.config = {"mode": mode.value, "train": asdict(cfg), "position": position.value, "layers": layers}

    if mode is not Mode.SCT:
        res = baseline(mode, vit, ds, cfg)
        model, metrics = res.model, res.metrics
        if res.backbone is not None:
            tuned = {n: (res.backbone[n] if n in res.backbone else t.data) for n, t in vit.ckpt.items()}
            container.save(run.target("backbone.sctw"), tuned)
        sel_fp = ""
    else:
        if args.selection is None:
            raise ConfigError("SCT training needs --selection")
        sel_path = run.read(args.selection)
        sel = load_selection(sel_path)
        if sel.model_fingerprint and sel.model_fingerprint != vit.ckpt.fingerprint():
            raise FormatError("selection was computed on a different backbone")
        sel_fp = container.file_fingerprint(sel_path)
        scale_given = pick(args.scale, file_cfg, "scale", None) is not None
        if args.grid or not scale_given:
            grid = GridSpec(
                lrs=_floats(args.grid_lrs) if args.grid_lrs else (DEFAULT_LRS if args.grid else (cfg.lr,)),
                wds=_floats(args.grid_wds) if args.grid_wds else (DEFAULT_WDS if args.grid else (cfg.weight_decay,)),
                scales=_floats(args.grid_scales) if args.grid_scales else ((cfg.scale,) if scale_given else DEFAULT_SCALES),
            )
            result = grid_search(vit, sel, plan, ds, grid, cfg, workers=args.workers)
            run.write_text("grid.csv", result.to_csv())
            if result.best_params is None:
                raise NumericError("every grid cell failed")
            best = result.best
            model = inject(vit, sel, plan, best.scale, ds.num_classes, params=result.best_params)
            metrics = result.best_metrics
            run.config["grid"] = {"lrs": grid.lrs, "wds": grid.wds, "scales": grid.scales}
            run.config["best"] = {"lr": best.lr, "wd": best.wd, "scale": best.scale}
        else:
            model = inject(vit, sel, plan, cfg.scale, ds.num_classes)
            metrics = train(model, ds, cfg).metrics
    save_tuned(run.target("artifact.sctw"), model, sel_fp)
    run.write_text("metrics.jsonl", "".join(m.to_json() + "\n" for m in metrics))
    run.config["trainable_params"] = trainable_count(model, mode)
    run.finish()
    last = metrics[-1]
    print(f"train_acc {last.train_acc:.4f} val_acc {last.val_acc:.4f}")
    return EXIT_OK


def _split(ds, name: str):
    return {"train": ds.train, "val": ds.val, "all": lambda: ds}[name]()


def cmd_eval(args) -> int:
    run = Run("eval", args.out, args.force)
    vit = open_backbone(run, args.checkpoint, args.vit_config)
    ds = load_dataset(run.read(args.dataset))
    model, _ = load_tuned(run.read(args.artifact), vit)
    acc = evaluate(model, _split(ds, args.split))
    run.write_text("eval.json", json.dumps({"split": args.split, "accuracy": acc}, indent=1) + "\n")
    run.config = {"split": args.split}
    run.finish()
    print(f"{args.split} accuracy {acc:.4f}")
    return EXIT_OK


def cmd_erase(args) -> int:
    run = Run("erase", args.out, args.force)
    vit = open_backbone(run, args.checkpoint, args.vit_config)
    ds = load_dataset(run.read(args.dataset))
    sel = load_selection(run.read(args.selection))
    seed = resolve_seed(args.seed, {})
    if args.artifact:
        model, _ = load_tuned(run.read(args.artifact), vit)
        source = "artifact"
    else:
        # no artifact: fit a frozen linear probe first
        cfg = TrainConfig(lr=args.probe_lr, epochs=args.probe_epochs, warmup_epochs=args.probe_epochs // 10, seed=seed)
        model = baseline(Mode.LINEAR_PROBE, vit, ds, cfg).model
        source = "linear-probe"
    rows = erase_table(model, _split(ds, args.split), sel, args.mode == "per-layer", args.random_trials, seed)
    run.write_text("erase.csv", "\n".join([rows[0].CSV_HEADER] + [r.csv() for r in rows]) + "\n")
    run.config = {"mode": args.mode, "random_trials": args.random_trials, "split": args.split, "model": source}
    run.seed = seed
    run.finish()
    for r in rows:
        print(r.csv())
    return EXIT_OK


def _accounting_inputs(args):
    cfg = load_config(args.config) if args.config else PRESETS[args.preset]
    position = Position(args.position)
    plan = InjectionPlan.parse(args.layers, cfg.num_layers, position)
    k = parse_k(args.k if args.k is not None else str(cfg.embed_dim // 8), cfg.num_layers)
    spec = ComparatorSpec()
    wanted = []
    for item in args.compare or []:
        name, _, value = item.partition(":")
        field_of = {"adapter": "adapter_dim", "vpt": "prompt_len", "ssf": "ssf_inserts"}
        if name not in field_of or not value.isdigit():
            raise ConfigError(f"--compare expects adapter:D, vpt:n or ssf:m, got {item!r}")
        spec = replace(spec, **{field_of[name]: int(value)})
        wanted.append({"vpt": "vpt-deep"}.get(name, name))
    return cfg, plan, k, spec, wanted


def _comparator_lines(cfg, k, spec, wanted) -> list[str]:
    if not wanted:
        return []
    if not isinstance(k, int):
        raise ConfigError("--compare needs a single K")
    rows = [r for r in comparator_costs(cfg, k, spec) if r["method"] in wanted + ["sct"]]
    return ["", "method,params,flops"] + [f"{r['method']},{r['params']},{r['flops']}" for r in rows]


def cmd_params(args) -> int:
    run = Run("params", args.out, args.force)
    if args.config:
        run.read(args.config)
    cfg, plan, k, spec, wanted = _accounting_inputs(args)
    weights = count_extra_params(cfg, plan, k, with_bias=False)
    with_bias = count_extra_params(cfg, plan, k, with_bias=True)
    backbone = parameter_count(cfg)
    lines = [f"sctm_weights {weights}", f"sctm_with_bias {with_bias}", f"backbone {backbone}"]
    if weights:
        # ratio of the rounded figures, as conventionally quoted (millions to 1 and 2 decimals)
        quoted = round(backbone / 1e6, 1) / round(weights / 1e6, 2) if round(weights / 1e6, 2) else float("inf")
        lines.append(f"backbone_ratio {backbone / weights:.1f} quoted {quoted:.1f}")
    lines += _comparator_lines(cfg, k, spec, wanted)
    print("\n".join(lines))
    run.config = {"model": cfg.to_dict(), "layers": list(plan.layers), "position": plan.position.value, "k": k}
    run.finish()
    return EXIT_OK


def cmd_flops(args) -> int:
    run = Run("flops", args.out, args.force)
    if args.config:
        run.read(args.config)
    cfg, plan, k, spec, wanted = _accounting_inputs(args)
    lines = [f"sctm_flops {count_extra_flops(cfg, plan, k)}"] + _comparator_lines(cfg, k, spec, wanted)
    print("\n".join(lines))
    run.config = {"model": cfg.to_dict(), "layers": list(plan.layers), "position": plan.position.value, "k": k}
    run.finish()
    return EXIT_OK


def cmd_report(args) -> int:
    """Long-format per-class channel score table for heatmaps."""
    run = Run("report", args.out, args.force)
    vit = open_backbone(run, args.checkpoint, args.vit_config)
    ds = load_dataset(run.read(args.dataset))
    sel = load_selection(run.read(args.selection)) if args.selection else None
    ds.check_classes_present()
    tr = ds.train()
    acc = collect_importance(vit, tr.images, tr.labels, ds.num_classes, batch_size=args.batch_size)
    lines = ["layer,class,channel,score,selected"]
    for l in range(1, vit.cfg.num_layers + 1):
        chosen = set(sel[l].tolist()) if sel is not None and l in sel.indices else set()
        cs = acc.class_scores(l)
        for c in range(cs.shape[0]):
            for ch in range(cs.shape[1]):
                lines.append(f"{l},{c},{ch},{float(cs[c, ch])!r},{int(ch in chosen)}")
    run.write_text("heatmap.csv", "\n".join(lines) + "\n")
    run.config = {"split": "train"}
    run.finish()
    print(f"wrote {len(lines) - 1} rows")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sct", description="Salient channel tuning workbench")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default=None):
        sp.add_argument("--out", "--out-dir", dest="out", default=out_default, required=out_default is None,
                        help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--seed", type=int, default=None, help="global seed (falls back to SCT_SEED, then 0)")

    def backbone(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--vit-config", default=None, help="model config JSON (default: config.json beside the checkpoint)")
        sp.add_argument("--dataset", required=True)

    sp = sub.add_parser("init-toy", help="write a seeded toy checkpoint, dataset and configs")
    common(sp)
    sp.add_argument("--config", default=None, help='JSON with optional "model" and "dataset" overrides')
    sp.set_defaults(func=cmd_init_toy)

    sp = sub.add_parser("select", help="score channels and pick K per layer")
    common(sp)
    backbone(sp)
    group = sp.add_mutually_exclusive_group()
    group.add_argument("--k", type=int, default=None)
    group.add_argument("--k-per-layer", default=None, help="comma list, one K per layer")
    sp.add_argument("--strategy", choices=[s.value for s in Strategy], default=Strategy.SALIENT.value)
    sp.add_argument("--mode", choices=[m.value for m in ScoringMode], default=ScoringMode.CLASS_AWARE.value)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("train", help="train SCT or a baseline")
    common(sp)
    backbone(sp)
    sp.add_argument("--selection", default=None)
    sp.add_argument("--config", default=None, help="training config JSON (e.g. train.json from init-toy)")
    sp.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.SCT.value)
    sp.add_argument("--position", choices=[p.value for p in Position], default=None)
    sp.add_argument("--layers", default=None, help='"all", "none", "last-N" or a comma list')
    sp.add_argument("--scale", type=float, default=None, help="omit to search the default scale grid")
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--wd", type=float, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--warmup", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--grid", action="store_true", help="search the full lr x wd x scale grid")
    sp.add_argument("--grid-lrs", default=None)
    sp.add_argument("--grid-wds", default=None)
    sp.add_argument("--grid-scales", default=None)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy of a trained artifact")
    common(sp)
    backbone(sp)
    sp.add_argument("--artifact", required=True)
    sp.add_argument("--split", choices=["train", "val", "all"], default="val")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("erase", help="channel erasing diagnostic")
    common(sp)
    backbone(sp)
    sp.add_argument("--selection", required=True)
    sp.add_argument("--artifact", default=None, help="trained artifact; without it a linear probe is fitted first")
    sp.add_argument("--mode", choices=["all", "per-layer"], default="all")
    sp.add_argument("--random-trials", type=int, default=10)
    sp.add_argument("--split", choices=["train", "val", "all"], default="val")
    sp.add_argument("--probe-lr", type=float, default=0.1)
    sp.add_argument("--probe-epochs", type=int, default=100)
    sp.set_defaults(func=cmd_erase)

    for name, func in (("params", cmd_params), ("flops", cmd_flops)):
        sp = sub.add_parser(name, help=f"exact SCTM {name} count")
        common(sp, out_default=".")
        sp.add_argument("--config", default=None, help="model config JSON")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="vit-b16")
        sp.add_argument("--k", default=None, help="K, or a comma list with one K per layer")
        sp.add_argument("--position", choices=[p.value for p in Position], default=Position.ATTN.value)
        sp.add_argument("--layers", default="all")
        sp.add_argument("--compare", nargs="*", default=None, metavar="NAME:N", help="adapter:D', vpt:n, ssf:m")
        sp.set_defaults(func=func)

    sp = sub.add_parser("report", help="per-class channel score table (long CSV)")
    common(sp)
    backbone(sp)
    sp.add_argument("--selection", default=None)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
