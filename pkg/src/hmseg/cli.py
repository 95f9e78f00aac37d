"""Command-line entry point: ``hmseg <subcommand> [options]``."""

from __future__ import annotations

import argparse
import ast
import dataclasses
import logging
import sys
from pathlib import Path

from . import evaluation, losses, phantom, risk, sampling, trainer
from .gradcheck import run_gradcheck_suite
from .labels import DEFAULT_TAXONOMY
from .network import NetworkConfig

log = logging.getLogger("hmseg")

SECTIONS = {
    "phantom": phantom.PhantomConfig,
    "train": trainer.TrainConfig,
    "network": NetworkConfig,
}


class ConfigError(ValueError):
    pass


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(default, (int, float, str)):
        try:
            return type(default)(value.strip())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return ast.literal_eval(value.strip())
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"cannot parse {value!r}") from exc


def _field_owner() -> dict[str, type]:
    owners: dict[str, type] = {}
    for cls in SECTIONS.values():
        for f in dataclasses.fields(cls):
            owners.setdefault(f.name, cls)
    return owners


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    owners = _field_owner()
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in owners:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def build_configs(raw: dict[str, str], overrides: dict) -> dict[str, object]:
    """Instantiate each config dataclass from file values plus CLI overrides."""
    built = {}
    for section, cls in SECTIONS.items():
        kwargs = {}
        for f in dataclasses.fields(cls):
            default = f.default if f.default is not dataclasses.MISSING else None
            if f.name in overrides and overrides[f.name] is not None:
                kwargs[f.name] = overrides[f.name]
            elif f.name in raw:
                kwargs[f.name] = _coerce(raw[f.name], default)
        built[section] = cls(**kwargs)
    return built


def echo_config(configs: dict[str, object], stream=None) -> None:
    stream = stream or sys.stdout
    for section, cfg in configs.items():
        for k, v in dataclasses.asdict(cfg).items():
            print(f"# {section}.{k} = {v!r}", file=stream)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--ckpt", help="checkpoint file")
    common.add_argument("--report", help="CSV report path")
    common.add_argument("--iterations", type=int)
    common.add_argument("--warmup", type=int)
    common.add_argument("--patch", help="patch size, e.g. 48x48")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hmseg", description="Joint tissue and lesion segmentation from hetero-modal phantoms")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a phantom dataset")
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--mode", choices=trainer.MODES)
    e = sub.add_parser("eval", parents=[common], help="per-class DSC table")
    e.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    e.add_argument("--mask-policy", default="native", choices=evaluation.MASK_POLICIES)
    a = sub.add_parser("audit", parents=[common], help="per-sample tissue-risk bound audit")
    a.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    f = sub.add_parser("fuzz-triangle", parents=[common], help="search for triangle-inequality violations")
    f.add_argument("--mode", default="one-hot", choices=["one-hot", "soft"])
    f.add_argument("--trials", type=int, default=100_000)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--tol", type=float, default=1e-4)
    sub.add_parser("split", parents=[common], help="write the train/val/test split")
    return p


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ConfigError(f"--{n} is required for '{args.command}'")


def _split_ids(data: Path, seed: int) -> dict[str, list[str]]:
    split_file = data / "split.csv"
    if split_file.exists():
        return sampling.read_split(split_file)
    train_ids, val_ids, test_ids = sampling.split_dataset(phantom.read_manifest(data / "manifest.csv"), seed)
    return {"train": train_ids, "val": val_ids, "test": test_ids}


def _select(ds: phantom.PhantomDataset, splits: dict, which: str) -> phantom.PhantomDataset:
    if which == "all":
        return ds
    return ds.subset(splits[which])


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = parse_config_text(Path(args.config).read_text()) if args.config else {}
        overrides = {"seed": args.seed, "max_iterations": args.iterations, "warmup": args.warmup}
        if args.patch:
            ps = sampling.PatchSpec.parse(args.patch)
            overrides.update(patch_height=ps.height, patch_width=ps.width)
        if args.command == "train" and args.mode:
            overrides["mode"] = args.mode
        cfgs = build_configs(raw, overrides)
        echo_config(cfgs)
        return _dispatch(args, cfgs)
    except (ConfigError, ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"hmseg {args.command}: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, cfgs) -> int:
    pcfg: phantom.PhantomConfig = cfgs["phantom"]
    tcfg: trainer.TrainConfig = cfgs["train"]
    ncfg: NetworkConfig = cfgs["network"]
    w = losses.default_weights(DEFAULT_TAXONOMY)

    if args.command == "gen":
        _require(args, "out")
        out = phantom.generate_dataset(pcfg, args.out)
        print(f"wrote {pcfg.n_control} control and {pcfg.n_lesion} lesion samples to {out}")
        return 0

    if args.command == "split":
        _require(args, "data")
        data = Path(args.data)
        tr, va, te = sampling.split_dataset(phantom.read_manifest(data / "manifest.csv"), tcfg.seed)
        target = Path(args.report) if args.report else data / "split.csv"
        sampling.write_split(target, tr, va, te)
        print(f"train {len(tr)}, val {len(va)}, test {len(te)} -> {target}")
        return 0

    if args.command == "train":
        _require(args, "data", "out")
        data = Path(args.data)
        splits = _split_ids(data, tcfg.seed)
        controls = phantom.PhantomDataset(data, "control")
        lesions = phantom.PhantomDataset(data, "lesion")
        res = trainer.train(tcfg, controls.subset(splits["train"]), lesions.subset(splits["train"]),
                            controls.subset(splits["val"]), lesions.subset(splits["val"]),
                            net_cfg=ncfg, weights=w, out_dir=args.out,
                            echo={"data": str(data)})
        last = res.log[-1]
        print(f"{res.iterations_run} iterations, final objective {last['objective']:.5f}, "
              f"best validation {res.best_val}")
        return 0

    if args.command == "eval":
        _require(args, "ckpt", "data", "report")
        params, echo = trainer.load_checkpoint(args.ckpt)
        data = Path(args.data)
        splits = _split_ids(data, tcfg.seed)
        tag = echo.get("train", {}).get("mode", "model")
        table = evaluation.DscTable()
        for kind in ("control", "lesion"):
            ds = _select(phantom.PhantomDataset(data, kind), splits, args.split)
            if len(ds):
                table.extend(evaluation.evaluate(params, list(ds), args.mask_policy, model_tag=tag,
                                                 dataset_tag=f"{kind}-{args.split}"))
        table.write_csv(args.report)
        for r in table.rows:
            print(f"{r.model_tag:12s} {r.dataset_tag:14s} {r.class_name:20s} {r.dsc:.4f}")
        return 0

    if args.command == "audit":
        _require(args, "ckpt", "data", "report")
        params, _ = trainer.load_checkpoint(args.ckpt)
        data = Path(args.data)
        splits = _split_ids(data, tcfg.seed)
        lesions = list(_select(phantom.PhantomDataset(data, "lesion"), splits, args.split))
        controls = list(_select(phantom.PhantomDataset(data, "control"), splits, args.split))
        res = risk.bound_audit(params, lesions, w, control_samples=controls)
        res.write_csv(args.report)
        lhs, rhs = res.aggregate(only_passing=True)
        print(f"{len(res.rows)} samples, {len(res.passing())} pass the triangle check")
        print(f"empirical tissue risk {lhs:.6f} <= consistency + T1 risk {rhs:.6f}: {lhs <= rhs + 1e-9}")
        if res.r_control is not None:
            print(f"control-data T1 tissue risk {res.r_control:.6f}")
        return 0

    if args.command == "fuzz-triangle":
        out = Path(args.out) if args.out else None
        rep = losses.fuzz_triangle(args.trials, args.mode, tcfg.seed, out_dir=out)
        print(f"mode {rep.mode}: {rep.violations} violations in {rep.trials} trials "
              f"(rate {rep.violation_rate:.3e}, worst margin {rep.worst_margin:.3e})")
        if args.mode == "one-hot":
            v, worst = losses.exhaustive_triangle(2, 3)
            print(f"exhaustive 2-pixel/3-class one-hot: {v} violations (worst margin {worst:.3e})")
            return 0 if rep.violations == 0 and v == 0 else 1
        return 0

    if args.command == "gradcheck":
        results = run_gradcheck_suite(seed=tcfg.seed, tol=args.tol)
        ok = True
        for name, rep in results:
            print(f"{'PASS' if rep.passed else 'FAIL'} {name:28s} max {rep.max_rel_error:.2e} "
                  f"mean {rep.mean_rel_error:.2e} n {rep.n_checked}")
            ok &= rep.passed
        return 0 if ok else 1

    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
