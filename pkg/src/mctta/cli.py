"""Command-line entry point.

Every command reads one flat YAML/JSON config (all keys optional, unknown
keys rejected), applies flag overrides, validates everything, and only then
starts work.  Failures print one JSON line to stderr and exit with:

    0 ok, 1 internal error, 2 config error, 3 artifact mismatch, 4 schema mismatch
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from . import harness
from .dsp import MelConfig
from .engine import AdaptConfig, derive_seed, initial_state, load_run, save_run, write_trace
from .errors import ArtifactMismatch, ConfigError, MCTTAError, SchemaMismatch
from .gradcheck import run_suite
from .harness import DomainShiftSpec, SyntheticDatasetSpec
from .toy_alm import PretrainConfig, ToyALM

log = logging.getLogger("mctta")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_SCHEMA = 0, 1, 2, 3, 4

# pretraining keys that would collide with adaptation keys carry a prefix
PRETRAIN_PREFIX = "pretrain_"
DATASET_KEYS = [f.name for f in fields(SyntheticDatasetSpec) if f.name not in ("seed", "sample_rate")]
MEL_KEYS = [f.name for f in fields(MelConfig)]
ADAPT_KEYS = [f.name for f in fields(AdaptConfig) if f.name != "seed"]
PRETRAIN_KEYS = [PRETRAIN_PREFIX + f.name for f in fields(PretrainConfig)]
EXTRA_DEFAULTS = {
    "seed": 0,
    "shift": "combined:5:-3",
    "shifts": ["additive_noise:5", "spectral_tilt:-3", "combined:5:-3"],
    "train_per_class": 64,
    "heldout_per_class": 16,
    "model_hash": None,
}
DEFAULT_GRAD_TOL = 1e-4


def default_config() -> dict:
    cfg = {}
    cfg.update(asdict(MelConfig()))
    cfg.update({k: v for k, v in asdict(SyntheticDatasetSpec()).items() if k in DATASET_KEYS})
    cfg.update({k: v for k, v in asdict(AdaptConfig()).items() if k in ADAPT_KEYS})
    cfg.update({PRETRAIN_PREFIX + k: v for k, v in asdict(PretrainConfig()).items()})
    cfg.update(EXTRA_DEFAULTS)
    cfg["am_rates"] = list(cfg["am_rates"])
    return cfg


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if not isinstance(value, type(default)):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then flag overrides; every key type-checked."""
    cfg = default_config()
    layers = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a flat mapping")
        layers.append(doc)
    layers.append(overrides or {})
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in layer.items():
            cfg[k] = _coerce(k, v, cfg[k])
    validate(cfg)
    return cfg


@dataclass
class Parts:
    mel: MelConfig
    dataset: SyntheticDatasetSpec
    adapt: AdaptConfig
    pretrain: PretrainConfig
    shift: DomainShiftSpec
    shifts: list[DomainShiftSpec]


def split(cfg: dict) -> Parts:
    seed = cfg["seed"]
    mel = MelConfig(**{k: cfg[k] for k in MEL_KEYS})
    ds = SyntheticDatasetSpec(
        **{k: cfg[k] for k in DATASET_KEYS},
        sample_rate=mel.sample_rate,
        seed=derive_seed(seed, "test"),
    )
    ds = replace(ds, am_rates=tuple(float(r) for r in ds.am_rates))
    adapt = AdaptConfig(**{k: cfg[k] for k in ADAPT_KEYS}, seed=derive_seed(seed, "adapt"))
    pre = PretrainConfig(**{k[len(PRETRAIN_PREFIX):]: cfg[k] for k in PRETRAIN_KEYS})
    shift_seed = derive_seed(seed, "shift")
    shift = DomainShiftSpec.parse(cfg["shift"], seed=shift_seed)
    shifts = [DomainShiftSpec.parse(s, seed=shift_seed) for s in cfg["shifts"]]
    return Parts(mel, ds, adapt, pre, shift, shifts)


def validate(cfg: dict) -> None:
    parts = split(cfg)
    parts.mel.validate()
    parts.dataset.validate(parts.mel)
    parts.adapt.validate()
    if parts.pretrain.epochs < 1:
        raise ConfigError("pretrain_epochs must be >= 1")
    if cfg["train_per_class"] < 1 or cfg["heldout_per_class"] < 1:
        raise ConfigError("train_per_class and heldout_per_class must be >= 1")


def echo_config(cfg: dict) -> dict:
    """The effective config minus the seed, which is what report rows hash."""
    eff = dict(cfg)
    adapt = split(cfg).adapt.effective()
    eff["lr"], eff["n_views"] = adapt.lr, adapt.n_views
    eff.pop("seed")
    return eff


# -- commands -----------------------------------------------------------------


def _load_model(path: str, cfg: dict) -> ToyALM:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model = ToyALM.load(p)
    if cfg["model_hash"] is not None and cfg["model_hash"] != model.model_hash:
        raise ArtifactMismatch(f"checkpoint {path} has model hash {model.model_hash}, config expects {cfg['model_hash']}")
    return model


def _load_dataset(path: str):
    if not Path(path).is_dir():
        raise ConfigError(f"dataset directory not found: {path}")
    return harness.load_dataset(path)


def _write_configs(path: Path, configs: dict[str, dict]) -> None:
    path.write_text(json.dumps(configs, sort_keys=True, indent=1, default=str) + "\n")


def cmd_make_dataset(args, cfg: dict) -> int:
    parts = split(cfg)
    data = harness.gen_dataset(parts.dataset, parts.mel)
    shift = DomainShiftSpec.parse(args.shift, seed=parts.shift.seed) if args.shift else parts.shift
    data = harness.apply_shift(data, shift)
    harness.save_dataset(args.out, data, {"shift": shift.name, "config": cfg})
    print(f"wrote {len(data)} clips ({shift.name}) to {args.out}")
    return EXIT_OK


def cmd_pretrain(args, cfg: dict) -> int:
    parts = split(cfg)
    model, acc = harness.build_model(
        parts.dataset, parts.mel, parts.pretrain, seed=cfg["seed"],
        train_per_class=cfg["train_per_class"], heldout_per_class=cfg["heldout_per_class"],
    )
    model.save(args.out)
    print(json.dumps({"heldout_zero_shot_accuracy": acc, "model_hash": model.model_hash, "path": str(args.out)}))
    return EXIT_OK


def _labels_known(labels) -> bool:
    return bool(len(labels)) and bool((labels >= 0).all())


def cmd_adapt(args, cfg: dict) -> int:
    parts = split(cfg)
    model = _load_model(args.checkpoint, cfg)
    data = _load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.init_run:
        header, theta, _ = load_run(args.init_run)
        if header["model_hash"] != model.model_hash:
            raise ArtifactMismatch(f"{args.init_run} was adapted against model {header['model_hash']}")
        state = initial_state(model, parts.adapt).with_theta(theta)
    mels = harness.features(data.waveforms, model)
    echo = echo_config(cfg)
    h = harness.config_hash(echo)
    if _labels_known(data.labels):
        rep = harness.evaluate_tta(mels, data.labels, model, parts.adapt, echo=echo, state=state)
        row, run = rep.row(), rep.run
    else:
        from .engine import run as run_engine

        run = run_engine(mels, model, parts.adapt, state=state)
        row = {"schema_version": harness.REPORT_SCHEMA_VERSION, "config_hash": h, "zero_shot_acc": "", "adapted_acc": "", "delta": ""}
    row["seed"] = cfg["seed"]
    save_run(out / "run.bin", run)
    write_trace(out / "trace.jsonl", run)
    harness.write_csv(out / "report.csv", [row])
    _write_configs(out / "config.json", {h: echo})
    print(json.dumps({k: row[k] for k in ("config_hash", "zero_shot_acc", "adapted_acc", "delta")}))
    return EXIT_OK


def cmd_ablate(args, cfg: dict) -> int:
    parts = split(cfg)
    model = _load_model(args.checkpoint, cfg)
    data = _load_dataset(args.dataset)
    if not _labels_known(data.labels):
        raise ConfigError(f"{args.dataset}: ablation needs labeled clips")
    mels = harness.features(data.waveforms, model)
    echo = echo_config(cfg)
    results = harness.ablation_matrix(mels, data.labels, model, parts.adapt, echo=echo, jobs=args.jobs)
    rows, configs = [], {}
    for row, rep in results:
        row["seed"] = cfg["seed"]
        rows.append(row)
        configs[rep.config_hash] = rep.config
    out = Path(args.out)
    harness.write_csv(out, rows)
    _write_configs(out.with_suffix(".configs.json"), configs)
    print(f"wrote {len(rows)} ablation rows to {out}")
    return EXIT_OK


def cmd_crossdomain(args, cfg: dict) -> int:
    parts = split(cfg)
    model = _load_model(args.checkpoint, cfg)
    clean = _load_dataset(args.dataset) if args.dataset else harness.gen_dataset(parts.dataset, parts.mel)
    res = harness.cross_domain_matrix(clean, parts.shifts, model, parts.adapt)
    echo = echo_config(cfg)
    h = harness.config_hash(echo)
    rows = [{"schema_version": harness.REPORT_SCHEMA_VERSION, "config_hash": h, "seed": cfg["seed"], **r} for r in res.rows()]
    out = Path(args.out)
    harness.write_csv(out, rows)
    _write_configs(out.with_suffix(".configs.json"), {h: echo})
    print(f"wrote {len(rows)}x{len(res.shifts)} cross-domain matrix to {out}")
    return EXIT_OK


def cmd_report(args, cfg: dict) -> int:
    rows = []
    for path in args.inputs:
        if not Path(path).is_file():
            raise ConfigError(f"report input not found: {path}")
        rows.extend(harness.read_csv(path))
    if not rows:
        raise ConfigError("report inputs contain no rows")
    summary = harness.summarize(rows)
    harness.write_csv(args.out, summary)
    print(f"wrote {len(summary)} summary rows to {args.out}")
    return EXIT_OK


def cmd_check_grad(args, cfg: dict) -> int:
    results = run_suite(args.instances, seed=cfg["seed"])
    worst = max(r.max_rel_error for r in results)
    print(json.dumps({"instances": len(results), "max_rel_error": worst, "tolerance": args.tol}))
    if worst >= args.tol:
        raise MCTTAError(f"gradient check failed: max relative error {worst:.3g} >= {args.tol:g}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mctta", description="Test-time prompt adaptation on a toy audio-text model.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, runs: bool = True):
        p.add_argument("--config", help="flat YAML or JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        if runs:
            p.add_argument("--mode", choices=["episodic", "online"])
            p.add_argument("--batch-size", type=int)
            p.add_argument("--steps", type=int, help="optimization steps per batch")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("make-dataset", help="render a (shifted) synthetic test set"), runs=False)
    p.add_argument("--shift", help="shift spec, e.g. combined:5:-3 (default: config 'shift')")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_dataset)

    p = common(sub.add_parser("pretrain", help="pretrain and save the frozen toy model"), runs=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("adapt", help="adapt prompts on a dataset"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--init-run", help="start from the final prompt parameters of an earlier run")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_adapt)

    p = common(sub.add_parser("ablate", help="loss/net variant x depth x width matrix"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("crossdomain", help="adapt on one shift, test on every shift"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="clean dataset (default: generated from config)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crossdomain)

    p = common(sub.add_parser("report", help="merge run CSVs into per-config means"), runs=False)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = common(sub.add_parser("check-grad", help="finite-difference check of the adaptation gradient"), runs=False)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tol", type=float, default=DEFAULT_GRAD_TOL)
    p.set_defaults(func=cmd_check_grad)
    return ap


def _overrides(args) -> dict:
    out = _parse_set(args.set)
    for flag, key in (("seed", "seed"), ("mode", "mode"), ("batch_size", "batch_size"), ("steps", "steps_per_batch")):
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = val
    return out


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return args.func(args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except ArtifactMismatch as exc:
        return _fail(EXIT_ARTIFACT, exc)
    except SchemaMismatch as exc:
        return _fail(EXIT_SCHEMA, exc)
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit 1
        log.debug("internal error", exc_info=True)
        return _fail(EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
