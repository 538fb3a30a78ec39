"""Command-line front end: ``glha gen|prior|train|eval|theorem|posebench``.

Every command reads one JSON run config. Unknown keys are rejected and all
randomness derives from its top-level ``seed``. Relative paths resolve
against ``--out`` (default: the config file's directory).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .autodiff import load_checkpoint, save_checkpoint
from .guided_loss import theorem_suite
from .network import CascadeConfig, CascadeModel, ConfigError, OracleModel
from .ransac import RansacConfig
from .ratio_prior import PriorModel, fit_empirical_pdfs
from .synth import SceneConfig, generate_dataset, read_dataset
from .training import POST_MODES, TrainingError, curve_columns, evaluate, evaluate_raw_ransac, train

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
COMMANDS = ("gen", "prior", "train", "eval", "theorem", "posebench")

SECTION_DEFAULTS = {
    "dataset": {"n_pairs": 100, "splits": [0.8, 0.1, 0.1]},
    "paths": {"data_dir": "data", "prior": "prior.json", "checkpoint": "model.glha"},
    "eval": {"split": "test", "post": "weighted8pt", "model": "checkpoint"},
    "theorem": {"n_samples": 10_000, "guidance": [0.2, 0.25, 0.3, 0.5, 1.0, 2.0]},
    "posebench": {"split": "test"},
}
DATACLASS_SECTIONS = {"scene": SceneConfig, "model": CascadeConfig, "ransac": RansacConfig}
TOP_LEVEL = {"seed", *SECTION_DEFAULTS, *DATACLASS_SECTIONS}


@dataclasses.dataclass
class RunConfig:
    seed: int
    scene: SceneConfig
    model: CascadeConfig
    ransac: RansacConfig
    sections: dict  # plain dict sections with defaults filled in
    root: Path

    def resolved(self) -> dict:
        """The full configuration as JSON-ready data (embedded in every output)."""
        out = {"seed": self.seed,
               "scene": dataclasses.asdict(self.scene),
               "model": self.model.to_dict(),
               "ransac": dataclasses.asdict(self.ransac)}
        out.update(self.sections)
        return out

    def path(self, key: str) -> Path:
        p = Path(self.sections["paths"][key])
        return p if p.is_absolute() else self.root / p

    def split_path(self, split: str) -> Path:
        return self.path("data_dir") / f"{split}.jsonl"


def _check_keys(where: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _dataclass_section(name: str, cls, values: dict, seed: int):
    fields = {f.name for f in dataclasses.fields(cls)} - {"seed"}
    _check_keys(name, values, fields)
    try:
        return cls(**values, seed=seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(doc: dict, root: Path) -> RunConfig:
    _check_keys("config", doc, TOP_LEVEL)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    built = {name: _dataclass_section(name, cls, doc.get(name, {}), seed)
             for name, cls in DATACLASS_SECTIONS.items()}
    sections = {}
    for name, defaults in SECTION_DEFAULTS.items():
        given = doc.get(name, {})
        _check_keys(name, given, defaults)
        sections[name] = {**defaults, **given}
    ds = sections["dataset"]
    if not isinstance(ds["n_pairs"], int) or ds["n_pairs"] < 3:
        raise ConfigError("dataset.n_pairs must be an integer >= 3")
    if len(ds["splits"]) != 3 or any(not isinstance(r, (int, float)) or r < 0 for r in ds["splits"]):
        raise ConfigError("dataset.splits must be three nonnegative numbers")
    if sections["eval"]["post"] not in POST_MODES:
        raise ConfigError(f"eval.post must be one of {POST_MODES}")
    if sections["eval"]["model"] not in ("checkpoint", "oracle"):
        raise ConfigError("eval.model must be 'checkpoint' or 'oracle'")
    for key in ("eval", "posebench"):
        if sections[key]["split"] not in ("train", "val", "test"):
            raise ConfigError(f"{key}.split must be train, val or test")
    th = sections["theorem"]
    if not isinstance(th["n_samples"], int) or th["n_samples"] < 1:
        raise ConfigError("theorem.n_samples must be a positive integer")
    if not th["guidance"] or any(not isinstance(n, (int, float)) or n <= 0 for n in th["guidance"]):
        raise ConfigError("theorem.guidance must be a nonempty list of positive numbers")
    return RunConfig(seed, built["scene"], built["model"], built["ransac"], sections, root)


def load_config(path: Path, out: Path | None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(doc, out if out is not None else Path(path).resolve().parent)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _read_split(cfg: RunConfig, split: str):
    path = cfg.split_path(split)
    if not path.exists():
        raise FileNotFoundError(f"dataset split not found: {path} (run 'glha gen' first)")
    return read_dataset(path)


def _load_prior(cfg: RunConfig) -> PriorModel:
    path = cfg.path("prior")
    if not path.exists():
        raise FileNotFoundError(f"prior not found: {path} (run 'glha prior' first)")
    return PriorModel.from_json(path.read_text())


# ------------------------------------------------------------------ commands


def cmd_gen(cfg: RunConfig) -> dict:
    ds = cfg.sections["dataset"]
    splits = generate_dataset(cfg.scene, ds["n_pairs"], tuple(ds["splits"]), cfg.path("data_dir"))
    counts = {k: len(v) for k, v in splits.items()}
    report = {"config": cfg.resolved(), "pairs": counts,
              "files": {k: str(cfg.split_path(k)) for k in splits}}
    _write_json(cfg.root / "gen.json", report)
    return report


def cmd_prior(cfg: RunConfig) -> dict:
    model = fit_empirical_pdfs(_read_split(cfg, "train"))
    doc = json.loads(model.to_json())
    doc["config"] = cfg.resolved()
    _write_json(cfg.path("prior"), doc)
    return {"prior": str(cfg.path("prior"))}


def cmd_train(cfg: RunConfig) -> dict:
    train_pairs = _read_split(cfg, "train")
    val_path = cfg.split_path("val")
    val_pairs = read_dataset(val_path) if val_path.exists() else None
    prior = _load_prior(cfg)
    result = train(train_pairs, cfg.model, prior, val_pairs)
    save_checkpoint(cfg.path("checkpoint"), result.model.store, {"config": cfg.resolved()})
    cols = curve_columns(cfg.model)
    with open(cfg.root / "curves.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in result.curves:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in cols})
    summary = {"config": cfg.resolved(), "iterations": cfg.model.iters,
               "skipped_regression_steps": result.skipped_regression_steps,
               "parameters": result.model.store.count(),
               "final_curve_row": result.curves[-1] if result.curves else None}
    _write_json(cfg.root / "train.json", summary)
    return {"checkpoint": str(cfg.path("checkpoint"))}


def _load_model(cfg: RunConfig) -> CascadeModel:
    path = cfg.path("checkpoint")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path} (run 'glha train' first)")
    store, meta = load_checkpoint(path)
    model_cfg = CascadeConfig(**meta["config"]["model"])
    return CascadeModel(model_cfg, store)


def cmd_eval(cfg: RunConfig) -> dict:
    ev = cfg.sections["eval"]
    pairs = _read_split(cfg, ev["split"])
    if ev["model"] == "oracle":
        model, prior, final_n = OracleModel(), None, 1.0
    else:
        model, prior = _load_model(cfg), _load_prior(cfg)
        final_n = model.config.guidance[-1]
    metrics = evaluate(model, pairs, prior, ev["post"], cfg.ransac, guidance_final=final_n)
    metrics["config"] = cfg.resolved()
    _write_json(cfg.root / "metrics.json", metrics)
    return metrics["summary"]


def cmd_theorem(cfg: RunConfig) -> dict:
    th = cfg.sections["theorem"]
    report = theorem_suite(th["n_samples"], th["guidance"], seed=cfg.seed)
    report["config"] = cfg.resolved()
    _write_json(cfg.root / "report.json", report)
    return {k: report[k] for k in ("max_residual", "max_linear_product", "fallback_rate", "failures")}


def cmd_posebench(cfg: RunConfig) -> dict:
    pairs = _read_split(cfg, cfg.sections["posebench"]["split"])
    model, prior = _load_model(cfg), _load_prior(cfg)
    bench = {"raw_ransac": evaluate_raw_ransac(pairs, cfg.ransac)}
    for post in POST_MODES:
        s = evaluate(model, pairs, prior, post, cfg.ransac, guidance_final=model.config.guidance[-1])["summary"]
        bench[f"classifier+{post}"] = {k: s[k] for k in ("mAP@5", "mAP@10", "pose_failures", "pairs")}
    bench["config"] = cfg.resolved()
    _write_json(cfg.root / "posebench.json", bench)
    return {k: v for k, v in bench.items() if k != "config"}


HANDLERS = {"gen": cmd_gen, "prior": cmd_prior, "train": cmd_train, "eval": cmd_eval,
            "theorem": cmd_theorem, "posebench": cmd_posebench}


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, TrainingError):
        err["diagnostics"] = exc.diagnostics
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="glha", description="Guided-loss correspondence toolkit")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--deterministic", action="store_true", help="force single-threaded numerics")
    ap.add_argument("--out", type=Path, help="output directory (default: next to the config)")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, args.out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    cfg.root.mkdir(parents=True, exist_ok=True)
    limit = threadpool_limits(1) if args.deterministic else contextlib.nullcontext()
    try:
        with limit:
            result = HANDLERS[args.command](cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except Exception as exc:  # surfaced as a structured runtime failure
        return _fail(EXIT_RUNTIME, exc)
    print(json.dumps(result, sort_keys=True, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
