"""``ktd``: command-line front end for the whole workflow.

Commands (typical order)::

    ktd synth        # triage / pretraining / longitudinal manifests
    ktd pretrain     # multi-head network        -> ap.ktdw
    ktd finetune     # 3-class teacher           -> rf.ktdw
    ktd distill      # compact student           -> ms.ktdw   (--plain: no teacher)
    ktd eval         # accuracy, AUROC, ROC points for a checkpoint
    ktd traj         # trajectory classifier on the frozen student
    ktd sweep        # alpha / T / loss grid, two-block table
    ktd complexity   # parameter and MAC counts

Configuration is one YAML file layered over built-in defaults; every key
also has a dotted flag (``--train.distill.epochs 5``). Each invocation
writes to ``<root>/<command>-<timestamp>-s<seed>/``, starting with the
fully resolved ``config.yaml``. ``root`` is ``--output-root``, else
``$KTD_OUTPUT_ROOT``, else ``./runs``. Upstream artifacts come from
explicit ``inputs.*`` / ``data.dir`` paths or, failing that, the latest
run of the producing command under the same root.

Exit codes: 0 ok, 2 config error, 3 stage-order error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from collections import defaultdict
from dataclasses import asdict, replace
from functools import partial
from pathlib import Path

import yaml

from . import datakit, evalkit, nets, pipeline, trajectory
from .datakit import ScoredImage, SplitSpec
from .losses import ArcFaceConfig, DistillConfig, PCConfig
from .nets import NetworkSpec
from .pipeline import TrainConfig

COMMANDS = ("synth", "pretrain", "finetune", "distill", "eval", "traj", "sweep", "complexity")
EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_RUNTIME = 0, 2, 3, 4
ENV_ROOT = "KTD_OUTPUT_ROOT"


class ConfigError(Exception):
    pass


class StageOrderError(Exception):
    pass


# ---------------------------------------------------------------- config schema

def _train_section(**overrides):
    d = asdict(replace(TrainConfig(), **overrides))
    d.pop("seed")  # always the global seed
    return d


def _triage_section():
    d = asdict(datakit.TriageConfig())
    for k in ("class_names", "seed", "images_per_class", "image_size"):
        d.pop(k)
    d["roi_center"] = list(d["roi_center"])
    d["contrast_range"] = list(d["contrast_range"])
    d["empty_classes"] = list(d["empty_classes"])
    return d


def _longitudinal_section():
    d = asdict(datakit.LongitudinalConfig())
    for k in ("seed", "image_size"):
        d.pop(k)
    for k in ("timepoint_counts", "mix", "roi_center"):
        d[k] = list(d[k])
    return d


def default_config() -> dict:
    """Every key the CLI understands, with its default value."""
    return {
        "seed": 0,
        "output_root": "",
        "data": {
            "dir": "",
            "train_per_class": 200,
            "val_per_class": 30,
            "test_per_class": 60,
            "pretrain_per_class": 100,
            "triage": _triage_section(),
            "longitudinal": _longitudinal_section(),
        },
        "nets": {
            "image_size": 32,
            "teacher_feature_width": 64,
            "student_feature_width": 32,
        },
        "train": {
            "pretrain": _train_section(epochs=30),
            "finetune": {**_train_section(epochs=20), "transfer": True},
            "distill": _train_section(epochs=30),
        },
        "distill": {
            "alpha": 0.8,
            "temperature": 5.0,
            "student_loss": "pc",
            "plain": False,
            "pc": {"xi": 0.8},
            "arcface": {"scale_s": 30.0, "margin_m": 0.5},
        },
        "inputs": {"ap_checkpoint": "", "rf_checkpoint": "", "ms_checkpoint": ""},
        "eval": {"network": "ms", "split": "test"},
        "traj": {
            "scheme": "concatenation",
            "kind": "fc2",
            "hidden": 32,
            "dropout_rate": 0.5,
            "l2": 1e-3,
            "train": _train_section(epochs=50, batch_size=10),
        },
        "sweep": {
            "alphas": [0.2, 0.4, 0.6, 0.8],
            "temperatures": [1.0, 5.0, 10.0],
            "fixed_alpha": 0.8,
            "fixed_temperature": 5.0,
            "losses": ["pc:0.8", "pc:0.995", "arcface", "softmax"],
            "seeds": [0],
            "jobs": 1,
        },
        "complexity": {"networks": ["ap", "rf", "ms"]},
    }


def _leaves(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _leaves(v, key + ".")
        else:
            yield key, v


def _coerce(key, value, default):
    """Check ``value`` against the type of ``default``; ints widen to floats."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, (list, tuple)):
            if default and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in default):
                if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value):
                    raise ConfigError(f"{key}: expected a list of numbers, got {value!r}")
                kind = float if any(isinstance(x, float) for x in default) else int
                if kind is int and any(isinstance(x, float) for x in value):
                    raise ConfigError(f"{key}: expected a list of integers, got {value!r}")
                return [kind(x) for x in value]
            if default and all(isinstance(x, str) for x in default):
                if not all(isinstance(x, str) for x in value):
                    raise ConfigError(f"{key}: expected a list of strings, got {value!r}")
            return list(value)
    raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")


def merge(base: dict, update: dict, prefix="") -> dict:
    """``base`` overlaid with ``update``; unknown keys and type clashes raise."""
    out = copy.deepcopy(base)
    if not isinstance(update, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            out[k] = merge(base[k], v, key + ".")
        else:
            out[k] = _coerce(key, v, base[k])
    return out


def set_dotted(cfg: dict, key: str, raw: str):
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node[p]
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        raise ConfigError(f"--{key}: cannot parse {raw!r}") from None
    if isinstance(node[parts[-1]], str) and value is None:
        value = ""
    elif isinstance(node[parts[-1]], str) and not isinstance(value, str):
        value = raw
    node[parts[-1]] = _coerce(key, value, node[parts[-1]])


def _train_config(section, seed):
    kw = {k: v for k, v in section.items() if k != "transfer"}
    return TrainConfig(seed=seed, **kw)


def _loss_variants(names):
    out = []
    for name in names:
        kind, _, xi = name.partition(":")
        if kind not in ("pc", "arcface", "softmax"):
            raise ConfigError(f"sweep.losses: unknown loss {name!r}")
        if xi and kind != "pc":
            raise ConfigError(f"sweep.losses: only pc takes a margin, got {name!r}")
        try:
            out.append(evalkit.LossVariant(kind, float(xi)) if xi else evalkit.LossVariant(kind))
        except ValueError:
            raise ConfigError(f"sweep.losses: bad margin in {name!r}") from None
    return tuple(out)


def validate(cfg: dict):
    """Build every typed config once so bad values fail before any work starts."""
    try:
        seed = cfg["seed"]
        if seed < 0:
            raise ValueError("seed must be non-negative")
        d = cfg["data"]
        for k in ("train_per_class", "val_per_class", "test_per_class", "pretrain_per_class"):
            if d[k] < 1:
                raise ValueError(f"data.{k} must be >= 1")
        # one image per class is enough to exercise the generator's geometry checks
        datakit.synth_triage(replace(triage_config(cfg, "train"), images_per_class=1))
        longitudinal_config(cfg)
        for which in ("ap", "rf", "ms"):
            build_spec(cfg, which)
        for stage in ("pretrain", "finetune", "distill"):
            _train_config(cfg["train"][stage], seed)
        distill_config(cfg)
        if cfg["eval"]["network"] not in ("ms", "rf"):
            raise ValueError("eval.network must be 'ms' or 'rf'")
        if cfg["eval"]["split"] not in ("train", "val", "test"):
            raise ValueError("eval.split must be train, val or test")
        traj_config(cfg)
        if cfg["traj"]["scheme"] not in trajectory.SCHEMES:
            raise ValueError(f"traj.scheme must be one of {trajectory.SCHEMES}")
        s = cfg["sweep"]
        variants = _loss_variants(s["losses"])
        evalkit.SweepGrid(tuple(s["alphas"]), (s["fixed_temperature"],), variants, tuple(s["seeds"]))
        evalkit.SweepGrid((s["fixed_alpha"],), tuple(s["temperatures"]), variants, tuple(s["seeds"]))
        for a in s["alphas"] + [s["fixed_alpha"]]:
            DistillConfig(alpha=a)
        for t in s["temperatures"] + [s["fixed_temperature"]]:
            DistillConfig(temperature=t)
        if s["jobs"] < 1:
            raise ValueError("sweep.jobs must be >= 1")
        bad = [x for x in cfg["complexity"]["networks"] if x not in ("ap", "rf", "ms")]
        if bad:
            raise ValueError(f"complexity.networks: unknown networks {bad}")
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def triage_config(cfg, split):
    d = dict(cfg["data"]["triage"])
    for k in ("roi_center", "contrast_range", "empty_classes"):
        d[k] = tuple(d[k])
    seed = cfg["seed"]
    per = {"train": ("train_per_class", 1), "val": ("val_per_class", 2), "test": ("test_per_class", 3),
           "pretrain": ("pretrain_per_class", 4)}
    key, offset = per[split]
    names = datakit.AP_DISEASES if split == "pretrain" else datakit.TRIAGE_CLASSES
    d["image_size"] = cfg["nets"]["image_size"]
    return datakit.TriageConfig(class_names=names, images_per_class=cfg["data"][key], seed=10 * seed + offset, **d)


def longitudinal_config(cfg):
    d = dict(cfg["data"]["longitudinal"])
    for k in ("timepoint_counts", "mix", "roi_center"):
        d[k] = tuple(d[k])
    d["image_size"] = cfg["nets"]["image_size"]
    c = datakit.LongitudinalConfig(seed=cfg["seed"], **d)
    if sum(c.timepoint_counts) != c.n_patients:
        raise ValueError("data.longitudinal: timepoint_counts must sum to n_patients")
    return c


def distill_config(cfg):
    d = cfg["distill"]
    alpha = 0.0 if d["plain"] else d["alpha"]
    return DistillConfig(alpha=alpha, temperature=d["temperature"], student_loss=d["student_loss"],
                         pc=PCConfig(d["pc"]["xi"]), arcface=ArcFaceConfig(**d["arcface"]))


def traj_config(cfg):
    t = cfg["traj"]
    return trajectory.TrajClassifierConfig(kind=t["kind"], hidden=t["hidden"], dropout_rate=t["dropout_rate"],
                                           train=_train_config(t["train"], cfg["seed"]), l2=t["l2"])


# ---------------------------------------------------------------- networks

def build_spec(cfg, which, loss_kind=None):
    n = cfg["nets"]
    if which == "ap":
        return pipeline.ap_spec(n["image_size"], feature_width=n["teacher_feature_width"])
    if which == "rf":
        return pipeline.rf_spec(n["image_size"], feature_width=n["teacher_feature_width"])
    kind = loss_kind or cfg["distill"]["student_loss"]
    return pipeline.ms_spec(n["image_size"], loss_kind=kind, feature_width=n["student_feature_width"],
                            arcface_scale=cfg["distill"]["arcface"]["scale_s"])


def _save_net(run: Path, name, spec: NetworkSpec, bundle):
    nets.save_checkpoint(bundle, run / f"{name}.ktdw")
    (run / f"{name}.spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1, default=list) + "\n")


def _load_net(path: Path):
    spec_path = path.with_name(path.stem + ".spec.json")
    if not spec_path.exists():
        raise FileNotFoundError(f"no network description next to {path} (expected {spec_path.name})")
    spec = NetworkSpec.from_dict(json.loads(spec_path.read_text()))
    return spec, nets.load_checkpoint(path, spec)


# ---------------------------------------------------------------- run directories

class Run:
    def __init__(self, command, cfg, root: Path):
        self.command, self.cfg, self.root = command, cfg, root
        self.dir: Path | None = None

    def open(self):
        self.root.mkdir(parents=True, exist_ok=True)
        stamp = time.strftime("%Y%m%d-%H%M%S") + f"{time.time() % 1:.6f}"[1:].replace(".", "-")
        base = f"{self.command}-{stamp}-s{self.cfg['seed']}"
        path, k = self.root / base, 1
        while path.exists():
            path, k = self.root / f"{base}-{k}", k + 1
        path.mkdir()
        (path / "config.yaml").write_text(yaml.safe_dump(self.cfg, sort_keys=True, default_flow_style=False))
        self.dir = path
        return path

    def latest(self, command):
        """Most recent completed run of ``command`` under the same root."""
        runs = sorted(p for p in self.root.glob(f"{command}-*") if (p / "DONE").exists())
        return runs[-1] if runs else None

    def need(self, key, command, filename, what):
        """Path of an upstream artifact: explicit config path, else the latest run."""
        explicit = self.cfg["inputs"].get(key, "") if key else self.cfg["data"]["dir"]
        if explicit:
            p = Path(explicit)
            if key is None:
                p = p / filename
            if not p.exists():
                raise StageOrderError(f"stage order: {what} not found at {p}; run 'ktd {command}' first")
            return p
        prev = self.latest(command)
        if prev is None or not (prev / filename).exists():
            raise StageOrderError(f"stage order: no {what} under {self.root}; run 'ktd {command}' first")
        return prev / filename


def _dataset(run: Run, split):
    return datakit.load_manifest(run.need(None, "synth", f"{split}.csv", f"{split} manifest"))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------- commands

def cmd_synth(run: Run):
    cfg = run.cfg
    for split in ("train", "val", "test", "pretrain"):
        tc = triage_config(cfg, split)
        ds = datakit.synth_triage(tc)
        prov = {"generator": "triage", "split": split, "config": datakit.config_dict(tc)}
        datakit.save_manifest(ds, run.dir / f"{split}.csv", f"{split}_images", prov)
    lc = longitudinal_config(cfg)
    patients = datakit.synth_longitudinal(lc)
    prov = {"generator": "longitudinal", "config": datakit.config_dict(lc)}
    datakit.save_manifest(datakit.longitudinal_dataset(patients), run.dir / "longitudinal.csv",
                          "longitudinal_images", prov)
    summary = {"triage": {s: len(datakit.load_manifest(run.dir / f"{s}.csv")) for s in ("train", "val", "test")},
               "pretrain": len(datakit.load_manifest(run.dir / "pretrain.csv")),
               "patients": len(patients),
               "sequences": sum(len(p) - 1 for p in patients)}
    _write_json(run.dir / "report.json", summary)


def cmd_pretrain(run: Run):
    data = _dataset(run, "pretrain")
    spec = build_spec(run.cfg, "ap")
    res = pipeline.pretrain_ap(spec, data, _train_config(run.cfg["train"]["pretrain"], run.cfg["seed"]))
    _save_net(run.dir, "ap", spec, res.bundle)
    pipeline.write_log(res.history, run.dir / "log.tsv")
    x, y = data.arrays()
    _write_json(run.dir / "report.json", {"train_accuracy": pipeline.evaluate_accuracy(spec, res.bundle, x, y),
                                          "final_loss": res.history[-1].train_loss})


def cmd_finetune(run: Run):
    cfg = run.cfg
    section = cfg["train"]["finetune"]
    train, val, test = (_dataset(run, s) for s in ("train", "val", "test"))
    ap_spec, ap_bundle = build_spec(cfg, "ap"), None
    if section["transfer"]:
        ap_spec, ap_bundle = _load_net(run.need("ap_checkpoint", "pretrain", "ap.ktdw", "pretrained checkpoint"))
    spec = build_spec(cfg, "rf")
    res = pipeline.finetune_rf(ap_bundle, ap_spec, spec, train, _train_config(section, cfg["seed"]), val=val,
                               transfer=section["transfer"])
    _save_net(run.dir, "rf", spec, res.bundle)
    pipeline.write_log(res.history, run.dir / "log.tsv")
    echo = {"network": "rf", "seed": cfg["seed"], "best_epoch": res.state.best_epoch,
            "transfer": section["transfer"]}
    (run.dir / "report.json").write_text(evalkit.evaluate(spec, res.bundle, test, config=echo).to_json() + "\n")


def cmd_distill(run: Run):
    cfg = run.cfg
    dc = distill_config(cfg)
    train, val, test = (_dataset(run, s) for s in ("train", "val", "test"))
    spec = build_spec(cfg, "ms")
    tc = _train_config(cfg["train"]["distill"], cfg["seed"])
    if dc.alpha == 0.0:
        res = pipeline.train_plain(spec, train, dc.student_loss, tc, val=val, dconfig=dc)
    else:
        rf_spec, rf_bundle = _load_net(run.need("rf_checkpoint", "finetune", "rf.ktdw", "fine-tuned checkpoint"))
        res = pipeline.distill_ms(rf_bundle, rf_spec, spec, train, dc, tc, val=val)
    _save_net(run.dir, "ms", spec, res.bundle)
    pipeline.write_log(res.history, run.dir / "log.tsv")
    echo = {"network": "ms", "alpha": dc.alpha, "temperature": dc.temperature, "loss": dc.student_loss,
            "xi": dc.pc.xi, "seed": cfg["seed"], "best_epoch": res.state.best_epoch}
    (run.dir / "report.json").write_text(evalkit.evaluate(spec, res.bundle, test, config=echo).to_json() + "\n")


def cmd_eval(run: Run):
    cfg = run.cfg
    which = cfg["eval"]["network"]
    if which == "ms":
        path = run.need("ms_checkpoint", "distill", "ms.ktdw", "student checkpoint")
    else:
        path = run.need("rf_checkpoint", "finetune", "rf.ktdw", "fine-tuned checkpoint")
    spec, bundle = _load_net(path)
    data = _dataset(run, cfg["eval"]["split"])
    rep = evalkit.evaluate(spec, bundle, data, config={"network": which, "split": cfg["eval"]["split"],
                                                       "fingerprint": spec.fingerprint()})
    (run.dir / "report.json").write_text(rep.to_json() + "\n")
    for task, pts in rep.roc.items():
        evalkit.write_roc_points(pts, run.dir / f"roc_{task}.txt")


def load_patients(path):
    """Rebuild per-patient chronological lists from a longitudinal manifest."""
    ds = datakit.load_manifest(path)
    groups = defaultdict(list)
    for it in ds.items:
        if it.timepoint is None or it.opacity_score is None:
            raise ValueError(f"{path}: longitudinal rows need a timepoint and a score")
        groups[it.patient_id].append(ScoredImage(it, it.opacity_score, it.timepoint))
    return [sorted(groups[p], key=lambda s: s.timepoint) for p in sorted(groups)]


def cmd_traj(run: Run):
    cfg = run.cfg
    ms_spec, ms_bundle = _load_net(run.need("ms_checkpoint", "distill", "ms.ktdw", "student checkpoint"))
    patients = load_patients(run.need(None, "synth", "longitudinal.csv", "longitudinal manifest"))
    seqs = trajectory.all_sequences(patients)
    train, val, test = datakit.split_by_patient(seqs, SplitSpec(seed=cfg["seed"], stratify=False),
                                                patient_of=lambda s: s.patient_id, class_of=lambda s: s.label)
    scheme = cfg["traj"]["scheme"]
    clf = trajectory.train_traj_classifier(ms_spec, ms_bundle, train, scheme, traj_config(cfg))
    out = {"scheme": scheme, "kind": cfg["traj"]["kind"], "seed": cfg["seed"],
           "sizes": {"train": len(train), "val": len(val), "test": len(test)}}
    for name, part in (("val", val), ("test", test)):
        if part:
            p = trajectory.predict_many(clf, ms_bundle, part)
            out[f"{name}_accuracy"] = evalkit.accuracy(evalkit.argmax_predictions(p), trajectory.sequence_labels(part))
    if clf.history:
        pipeline.write_log(clf.history, run.dir / "log.tsv")
    _write_json(run.dir / "report.json", out)


def cmd_sweep(run: Run):
    cfg = run.cfg
    s = cfg["sweep"]
    train, val, test = (_dataset(run, x) for x in ("train", "val", "test"))
    rf_spec, rf_bundle = _load_net(run.need("rf_checkpoint", "finetune", "rf.ktdw", "fine-tuned checkpoint"))
    seeds = tuple(s["seeds"])
    n = cfg["nets"]
    inputs = evalkit.SweepInputs(
        train, val, test, rf_spec, {sd: rf_bundle for sd in seeds},
        _train_config(cfg["train"]["distill"], cfg["seed"]),
        ms_builder=partial(pipeline.ms_spec, n["image_size"], feature_width=n["student_feature_width"]),
        arcface=ArcFaceConfig(**cfg["distill"]["arcface"]))
    variants = _loss_variants(s["losses"])
    grids = (evalkit.SweepGrid(tuple(s["alphas"]), (s["fixed_temperature"],), variants, seeds),
             evalkit.SweepGrid((s["fixed_alpha"],), tuple(s["temperatures"]), variants, seeds))
    table = evalkit.run_sweep(grids, inputs, jobs=s["jobs"])
    (run.dir / "sweep.json").write_text(table.to_json() + "\n")
    # accuracy first, then one pair of blocks per AUROC task
    metrics = ["accuracy"] + [t.name for t in inputs.tasks]
    text = "\n".join(evalkit.format_sweep(table, m, variants, tuple(s["alphas"]), tuple(s["temperatures"]),
                                           s["fixed_temperature"], s["fixed_alpha"]) for m in metrics)
    (run.dir / "report.txt").write_text(text)
    failed = [c for c in table.cells if c.failed]
    if failed:
        (run.dir / "failures.txt").write_text("".join(c.detail or c.error + "\n" for c in failed))
        print(f"warning: {len(failed)} of {len(table.cells)} sweep cells failed (see failures.txt)",
              file=sys.stderr)


def cmd_complexity(run: Run):
    rows = []
    for which in run.cfg["complexity"]["networks"]:
        spec = build_spec(run.cfg, which)
        rows.append({"network": which, "params": nets.count_params(spec), "macs": nets.count_macs(spec),
                     "heads": len(spec.class_heads)})
    _write_json(run.dir / "report.json", rows)
    lines = ["network\tparams\tMACs\theads"] + [f"{r['network']}\t{r['params']}\t{r['macs']}\t{r['heads']}"
                                                for r in rows]
    (run.dir / "report.txt").write_text("\n".join(lines) + "\n")


HANDLERS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "distill": cmd_distill,
            "eval": cmd_eval, "traj": cmd_traj, "sweep": cmd_sweep, "complexity": cmd_complexity}


# ---------------------------------------------------------------- argument parsing

def _flag_help(value):
    kind = "list" if isinstance(value, list) else type(value).__name__
    return f"({kind}, default: {json.dumps(value)})"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ktd", description="Transfer, distillation and trajectory workflow.",
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="exit codes: 0 ok, 2 config error, 3 stage-order error, 4 runtime failure")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {"synth": "generate synthetic datasets and manifests",
             "pretrain": "multi-head pretraining", "finetune": "transfer and 3-class fine-tuning",
             "distill": "train the compact student", "eval": "accuracy, AUROC and ROC points",
             "traj": "trajectory classifier on frozen student features",
             "sweep": "alpha / temperature / loss grid", "complexity": "parameter and MAC counts"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", metavar="PATH", help="YAML file layered over the defaults")
        p.add_argument("--output-root", metavar="DIR", help=f"run root (default: ${ENV_ROOT} or ./runs)")
        if name == "distill":
            p.add_argument("--plain", action="store_true", help="no teacher: alpha=0, student loss only")
        if name == "sweep":
            p.add_argument("--jobs", type=int, metavar="N", help="parallel cells (same as --sweep.jobs)")
        group = p.add_argument_group("config overrides (any key, dotted path, YAML value)")
        for key, value in _leaves(default_config()):
            group.add_argument(f"--{key}", dest=f"set:{key}", metavar="VALUE", help=_flag_help(value))
    return parser


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {args.config} is not valid YAML: {exc}") from None
        cfg = merge(cfg, loaded or {})
    for dest, raw in sorted(vars(args).items()):
        if dest.startswith("set:") and raw is not None:
            set_dotted(cfg, dest[4:], raw)
    if getattr(args, "output_root", None):
        cfg["output_root"] = args.output_root
    if getattr(args, "plain", False):
        cfg["distill"]["plain"] = True
    if getattr(args, "jobs", None) is not None:
        cfg["sweep"]["jobs"] = args.jobs
    validate(cfg)
    return cfg


def output_root(cfg) -> Path:
    return Path(cfg["output_root"] or os.environ.get(ENV_ROOT) or "runs")


def _fail(run: Run, message, code):
    print(message, file=sys.stderr)
    if run.dir is not None:
        (run.dir / "FAILED").write_text(message + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(args.command, cfg, output_root(cfg))
    try:
        run.open()
        HANDLERS[args.command](run)
    except StageOrderError as exc:
        return _fail(run, str(exc), EXIT_STAGE)
    except Exception as exc:  # noqa: BLE001 -- one-line cause, nonzero exit
        msg = str(exc).splitlines()[0] if str(exc) else ""
        return _fail(run, f"error: {type(exc).__name__}: {msg}", EXIT_RUNTIME)
    (run.dir / "DONE").write_text("")
    print(run.dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
