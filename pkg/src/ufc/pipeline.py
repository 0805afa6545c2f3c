"""Stage orchestration, configuration and the method x fraction x seed matrix.

Stage layout under ``output_dir``::

    generate/   train/ and test/ dataset directories
    train-vae/  vae.ckpt, features.npy, feature_ids.npy, history.csv
    cluster/    labels.json, elbow.csv, stats.json
    pretrain/   encoder.ckpt, history.csv
    finetune/   unet_f<fraction>_s<seed>.ckpt, history_f<fraction>_s<seed>.csv
    evaluate/   dice_f<fraction>_s<seed>.json

Matrix runs add results.csv, ablation.csv and run_report.json at the top
level plus cached encoders under matrix/.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from . import clustering as cl
from .checkpoint import load_checkpoint, save_checkpoint
from .contrastive import EncoderModel, pretrain
from .segmentation import build_unet, evaluate, finetune, select_labeled_subset
from .synthgen import DatasetSpec, generate_dataset, load_dataset, pair_rates, save_dataset
from .vae import VaeModel, extract_features, train_vae

logger = logging.getLogger(__name__)

STAGES = ("generate", "train-vae", "cluster", "pretrain", "finetune", "evaluate")
METHODS = ("ufc", "instance", "random_init")

# Every key is documented here; load_config rejects anything else.
DEFAULTS: dict = {
    "seed": 0,  # master seed: dataset, VAE, clustering, pretraining
    "output_dir": "runs/default",
    "data": {
        "n_samples": 400,
        "test_samples": 100,
        "n_classes": 4,
        "size": 32,
        "contrast": 0.3,
        "intra_variation": 0.35,
        "noise": 0.05,
        "imbalance": 2.0,
        "slices_per_volume": 20,
    },
    "vae": {
        "latent_dim": 16,
        "channels": [16, 32],
        "beta": 5e-4,
        "epochs": 40,
        "lr": 1e-3,
        "batch": 32,
    },
    "cluster": {
        "method": "agglomerative",  # agglomerative | kmeans | dbscan
        "k": 8,  # int, "auto" (elbow select_k) or "n" (singletons)
        "k_range": [1, 30],
        "eps": None,  # dbscan; None picks the median k-distance
        "min_points": 4,
    },
    "contrastive": {
        "mode": "ufc",  # ufc | instance
        "tau": 0.1,
        "epochs": 40,
        "lr": 2.5e-4,
        "batch": 16,
        "include_self": False,
        "denominator": "negatives_only",
        "hidden": 256,
        "out_dim": 32,
    },
    "unet": {
        "widths": [16, 32],
        "bottleneck": 64,
    },
    "finetune": {
        "fractions": [0.1],
        "epochs": 60,
        "lr": 1e-3,
        "batch": 4,
        "val_fraction": 0.2,
    },
    "seeds": [0, 1, 2],  # fine-tuning seeds: labelled subset and UNet init
    "methods": ["ufc", "instance", "random_init"],
    "ablation": [
        {"method": "agglomerative", "k": 2},
        {"method": "agglomerative", "k": "auto"},
        {"method": "agglomerative", "k": "n"},
        {"method": "kmeans", "k": "auto"},
        {"method": "dbscan", "eps": None},
    ],
}


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value``; the value is JSON if it parses, else a string."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    nested: dict = {}
    cur = nested
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = _parse_value(raw)
    return _merge(config, nested)


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    _dataset_spec(cfg).validate()
    if cfg["data"]["test_samples"] < 1:
        raise ConfigError("data.test_samples must be >= 1")
    c = cfg["cluster"]
    if c["method"] not in ("agglomerative", "kmeans", "dbscan"):
        raise ConfigError(f"unknown cluster.method {c['method']!r}")
    for m in cfg["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected a subset of {METHODS}")
    if cfg["contrastive"]["mode"] not in ("ufc", "instance"):
        raise ConfigError("contrastive.mode must be ufc or instance")
    for f in cfg["finetune"]["fractions"]:
        if not 0.0 < float(f) <= 1.0:
            raise ConfigError(f"fraction {f} outside (0, 1]")
    if not cfg["seeds"]:
        raise ConfigError("seeds must be nonempty")
    for entry in cfg["ablation"]:
        _merge({"method": None, "k": None, "eps": None, "min_points": None}, entry, "ablation.")


def load_config(path=None, overrides=(), env=None) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides, then ``UFC_SEED``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, data)
    for item in overrides:
        cfg = apply_override(cfg, item)
    env = os.environ if env is None else env
    if env.get("UFC_SEED"):
        try:
            cfg["seed"] = int(env["UFC_SEED"])
        except ValueError:
            raise ConfigError(f"UFC_SEED must be an integer, got {env['UFC_SEED']!r}") from None
    validate_config(cfg)
    return cfg


def _dataset_spec(cfg: dict, test: bool = False) -> DatasetSpec:
    d = cfg["data"]
    return DatasetSpec(
        n_samples=d["test_samples"] if test else d["n_samples"],
        n_classes=d["n_classes"],
        size=d["size"],
        contrast=d["contrast"],
        intra_variation=d["intra_variation"],
        noise=d["noise"],
        imbalance=d["imbalance"],
        slices_per_volume=d["slices_per_volume"],
        seed=cfg["seed"] + 1 if test else cfg["seed"],
    )


# ---------------------------------------------------------------------------
# small file helpers


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {what}: run {stage}")
    return path


def _tag(fraction: float, seed: int) -> str:
    return f"f{float(fraction):g}_s{seed}"


def _stage_dir(cfg: dict, stage: str) -> Path:
    d = Path(cfg["output_dir"]) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# stage bodies (in-memory; the stage wrappers below handle files)


def resolve_k(k, features: cl.FeatureSet, k_range, dendrogram=None) -> tuple[int, cl.ElbowCurve | None]:
    n = len(features)
    if k == "n":
        return n, None
    if k == "auto":
        lo, hi = k_range
        curve = cl.elbow_curve(features, range(max(1, lo), min(hi, n) + 1), dendrogram)
        return cl.select_k(curve), curve
    if isinstance(k, int) and 1 <= k <= n:
        return k, None
    raise ConfigError(f"k must be an integer in [1, {n}], 'auto' or 'n'; got {k!r}")


def make_labels(features: cl.FeatureSet, method: str, k=None, eps=None, min_points: int = 4,
                k_range=(1, 30), seed: int = 0, dendrogram=None):
    """Pseudo-labels for one clustering setting; returns (labels, elbow curve or None)."""
    if method == "agglomerative":
        dendrogram = dendrogram or cl.build_dendrogram(features)
        kk, curve = resolve_k(k, features, k_range, dendrogram)
        labels, _ = cl.agglomerative(features, kk, dendrogram)
        return labels, curve
    if method == "kmeans":
        kk, curve = resolve_k(k, features, k_range, dendrogram)
        return cl.kmeans(features, kk, seed=seed), curve
    if method == "dbscan":
        eps = cl.auto_eps(features, min_points) if eps is None else float(eps)
        return cl.dbscan(features, eps, min_points), None
    raise ConfigError(f"unknown clustering method {method!r}")


def _pretrain_encoder(cfg: dict, images, ids, labels: cl.PseudoLabels | None, mode: str):
    c = cfg["contrastive"]
    u = cfg["unet"]
    model = EncoderModel(cfg["seed"], u["widths"], u["bottleneck"], c["hidden"], c["out_dim"])
    return pretrain(model, images, ids, labels, c["epochs"], c["lr"], c["batch"], c["tau"],
                    cfg["seed"], mode, c["include_self"], c["denominator"])


def _finetune_cell(cfg: dict, train, latent, test, fraction: float, seed: int, transfer):
    f = cfg["finetune"]
    u = cfg["unet"]
    n_classes = cfg["data"]["n_classes"]
    sub = train.subset(select_labeled_subset(train.ids, latent, fraction, seed))
    model = build_unet(n_classes, seed, transfer, u["widths"], u["bottleneck"])
    res = finetune(model, sub.images, sub.masks, f["epochs"], f["lr"], f["batch"], seed, f["val_fraction"])
    report = evaluate(model, test.images, test.masks, n_classes)
    report.fraction, report.seed = float(fraction), seed
    return res, report


# ---------------------------------------------------------------------------
# stages


def _stage_generate(cfg):
    out = _stage_dir(cfg, "generate")
    train = generate_dataset(_dataset_spec(cfg))
    n = cfg["data"]["n_samples"]
    test = generate_dataset(_dataset_spec(cfg, test=True), id_offset=max(10000, n))
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")


def _load_split(cfg, split: str):
    d = Path(cfg["output_dir"]) / "generate" / split
    _require(d / "manifest.json", f"{split} dataset", "generate")
    return load_dataset(d)


def _stage_train_vae(cfg):
    ds = _load_split(cfg, "train")
    tv = ds.training_view()
    v = cfg["vae"]
    model = VaeModel(cfg["data"]["size"], v["latent_dim"], tuple(v["channels"]), v["beta"], cfg["seed"])
    res = train_vae(model, tv.images, v["epochs"], v["lr"], v["batch"], seed=cfg["seed"])
    feats = extract_features(model, tv.images, tv.ids)
    out = _stage_dir(cfg, "train-vae")
    save_checkpoint(out / "vae.ckpt", model.state_dict())
    np.save(out / "features.npy", feats.vectors)
    np.save(out / "feature_ids.npy", feats.ids)
    _write_csv(out / "history.csv", ["epoch", "rec", "kl", "total"],
               [[h["epoch"], repr(h["rec"]), repr(h["kl"]), repr(h["total"])] for h in res.history])


def load_features(cfg) -> cl.FeatureSet:
    d = Path(cfg["output_dir"]) / "train-vae"
    _require(d / "features.npy", "features", "train-vae")
    _require(d / "feature_ids.npy", "features", "train-vae")
    return cl.FeatureSet(np.load(d / "feature_ids.npy"), np.load(d / "features.npy"))


def _cluster_stats(labels: cl.PseudoLabels, ev) -> dict:
    amap = labels.as_dict()
    order = [amap[int(i)] for i in ev.ids]
    return {
        "k": labels.k,
        "sizes": labels.sizes(),
        "ari": cl.ari(order, ev.latent_classes),
        "harmful_negative_rate": {
            s: pair_rates(ev, s, amap if s == "cluster_guided" else None).harmful_negative_rate
            for s in ("instance_discrimination", "positional", "cluster_guided")
        },
        "harmful_positive_rate": {
            s: pair_rates(ev, s, amap if s == "cluster_guided" else None).harmful_positive_rate
            for s in ("instance_discrimination", "positional", "cluster_guided")
        },
    }


def _stage_cluster(cfg):
    feats = load_features(cfg)
    c = cfg["cluster"]
    labels, curve = make_labels(feats, c["method"], c["k"], c["eps"], c["min_points"], c["k_range"], cfg["seed"])
    out = _stage_dir(cfg, "cluster")
    cl.save_labels(out / "labels.json", labels)
    if curve is None and c["method"] != "dbscan":
        lo, hi = c["k_range"]
        curve = cl.elbow_curve(feats, range(max(1, lo), min(hi, len(feats)) + 1))
    if curve is not None:
        (out / "elbow.csv").write_text(curve.to_csv())
    ev = _load_split(cfg, "train").evaluation_view()
    _write_json(out / "stats.json", _cluster_stats(labels, ev))


def _stage_pretrain(cfg):
    mode = cfg["contrastive"]["mode"]
    labels = None
    if mode == "ufc":
        load_features(cfg)
        path = _require(Path(cfg["output_dir"]) / "cluster" / "labels.json", "labels.json", "cluster")
        labels = cl.load_labels(path)
    tv = _load_split(cfg, "train").training_view()
    res = _pretrain_encoder(cfg, tv.images, tv.ids, labels, mode)
    out = _stage_dir(cfg, "pretrain")
    save_checkpoint(out / "encoder.ckpt", res.model.state_dict())
    _write_csv(out / "history.csv", ["epoch", "mean_loss"], [[e, repr(v)] for e, v in res.history])


def _stage_finetune(cfg):
    enc = _require(Path(cfg["output_dir"]) / "pretrain" / "encoder.ckpt", "encoder.ckpt", "pretrain")
    state = load_checkpoint(enc)
    ds = _load_split(cfg, "train")
    test = _load_split(cfg, "test").training_view()
    out = _stage_dir(cfg, "finetune")
    for fraction in cfg["finetune"]["fractions"]:
        for seed in cfg["seeds"]:
            res, _ = _finetune_cell(cfg, ds.training_view(), ds.evaluation_view().latent_classes, test,
                                    fraction, seed, state)
            tag = _tag(fraction, seed)
            save_checkpoint(out / f"unet_{tag}.ckpt", res.model.state_dict())
            _write_csv(out / f"history_{tag}.csv", ["epoch", "train_loss", "val_dice"],
                       [[e, repr(l), repr(v)] for e, l, v in res.history])


def _stage_evaluate(cfg):
    test = _load_split(cfg, "test").training_view()
    u = cfg["unet"]
    src = Path(cfg["output_dir"]) / "finetune"
    out = _stage_dir(cfg, "evaluate")
    for fraction in cfg["finetune"]["fractions"]:
        for seed in cfg["seeds"]:
            tag = _tag(fraction, seed)
            ckpt = _require(src / f"unet_{tag}.ckpt", f"unet_{tag}.ckpt", "finetune")
            model = build_unet(cfg["data"]["n_classes"], seed, None, u["widths"], u["bottleneck"])
            model.load_state_dict(load_checkpoint(ckpt))
            report = evaluate(model, test.images, test.masks, cfg["data"]["n_classes"])
            report.fraction, report.seed = float(fraction), seed
            _write_json(out / f"dice_{tag}.json", report.to_json())


_STAGE_FUNCS = {
    "generate": _stage_generate,
    "train-vae": _stage_train_vae,
    "cluster": _stage_cluster,
    "pretrain": _stage_pretrain,
    "finetune": _stage_finetune,
    "evaluate": _stage_evaluate,
}


def run_stage(stage: str, cfg: dict) -> Path:
    """Run one stage; outputs go to output_dir/<stage>/."""
    if stage not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    t0 = time.perf_counter()
    _STAGE_FUNCS[stage](cfg)
    logger.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)
    return Path(cfg["output_dir"]) / stage


# ---------------------------------------------------------------------------
# matrix


RESULTS_HEADER = ["method", "fraction", "seed", "mean_dice"]
ABLATION_HEADER = ["cluster_method", "param", "mean_dice"]


def _append_row(path: Path, row) -> None:
    with path.open("a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(row)


def _partition_key(labels: np.ndarray) -> str:
    canon = cl.canonical_labels(labels)
    return hashlib.sha256(canon.astype("<i8").tobytes()).hexdigest()[:16]


def _param_text(labels: cl.PseudoLabels, setting: dict) -> str:
    if labels.method == "dbscan":
        return f"eps={labels.params['eps']:.4g} (k={labels.k})"
    k = setting.get("k")
    if k in ("auto", "n"):
        return f"k={k}({labels.k})"
    return f"k={labels.k}"


def run_matrix(cfg: dict) -> dict:
    """Methods x fractions x seeds plus the clustering ablation at the first fraction.

    Pretraining is shared by every cell that uses the same partition of the
    training set, so instance discrimination and singleton clusters reuse one
    encoder. Rows are appended as cells finish.
    """
    root = Path(cfg["output_dir"])
    root.mkdir(parents=True, exist_ok=True)
    timings: dict = {}

    def timed(name, fn, *a):
        t0 = time.perf_counter()
        out = fn(*a)
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
        return out

    timed("generate", run_stage, "generate", cfg)
    timed("train-vae", run_stage, "train-vae", cfg)
    timed("cluster", run_stage, "cluster", cfg)

    ds = _load_split(cfg, "train")
    tv, ev = ds.training_view(), ds.evaluation_view()
    test = _load_split(cfg, "test").training_view()
    feats = load_features(cfg)
    dendrogram = cl.build_dendrogram(feats)
    main_labels = cl.load_labels(root / "cluster" / "labels.json")
    cache_dir = root / "matrix"
    cache_dir.mkdir(exist_ok=True)

    encoders: dict = {}
    pretrain_hist: dict = {}

    def encoder_for(labels: cl.PseudoLabels | None):
        # labels None means instance discrimination: one class per image
        raw = np.arange(len(tv.ids)) if labels is None else np.array([labels.as_dict()[int(i)] for i in tv.ids])
        key = _partition_key(raw)
        if key not in encoders:
            res = timed("pretrain", _pretrain_encoder, cfg, tv.images, tv.ids, labels,
                        "instance" if labels is None else "ufc")
            encoders[key] = res.model.state_dict()
            pretrain_hist[key] = [v for _, v in res.history]
            save_checkpoint(cache_dir / f"encoder_{key}.ckpt", encoders[key])
        return key

    dice: dict = {}

    def cell(key, fraction, seed):
        if (key, fraction, seed) not in dice:
            transfer = None if key is None else encoders[key]
            _, rep = timed("finetune", _finetune_cell, cfg, tv, ev.latent_classes, test, fraction, seed, transfer)
            dice[(key, fraction, seed)] = rep
        return dice[(key, fraction, seed)]

    results = root / "results.csv"
    _write_csv(results, RESULTS_HEADER, [])
    dice_reports = []
    method_keys = {}
    for method in cfg["methods"]:
        if method == "random_init":
            method_keys[method] = None
        elif method == "instance":
            method_keys[method] = encoder_for(None)
        else:
            method_keys[method] = encoder_for(main_labels)
        for fraction in cfg["finetune"]["fractions"]:
            for seed in cfg["seeds"]:
                rep = cell(method_keys[method], float(fraction), seed)
                _append_row(results, [method, f"{float(fraction):g}", seed, f"{rep.mean:.6f}"])
                dice_reports.append({"method": method, **rep.to_json()})

    ablation = root / "ablation.csv"
    _write_csv(ablation, ABLATION_HEADER, [])
    ablation_stats = []
    fraction0 = float(cfg["finetune"]["fractions"][0])
    c = cfg["cluster"]
    for setting in cfg["ablation"]:
        labels, _ = make_labels(feats, setting["method"], setting.get("k"), setting.get("eps"),
                                setting.get("min_points") or c["min_points"], c["k_range"], cfg["seed"],
                                dendrogram)
        key = encoder_for(labels)
        scores = [cell(key, fraction0, seed).mean for seed in cfg["seeds"]]
        param = _param_text(labels, setting)
        _append_row(ablation, [labels.method, param, f"{float(np.mean(scores)):.6f}"])
        ablation_stats.append({"cluster_method": labels.method, "param": param, "k": labels.k,
                               "ari": cl.ari([labels.as_dict()[int(i)] for i in ev.ids], ev.latent_classes),
                               "dice": scores})

    report = {
        "config": cfg,
        "timings": timings,
        "cluster": json.loads((root / "cluster" / "stats.json").read_text()),
        "vae_history": [dict(r) for r in csv.DictReader(io.StringIO((root / "train-vae" / "history.csv").read_text()))],
        "elbow": (root / "cluster" / "elbow.csv").read_text() if (root / "cluster" / "elbow.csv").exists() else None,
        "pretrain_history": pretrain_hist,
        "dice": dice_reports,
        "ablation": ablation_stats,
    }
    _write_json(root / "run_report.json", report)
    return report


# ---------------------------------------------------------------------------
# report


def report(output_dir) -> str:
    root = Path(output_dir)
    path = root / "results.csv"
    if not path.exists():
        raise PipelineError(f"missing results.csv in {root}: run matrix")
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    if not rows:
        return "no runs found"
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["method"], float(r["fraction"])), []).append(float(r["mean_dice"]))
    lines = ["method        fraction  n  mean_dice +- std"]
    for (method, fraction), vals in groups.items():
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        lines.append(f"{method:<13} {fraction:<9g} {len(vals):<2d} {np.mean(vals):.4f} +- {std:.4f}")
    stats_path = root / "cluster" / "stats.json"
    if stats_path.exists():
        stats = json.loads(stats_path.read_text())
        lines.append(f"clustering: k={stats['k']} ARI vs latent classes {stats['ari']:.4f}")
        for s, v in stats["harmful_negative_rate"].items():
            lines.append(f"harmful pairs [{s}]: negative {v:.4f} positive {stats['harmful_positive_rate'][s]:.4f}")
    abl = root / "ablation.csv"
    if abl.exists():
        arows = list(csv.DictReader(io.StringIO(abl.read_text())))
        for r in arows:
            lines.append(f"ablation {r['cluster_method']} {r['param']}: {float(r['mean_dice']):.4f}")
    return "\n".join(lines)


def config_json(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True)

