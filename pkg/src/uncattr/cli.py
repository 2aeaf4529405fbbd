"""Command-line surface: train, attribute, evaluate, sweep.

Runs are driven by a flat ``key=value`` config file; every consumed key is
echoed into the command's manifest (prefixed result lines carry metrics), so
a manifest can be fed back as a config to reproduce a run bit-exactly.
Unknown config keys are rejected.  Exit codes: 0 success, 1 operational
error (partial outputs are removed), 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .attribution import (
    DescentConfig,
    FiducialSpec,
    PathSpec,
    attribute_bayesian,
    attribute_entropy,
    find_counterfactual_fiducial,
    find_reconstruction,
    ig_attribute,
    path_points,
)
from .data import gen_synthetic, ingest_idx
from .evaluation import (
    BlurConfig,
    ZeroEntropyImage,
    aggregate_curves,
    curve_to_csv,
    eic,
    tune_blur_std,
    urc,
    write_summary,
)
from .formats import read_attr_map, write_attr_map, write_manifest, write_pgm
from .models import Dataset, TrainConfig, load_checkpoint, save_checkpoint
from .models import classifier_forward, train_classifier, train_vae
from .uncertainty import sample_posterior

METHODS = (
    "ig-black",
    "ig-white",
    "ig-bw",
    "ig-counterfactual",
    "generative",
    "bayesian-generative",
)

_IG_KINDS = {
    "ig-black": "black",
    "ig-white": "white",
    "ig-bw": "black+white-average",
    "ig-counterfactual": "counterfactual",
}

SWEEP_DIMS = (4, 8, 16, 32)


class ConfigError(Exception):
    """Invalid run configuration."""


@dataclass
class RunConfig:
    seed: int = 7
    dataset: str = "synthetic"
    train_count: int = 600
    val_count: int = 200
    latent_dim: int = 16
    classifier_epochs: int = 10
    vae_epochs: int = 50
    classifier_lr: float = 1e-3
    vae_lr: float = 1e-3
    batch_size: int = 32
    dropout: float = 0.5
    hidden: int = 128
    vae_hidden: int = 256
    lam: float = 100.0
    nu: float = 0.05
    entropy_target: float = 0.05
    max_iters: int = 2000
    bins: int = 50
    posterior_samples: int = 32
    blur_grid: str = "1,2,4,8"
    eval_count: int = 50
    aggregate: str = "mean"
    workers: int = 1
    method: str = "generative"
    out_dir: str = "out"

    def blur_values(self):
        try:
            values = [float(v) for v in self.blur_grid.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad blur_grid {self.blur_grid!r}") from exc
        if not values:
            raise ConfigError("blur_grid is empty")
        return values

    def echo(self) -> dict:
        return {f.name if f.name != "lam" else "lambda": getattr(self, f.name)
                for f in dataclasses.fields(self)}


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_KEY_TO_FIELD = {("lambda" if name == "lam" else name): name for name in _FIELDS}


def parse_config(path=None, overrides=None) -> RunConfig:
    """Build a RunConfig from a key=value file plus CLI overrides.

    Lines starting with ``result_`` are ignored so a run manifest can be fed
    back in as a config; any other unknown key is an error.
    """
    raw: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key = key.strip()
                if key.startswith("result_"):
                    continue
                if key not in _KEY_TO_FIELD:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                raw[_KEY_TO_FIELD[key]] = value.strip()
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    cfg = RunConfig()
    for name, value in raw.items():
        kind = _FIELDS[name].type
        try:
            if kind == "int":
                value = int(value)
            elif kind == "float":
                value = float(value)
            else:
                value = str(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {name}: {value!r}") from exc
        setattr(cfg, name, value)
    if cfg.method not in METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}; choose from {METHODS}")
    if cfg.aggregate not in ("mean", "median"):
        raise ConfigError(f"unknown aggregate {cfg.aggregate!r}")
    for positive in ("train_count", "val_count", "eval_count", "bins",
                     "posterior_samples", "workers", "latent_dim"):
        if getattr(cfg, positive) < 1:
            raise ConfigError(f"{positive} must be >= 1")
    cfg.blur_values()
    return cfg


def load_dataset(cfg: RunConfig):
    """(train, validation) datasets for the configured source.

    ``dataset=synthetic`` generates disc-vs-ring images; a directory is
    expected to hold the standard IDX file names; otherwise the value is a
    colon-separated ``train_images:train_labels:val_images:val_labels``.
    """
    if cfg.dataset == "synthetic":
        full = gen_synthetic(cfg.seed + 3, cfg.train_count + cfg.val_count)
        train = Dataset(full.images[:cfg.train_count], full.labels[:cfg.train_count],
                        "train", full.num_classes)
        val = Dataset(full.images[cfg.train_count:], full.labels[cfg.train_count:],
                      "validation", full.num_classes)
        return train, val
    if os.path.isdir(cfg.dataset):
        base = cfg.dataset
        parts = [
            os.path.join(base, "train-images-idx3-ubyte"),
            os.path.join(base, "train-labels-idx1-ubyte"),
            os.path.join(base, "t10k-images-idx3-ubyte"),
            os.path.join(base, "t10k-labels-idx1-ubyte"),
        ]
    else:
        parts = cfg.dataset.split(":")
        if len(parts) != 4:
            raise ConfigError(
                "dataset must be 'synthetic', an IDX directory, or "
                "'train_images:train_labels:val_images:val_labels'"
            )
    train = ingest_idx(parts[0], parts[1], split="train", limit=cfg.train_count)
    val = ingest_idx(parts[2], parts[3], split="validation", limit=cfg.val_count)
    return train, val


def run_method(method, classifier, vae, x, cfg: RunConfig, samples=None):
    """Produce the attribution map(s) for one flattened image.

    Returns label -> AttributionMap; single-map methods use the label "map",
    the Bayesian method returns "full"/"aleatoric"/"epistemic".
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if method in _IG_KINDS:
        spec = FiducialSpec(
            kind=_IG_KINDS[method], lam=cfg.lam, lr=cfg.nu,
            entropy_target=cfg.entropy_target, max_iters=cfg.max_iters,
        )
        return {"map": ig_attribute(classifier, x, spec, cfg.bins, v=vae)}
    if method not in ("generative", "bayesian-generative"):
        raise ConfigError(f"unknown method {method!r}")
    spec = FiducialSpec(
        kind="counterfactual", lam=cfg.lam, lr=cfg.nu,
        entropy_target=cfg.entropy_target, max_iters=cfg.max_iters,
    )
    z0 = find_counterfactual_fiducial(classifier, vae, x, spec)
    z = find_reconstruction(
        vae, x, DescentConfig(lr=cfg.nu, max_iters=cfg.max_iters)
    )
    path = path_points(vae, z0, z, x, PathSpec(mode="generative", bins=cfg.bins))
    if method == "generative":
        result = attribute_entropy(classifier, path)
        maps = {"map": result}
    else:
        full, aleatoric, epistemic = attribute_bayesian(classifier, path, samples)
        maps = {"full": full, "aleatoric": aleatoric, "epistemic": epistemic}
    for m in maps.values():
        m.metadata["fiducial_entropy"] = z0.achieved_entropy
        m.metadata["fiducial_target_missed"] = z0.target_missed
    return maps


def _map_paths(out_dir, method, index, label):
    suffix = "" if label == "map" else f"_{label}"
    stem = os.path.join(out_dir, "maps", f"{method}_{index:04d}{suffix}")
    return stem + ".txt", stem + ".pgm"


def _fan_out(fn, items, workers):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def cmd_train(cfg: RunConfig, created):
    os.makedirs(cfg.out_dir, exist_ok=True)
    train, val = load_dataset(cfg)
    classifier = train_classifier(
        train,
        TrainConfig(cfg.classifier_epochs, cfg.batch_size, cfg.classifier_lr, cfg.seed),
        hidden=(cfg.hidden,),
        dropout_rate=cfg.dropout,
    )
    vae = train_vae(
        train,
        cfg.latent_dim,
        TrainConfig(cfg.vae_epochs, cfg.batch_size, cfg.vae_lr, cfg.seed + 1),
        hidden=cfg.vae_hidden,
    )
    probs = classifier_forward(classifier, val.flat)
    accuracy = float(np.mean(np.argmax(probs, axis=1) == val.labels))
    for name, model in (("classifier.ckpt", classifier), ("vae.ckpt", vae)):
        target = os.path.join(cfg.out_dir, name)
        save_checkpoint(model, target)
        created.append(target)
    manifest = dict(cfg.echo())
    manifest.update({
        "result_uncattr_version": __version__,
        "result_checkpoint_format": 1,
        "result_val_accuracy": repr(accuracy),
        "result_classifier_final_loss": repr(classifier.history[-1]) if classifier.history else "",
        "result_vae_final_loss": repr(vae.history[-1]) if vae.history else "",
    })
    target = os.path.join(cfg.out_dir, "manifest_train.txt")
    write_manifest(target, manifest)
    created.append(target)
    return 0


def _load_models(cfg: RunConfig):
    cls_path = os.path.join(cfg.out_dir, "classifier.ckpt")
    vae_path = os.path.join(cfg.out_dir, "vae.ckpt")
    for path in (cls_path, vae_path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing checkpoint {path}; run train first")
    return (
        load_checkpoint(cls_path, dropout_rate=cfg.dropout),
        load_checkpoint(vae_path),
    )


def cmd_attribute(cfg: RunConfig, created):
    classifier, vae = _load_models(cfg)
    _, val = load_dataset(cfg)
    images = val.flat[:cfg.eval_count]
    height, width = val.image_shape
    samples = None
    if cfg.method == "bayesian-generative":
        samples = sample_posterior(classifier, cfg.posterior_samples, cfg.seed + 2)
    os.makedirs(os.path.join(cfg.out_dir, "maps"), exist_ok=True)

    def work(item):
        index, x = item
        return index, run_method(cfg.method, classifier, vae, x, cfg, samples)

    results = _fan_out(work, list(enumerate(images)), cfg.workers)
    manifest = dict(cfg.echo())
    manifest["result_uncattr_version"] = __version__
    missed = 0
    tracked = 0
    for index, maps in results:
        for label, amap in maps.items():
            txt, pgm = _map_paths(cfg.out_dir, cfg.method, index, label)
            residual = amap.metadata["completeness_residual"]
            write_attr_map(txt, amap.values, width, height, cfg.method, residual)
            write_pgm(pgm, amap.values, width, height)
            created.extend([txt, pgm])
            manifest[f"result_residual_{index:04d}_{label}"] = repr(residual)
        meta = maps[next(iter(maps))].metadata
        if "fiducial_target_missed" in meta:
            tracked += 1
            missed += bool(meta["fiducial_target_missed"])
            manifest[f"result_fiducial_entropy_{index:04d}"] = repr(meta["fiducial_entropy"])
    if tracked:
        manifest["result_fiducial_success_rate"] = repr(1.0 - missed / tracked)
    target = os.path.join(cfg.out_dir, f"manifest_attribute_{cfg.method}.txt")
    write_manifest(target, manifest)
    created.append(target)
    return 0


def cmd_evaluate(cfg: RunConfig, created):
    classifier, _ = _load_models(cfg)
    _, val = load_dataset(cfg)
    images = val.images[:cfg.eval_count]
    label = "full" if cfg.method == "bayesian-generative" else "map"
    attr_values = []
    for index in range(len(images)):
        txt, _ = _map_paths(cfg.out_dir, cfg.method, index, label)
        if not os.path.exists(txt):
            raise FileNotFoundError(f"missing attribution map {txt}; run attribute first")
        values, _ = read_attr_map(txt)
        attr_values.append(values)
    std = tune_blur_std(classifier, images, cfg.blur_values())
    blur_cfg = BlurConfig(std)

    def work(item):
        image, values = item
        try:
            curve_e = eic(classifier, image, values, blur_cfg)
        except ZeroEntropyImage:
            curve_e = None
        try:
            curve_u = urc(classifier, image, values, blur_cfg)
        except ZeroEntropyImage:
            curve_u = None
        return curve_e, curve_u

    pairs = _fan_out(work, list(zip(images, attr_values)), cfg.workers)
    eic_curves = [e for e, _ in pairs if e is not None]
    urc_curves = [u for _, u in pairs if u is not None]
    excluded = (len(pairs) - len(eic_curves)) + (len(pairs) - len(urc_curves))
    if not eic_curves or not urc_curves:
        raise ZeroEntropyImage("every image was excluded; nothing to aggregate")
    eic_agg = aggregate_curves(eic_curves, cfg.aggregate)
    urc_agg = aggregate_curves(urc_curves, cfg.aggregate)
    summary = {
        "area_over_eic": eic_agg.summary.get("area_over_eic"),
        "urc_at_1pct": urc_agg.summary["urc_at_1pct"],
        "urc_at_5pct": urc_agg.summary["urc_at_5pct"],
        "excluded_count": excluded,
        "blur_std": std,
    }
    outputs = {
        f"eic_{cfg.method}.csv": lambda p: curve_to_csv(eic_agg, p),
        f"urc_{cfg.method}.csv": lambda p: curve_to_csv(urc_agg, p),
        f"summary_{cfg.method}.txt": lambda p: write_summary(summary, p),
    }
    for name, writer in outputs.items():
        target = os.path.join(cfg.out_dir, name)
        writer(target)
        created.append(target)
    manifest = dict(cfg.echo())
    manifest.update({
        "result_uncattr_version": __version__,
        "result_blur_std": repr(std),
        "result_excluded_count": excluded,
    })
    target = os.path.join(cfg.out_dir, f"manifest_evaluate_{cfg.method}.txt")
    write_manifest(target, manifest)
    created.append(target)
    return 0


def cmd_sweep(cfg: RunConfig, created):
    """Train/attribute/evaluate the generative method across latent dims."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for dim in SWEEP_DIMS:
        sub = dataclasses.replace(
            cfg,
            latent_dim=dim,
            method="generative",
            out_dir=os.path.join(cfg.out_dir, f"sweep_m{dim}"),
        )
        cmd_train(sub, created)
        cmd_attribute(sub, created)
        cmd_evaluate(sub, created)
        import json

        with open(os.path.join(sub.out_dir, "summary_generative.txt")) as fh:
            summary = json.load(fh)
        rows.append((dim, summary["area_over_eic"],
                     summary["urc_at_1pct"], summary["urc_at_5pct"]))
    lines = ["latent_dim,area_over_eic,urc_at_1pct,urc_at_5pct"]
    lines.extend(f"{d},{a!r},{u1!r},{u5!r}" for d, a, u1, u5 in rows)
    target = os.path.join(cfg.out_dir, "sweep_report.csv")
    with open(target, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    created.append(target)
    manifest = dict(cfg.echo())
    manifest["result_uncattr_version"] = __version__
    target = os.path.join(cfg.out_dir, "manifest_sweep.txt")
    write_manifest(target, manifest)
    created.append(target)
    return 0


_COMMANDS = {
    "train": cmd_train,
    "attribute": cmd_attribute,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="uncattr",
        description="Attribute classifier predictive entropy to pixels and evaluate the maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value run config file")
        p.add_argument("--method", default=None, choices=METHODS)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    created: list = []
    try:
        cfg = parse_config(
            args.config,
            overrides={"method": args.method, "out_dir": args.out, "seed": args.seed},
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](cfg, created)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # operational failure: drop partial outputs
        for path in created:
            if os.path.exists(path):
                os.unlink(path)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
