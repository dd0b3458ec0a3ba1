"""Command line entry point: synth, train, eval, ablate, visualize, print-config."""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .ata import AtaModule
from .core import AmlConfig, eval_mode, generate
from .data import (
    WBC_CLASSES, WBC_PALETTE, SegDataset, SynthSpec, decode_mask, encode_mask, load_dataset,
    resize_dataset, save_dataset, synth_generate, tile_dataset,
)
from .discriminator import DiscConfig
from .generator import GeneratorConfig
from .metrics import metric_rows, write_metrics_csv
from .numerics import bilinear_resize
from .trainer import (
    Model, TrainConfig, config_digest, evaluate, load_checkpoint, predict,
    run_cross_validation, save_model, train_model,
)

log = logging.getLogger("amlnet")

OUTPUT_ROOT_ENV = "AMLNET_OUTPUT_ROOT"
EXIT_USAGE = 2


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

def _defaults(cls, drop=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in drop:
            continue
        v = getattr(cls(), f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    synth = _defaults(SynthSpec)
    synth["share_bounds"] = {k: list(v) for k, v in synth["share_bounds"].items()}
    return {
        "generator": _defaults(GeneratorConfig, drop=("connection", "difficulty", "pda_to_generator")),
        "discriminator": {"base_channels": 64, "taps": [1, 2, 3], "slope": 0.2},
        "aml": _defaults(AmlConfig),
        "train": {**_defaults(TrainConfig), "cross_validation": False},
        "data": {
            "train": {"dir": None, "synth": {**synth, "num_images": 64, "seed": 1}},
            "val": {"dir": None, "synth": {**synth, "num_images": 16, "seed": 2}},
            "test": {"dir": None, "synth": None},
            "palette": dict(WBC_PALETTE),
            "class_names": list(WBC_CLASSES),
            "resize": None,
            "tile": None,
        },
        "output": {"dir": "runs/default", "save_predictions": True, "pda_every_epoch": False},
    }


# keys whose value is a free-form mapping rather than part of the schema
_OPEN = {"data.palette", "data.train.synth.share_bounds", "data.val.synth.share_bounds",
         "data.test.synth.share_bounds"}


def merge_config(base: dict, override: dict, prefix: str = "") -> dict:
    """Recursively overlay ``override`` on ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        path = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if path in _OPEN or v is None:
            out[k] = v
        elif isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge_config(out[k], v, path + ".")
        elif isinstance(out[k], dict):
            raise ConfigError(f"config key {path!r} expects a mapping")
        elif out[k] is None and isinstance(v, dict) and path.endswith(".synth"):
            out[k] = merge_config(default_config()["data"]["train"]["synth"], v, path + ".")
        else:
            out[k] = v
    return out


def parse_overrides(items) -> dict:
    """``a.b.c=value`` strings to a nested dict; values parse as YAML scalars."""
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def load_config(path: Optional[str] = None, overrides=None) -> dict:
    cfg = default_config()
    if path:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = merge_config(cfg, user)
    cfg = merge_config(cfg, parse_overrides(overrides))
    build_configs(cfg)   # validate everything before any compute
    return cfg


def run_digest(cfg: dict) -> str:
    return config_digest({k: v for k, v in cfg.items() if k != "output"})


def build_configs(cfg: dict):
    try:
        gen = GeneratorConfig(**cfg["generator"])
        d = cfg["discriminator"]
        disc = DiscConfig.from_base(d["base_channels"], image_channels=gen.in_channels,
                                    num_classes=gen.num_classes, taps=tuple(d["taps"]),
                                    slope=d["slope"])
        aml = AmlConfig(**cfg["aml"])
        # connection/difficulty live in the aml section; validate them through the generator
        GeneratorConfig(**{**cfg["generator"], "connection": aml.connection,
                           "difficulty": aml.difficulty})
        train = TrainConfig(**{k: v for k, v in cfg["train"].items() if k != "cross_validation"})
        for split in ("train", "val", "test"):
            synth = cfg["data"][split].get("synth")
            if synth is not None and not cfg["data"][split].get("dir"):
                SynthSpec(**synth)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    palette_classes = max(cfg["data"]["palette"].values()) + 1
    if palette_classes != gen.num_classes:
        raise ConfigError(f"palette defines {palette_classes} classes but generator.num_classes "
                          f"is {gen.num_classes}")
    return gen, disc, aml, train


def load_split(cfg: dict, split: str) -> Optional[SegDataset]:
    d = cfg["data"]
    spec = d[split]
    names = tuple(d["class_names"])
    if spec.get("dir"):
        ds = load_dataset(spec["dir"], d["palette"], names)
    elif spec.get("synth") is not None:
        ds = synth_generate(SynthSpec(**spec["synth"]))
        ds.class_names = names
    else:
        return None
    if d["tile"]:
        ds = tile_dataset(ds, int(d["tile"]))
    if d["resize"]:
        h, w = d["resize"]
        ds = resize_dataset(ds, int(h), int(w))
    return ds


def output_dir(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


# ----------------------------------------------------------------- writers

def save_png(path, arr: np.ndarray, digest: str) -> None:
    info = PngInfo()
    info.add_text("config_digest", digest)
    Image.fromarray(arr).save(path, pnginfo=info)


def render_heatmap(a: np.ndarray, palette: str = "gray") -> np.ndarray:
    """[0, 1] map to uint8 pixels: grayscale, or a blue-white-red diverging ramp."""
    a = np.clip(a, 0.0, 1.0)
    if palette == "gray":
        return np.rint(a * 255).astype(np.uint8)
    if palette != "diverging":
        raise ValueError(f"unknown heatmap palette {palette!r}")
    lo, hi = np.array([59, 76, 192]), np.array([180, 4, 38])
    white = np.array([255, 255, 255])
    t = a[..., None]
    rgb = np.where(t < 0.5, lo + (white - lo) * (t * 2), white + (hi - white) * ((t - 0.5) * 2))
    return np.rint(rgb).astype(np.uint8)


def normalize_unit(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    return np.zeros_like(a) if hi - lo <= 0 else (a - lo) / (hi - lo)


def write_csv(path, rows: list, columns: list, digest: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={digest}\n")
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in columns})


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else v


class LossLog:
    """Line-delimited JSON, one record per optimizer step."""

    KEYS = ("step", "epoch", "l_ce", "l_pda1", "l_pda2", "l_pda3", "l_adv_g", "l_disc", "total")

    def __init__(self, path, digest: str, extra: Optional[dict] = None):
        self.fh = open(path, "a")
        self.digest = digest
        self.extra = extra or {}

    def __call__(self, rec: dict) -> None:
        out = {**self.extra, **{k: rec.get(k) for k in self.KEYS}, "config_digest": self.digest}
        self.fh.write(json.dumps(out) + "\n")

    def close(self):
        self.fh.close()


def save_predictions(G, ds: SegDataset, out: Path, palette: dict, digest: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if not len(ds):
        return
    imgs, _ = ds.tensors()
    for name, pred in zip(ds.names, predict(G, imgs)):
        save_png(out / f"{name}.png", encode_mask(pred, palette), digest)


@torch.no_grad()
def pda_maps(model: Model, img: torch.Tensor, mask: torch.Tensor) -> dict:
    """Difficulty maps of the second pass at each PDA level, upsampled to the input size."""
    G, D = model.G, model.D
    if not G.pda:
        return {}
    with eval_mode(G), eval_mode(D):
        trace = generate(img, mask, G, D, model.aml)
    h, w = img.shape[-2:]
    return {k: bilinear_resize(o.attn, h, w)[0, 0].numpy() for k, o in trace.pda_outputs.items()}


# ---------------------------------------------------------------- commands

def _model_from_checkpoint(path):
    tensors, meta = load_checkpoint(path)
    cfg = meta["config"]
    gen, disc, aml, train = build_configs(cfg)
    model = Model.build(gen, disc, aml, train, seed=0)
    model.load_tensors(tensors, tuple(meta.get("opt_steps", (0, 0))))
    model.G.eval()
    model.D.eval()
    return model, cfg, meta


def cmd_print_config(args) -> int:
    cfg = load_config(args.config, args.set)
    sys.stdout.write(f"# config_digest={run_digest(cfg)}\n")
    sys.stdout.write(yaml.safe_dump(cfg, sort_keys=False))
    return 0


def cmd_synth(args) -> int:
    spec = {}
    if args.spec:
        with open(args.spec) as fh:
            spec = yaml.safe_load(fh) or {}
    spec = merge_config(default_config()["data"]["train"]["synth"], spec)
    spec = merge_config(spec, parse_overrides(args.set))
    try:
        s = SynthSpec(**spec)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    digest = config_digest({"synth": spec})
    out = output_dir(args.out)
    ds = synth_generate(s)
    save_dataset(ds, out, WBC_PALETTE, digest)
    log.info("wrote %d images to %s", len(ds), out)
    print(out)
    return 0


def _train_one(cfg, train_ds, val_ds, out: Path, digest: str, tag: str = "", losses=None,
               seed=None):
    gen, disc, aml, tc = build_configs(cfg)
    pda_dir = out / "pda"
    palette = cfg["data"]["palette"]
    probe = val_ds if len(val_ds) else train_ds

    def on_epoch(epoch, model):
        if not cfg["output"]["pda_every_epoch"]:
            return
        pda_dir.mkdir(exist_ok=True)
        img, mask = probe.tensors([0])
        for k, m in pda_maps(model, img, mask).items():
            save_png(pda_dir / f"{tag}epoch{epoch:03d}_level{k}.png", render_heatmap(m), digest)

    res = train_model(train_ds, val_ds, gen, disc, aml, tc, seed=seed, on_step=losses,
                      on_epoch=on_epoch)
    save_model(out / f"{tag}checkpoint.ckpt", res.model, {
        "config": cfg, "config_digest": digest, "epoch": res.best_epoch,
        "best_val_miou": res.best_val_miou,
    })
    write_csv(out / f"{tag}history.csv", res.history, ["epoch", "miou"], digest)
    return res


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.out:
        cfg["output"]["dir"] = args.out
    digest = run_digest(cfg)
    out = output_dir(cfg["output"]["dir"])
    with open(out / "config.yaml", "w") as fh:
        fh.write(f"# config_digest={digest}\n")
        yaml.safe_dump(cfg, fh, sort_keys=False)
    train_ds = load_split(cfg, "train")
    val_ds = load_split(cfg, "val")
    test_ds = load_split(cfg, "test")
    names = list(cfg["data"]["class_names"])
    (out / "losses.jsonl").unlink(missing_ok=True)
    gen, disc, aml, tc = build_configs(cfg)

    if cfg["train"]["cross_validation"]:
        count = [0]

        def fn(tr, va, g, d, a, c, seed):
            r, f = divmod(count[0], c.folds)
            count[0] += 1
            losses = LossLog(out / "losses.jsonl", digest, {"repeat": r, "fold": f})
            try:
                return _train_one(cfg, tr, va, out, digest, f"r{r}_f{f}_", losses, seed)
            finally:
                losses.close()

        res = run_cross_validation(train_ds, gen, disc, aml, tc, test_ds=test_ds, train_fn=fn)
        cols = ["repeat", "fold", "best_epoch", "val_miou"] + names + ["miou"]
        write_csv(out / "cv.csv", res.table(), cols, digest)
        write_metrics_csv(out / "metrics.csv", metric_rows([r.cm for r in res.rows], names), digest)
        summ = res.summary()["miou"]
        log.info("cross-validated mIoU %.4f +- %.4f over %d runs", summ[0], summ[1], len(res.rows))
        return 0

    losses = LossLog(out / "losses.jsonl", digest)
    try:
        res = _train_one(cfg, train_ds, val_ds, out, digest, losses=losses)
    finally:
        losses.close()
    scored = test_ds if test_ds is not None else val_ds
    cm = evaluate(res.model.G, scored)
    write_metrics_csv(out / "metrics.csv", metric_rows([cm], names), digest)
    if cfg["output"]["save_predictions"]:
        save_predictions(res.model.G, scored, out / "predictions", cfg["data"]["palette"], digest)
    log.info("best epoch %d, val mIoU %.4f, scored mIoU %.4f",
             res.best_epoch, res.best_val_miou, cm.mean_iou())
    return 0


def cmd_eval(args) -> int:
    model, cfg, meta = _model_from_checkpoint(args.checkpoint)
    digest = meta["config_digest"]
    if args.config or args.set:
        want = run_digest(load_config(args.config, args.set))
        if want != digest:
            raise ConfigError(
                f"config digest {want} does not match checkpoint digest {digest}; "
                "the checkpoint was trained with a different configuration")
    if args.data:
        ds = load_dataset(args.data, cfg["data"]["palette"], tuple(cfg["data"]["class_names"]))
    else:
        ds = load_split(cfg, "test") or load_split(cfg, "val")
    out = output_dir(args.out or Path(cfg["output"]["dir"]) / "eval")
    cm = evaluate(model.G, ds)
    write_metrics_csv(out / "metrics.csv", metric_rows([cm], list(cfg["data"]["class_names"])), digest)
    save_predictions(model.G, ds, out / "predictions", cfg["data"]["palette"], digest)
    log.info("mIoU %.4f on %d images", cm.mean_iou(), len(ds))
    return 0


def load_sweep(path) -> list:
    """Sweep file -> [(table, [(overrides, label), ...])] in file order.

    Either ``tables: [{name, vary: {key: [values]}}]`` or a bare ``{key: [values]}``
    mapping (one table). Within a table the listed keys form a Cartesian grid.
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    tables = raw["tables"] if "tables" in raw else [{"name": "sweep", "vary": raw}]
    out = []
    for t in tables:
        grid = [({}, [])]
        for key, values in t["vary"].items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep key {key!r} needs a non-empty list of values")
            grid = [({**o, key: v}, lab + [f"{key}={v}"]) for o, lab in grid for v in values]
        out.append((t["name"], [(o, " ".join(lab)) for o, lab in grid]))
    return out


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.set)
    if args.out:
        base["output"]["dir"] = args.out
    base_digest = run_digest(base)
    out = output_dir(base["output"]["dir"])
    names = list(base["data"]["class_names"])
    sweep = load_sweep(args.sweep)
    train_ds = load_split(base, "train")
    val_ds = load_split(base, "val")
    test_ds = load_split(base, "test")
    rows = []
    for table, points in sweep:
        for overrides, label in points:
            cfg = merge_config(base, parse_overrides([f"{k}={json.dumps(v)}" for k, v in overrides.items()]))
            gen, disc, aml, tc = build_configs(cfg)
            digest = run_digest(cfg)
            log.info("ablation %s: %s", table, label)
            if cfg["train"]["cross_validation"]:
                res = run_cross_validation(train_ds, gen, disc, aml, tc, test_ds=test_ds)
                cms = [r.cm for r in res.rows]
            else:
                r = train_model(train_ds, val_ds, gen, disc, aml, tc)
                cms = [evaluate(r.model.G, test_ds if test_ds is not None else val_ds)]
            row = {"table": table, "setting": label, "config_digest": digest}
            for c, n in enumerate(names):
                row[f"{n}_iou"] = float(np.mean([cm.iou(c) for cm in cms]))
            mious = [cm.mean_iou() for cm in cms]
            row["miou_mean"], row["miou_std"] = float(np.mean(mious)), float(np.std(mious))
            row["runs"] = len(cms)
            rows.append(row)
    cols = (["table", "setting"] + [f"{n}_iou" for n in names]
            + ["miou_mean", "miou_std", "runs", "config_digest"])
    write_csv(out / "ablation.csv", rows, cols, base_digest)
    print(out / "ablation.csv")
    return 0


def _load_image(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


@torch.no_grad()
def attention_heatmaps(model: Model, img: torch.Tensor, mask: torch.Tensor, pixels) -> dict:
    """(site, (row, col)) -> attention of that pixel over all positions, renormalized to [0, 1]."""
    G, D = model.G, model.D
    with eval_mode(G), eval_mode(D):
        trace = generate(img, mask, G, D, model.aml, return_attention=True)
    h, w = img.shape[-2:]
    out = {}
    for site, attn in sorted(trace.ata_attention.items()):
        hk, wk = pooled_size(h, site), pooled_size(w, site)
        for row, col in pixels:
            if not (0 <= row < h and 0 <= col < w):
                raise ValueError(f"reference pixel ({row}, {col}) outside {h}x{w} image")
            idx = (row * hk // h) * wk + col * wk // w
            m = attn[0, idx].reshape(1, 1, hk, wk)
            m = bilinear_resize(m, h, w)[0, 0].numpy()
            out[(site, (row, col))] = normalize_unit(m)
    return out


def pooled_size(n: int, level: int) -> int:
    # the encoder halves with floor at every level
    for _ in range(level):
        n //= 2
    return n


def cmd_visualize(args) -> int:
    model, cfg, meta = _model_from_checkpoint(args.checkpoint)
    digest = meta["config_digest"]
    img = _load_image(args.image)
    if args.mask:
        rgb = np.asarray(Image.open(args.mask).convert("RGB"))
        mask = torch.from_numpy(decode_mask(rgb, cfg["data"]["palette"], str(args.mask)))[None]
    else:
        # no ground truth: the model's own prediction stands in for the PDA target
        mask = torch.from_numpy(predict(model.G, img))
    h, w = img.shape[-2:]
    pixels = [tuple(p) for p in args.pixel] if args.pixel else [(h // 2, w // 2)]
    out = output_dir(args.out or Path(cfg["output"]["dir"]) / "visualize")
    summary = {"config_digest": digest, "ata": [], "pda": []}
    if not any(isinstance(m, AtaModule) for m in model.G.leak.values()):
        log.warning("checkpoint has no attention connectors; skipping ATA heatmaps")
    else:
        for (site, (r, c)), m in attention_heatmaps(model, img, mask, pixels).items():
            name = f"ata_site{site}_r{r}_c{c}.png"
            save_png(out / name, render_heatmap(m, args.palette), digest)
            summary["ata"].append({"file": name, "site": site, "pixel": [r, c],
                                   "min": float(m.min()), "max": float(m.max())})
    for k, m in sorted(pda_maps(model, img, mask).items()):
        name = f"pda_level{k}.png"
        save_png(out / name, render_heatmap(m, args.palette), digest)
        summary["pda"].append({"file": name, "level": k, "min": float(m.min()), "max": float(m.max())})
    with open(out / "visualize.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(out)
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amlnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. aml.lambda_adv=0.1")

    sp = sub.add_parser("print-config", help="print the resolved configuration with all defaults")
    with_config(sp)
    sp.set_defaults(func=cmd_print_config)

    sp = sub.add_parser("synth", help="write a synthetic cell dataset")
    sp.add_argument("--spec", help="YAML synthetic spec (fields of SynthSpec)")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one model, or run the k-fold protocol")
    with_config(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint and write predicted masks")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset directory with images/ and masks/")
    with_config(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train over a sweep grid and tabulate mIoU")
    with_config(sp)
    sp.add_argument("--sweep", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("visualize", help="export ATA attention and PDA difficulty maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--pixel", nargs=2, type=int, action="append", metavar=("ROW", "COL"))
    sp.add_argument("--palette", choices=("gray", "diverging"), default="gray")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
