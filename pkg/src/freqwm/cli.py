"""Command line surface: embed, decode, detect, attack, evaluate, sweep, gen-key.

Every command records what it did as append-only JSONL run records so each
emitted number is recomputable from (config, seed, backend identities). CSV
artifacts carry a schema version column; manifests are pure functions of
their inputs so reruns with the same seed are bit-identical.

Exit codes: 0 success, 1 not-watermarked (single-image detect), 2 config
error, 3 backend error, 4 runtime error. The model cache directory honors
the FREQWM_CACHE environment variable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import json
import sys
import uuid
from pathlib import Path

import numpy as np
import torch

from . import backends
from .attacks import AttackSpec, apply_attack, codec_identity, default_battery, validate_spec
from .detect import detect, decode, fpr
from .embed import EmbedConfig, embed
from .errors import (
    AttackError,
    CapabilityError,
    CapacityError,
    ConfigError,
    FreqwmError,
    InvalidInputError,
    KeyFormatError,
    RegistryError,
)
from .images import load_image, save_image, synthetic_corpus
from .keys import Message, generate_key, load_key, random_message, save_key
from .metrics import psnr, ssim

EXIT_OK = 0
EXIT_NOT_WATERMARKED = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_RUNTIME = 4

CONFIG_VERSION = 1
MANIFEST_SCHEMA = "manifest-v1"
RECORD_SCHEMA = "record-v1"
EVAL_SCHEMA = "eval-v1"
CURVE_SCHEMA = "curve-v1"
SWEEP_SCHEMA = "sweep-v1"
GRID_SCHEMA = "noise-grid-v1"

_DEFAULT_BACKENDS = {"codec": "identity", "feature": "patch-proj-64", "perceptual": "l2-smooth"}
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

SWEEP_AXES = ("quality", "bits", "latent-noise", "pixel-noise", "steps", "noise-grid")
# sweep axis -> EmbedConfig field ("quality" tunes the PSNR weight)
_AXIS_FIELDS = {
    "quality": "lambda_p",
    "latent-noise": "latent_noise_std",
    "pixel-noise": "pixel_noise_std",
    "steps": "steps",
}


# -- plumbing -------------------------------------------------------------


def key_fingerprint(key) -> str:
    """Content hash so manifests can be checked against the key they used."""
    h = hashlib.sha256()
    h.update(f"{key.bits}|{key.feature_dim}|{key.scheme}|{key.seed}|{key.margin}|".encode())
    h.update(np.ascontiguousarray(key.vectors, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} is not valid JSON: {exc}") from exc
    if not isinstance(data, (dict, list)):
        raise ConfigError(f"{what} must be a JSON object or array")
    return data


def _cfg_from_dict(values: dict) -> EmbedConfig:
    fields = {f.name for f in dataclasses.fields(EmbedConfig)}
    unknown = set(values) - fields
    if unknown:
        raise ConfigError(f"unknown embed option(s) {sorted(unknown)}")
    coerced = dict(values)
    for name in ("crop_scale", "crop_ratio"):
        if name in coerced and isinstance(coerced[name], list):
            coerced[name] = tuple(coerced[name])
    return EmbedConfig(**coerced)


def _load_run_config(args) -> tuple[EmbedConfig, dict]:
    """Merge config file, CLI overrides, and defaults into (EmbedConfig, backend names)."""
    embed_values: dict = {}
    names = dict(_DEFAULT_BACKENDS)
    if getattr(args, "config", None):
        data = _read_json(args.config, "config file")
        if data.get("config_version") != CONFIG_VERSION:
            raise ConfigError(
                f"config_version must be {CONFIG_VERSION}, got {data.get('config_version')!r}"
            )
        unknown = set(data) - {"config_version", "embed", "backends"}
        if unknown:
            raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
        embed_values.update(data.get("embed", {}))
        bad = set(data.get("backends", {})) - set(names)
        if bad:
            raise ConfigError(f"unknown backend role(s) {sorted(bad)}")
        names.update(data.get("backends", {}))
    overrides = {
        "domain": getattr(args, "domain", None),
        "steps": getattr(args, "steps", None),
        "learning_rate": getattr(args, "lr", None),
        "lambda_p": getattr(args, "lambda_p", None),
        "lambda_i": getattr(args, "lambda_i", None),
        "latent_noise_std": getattr(args, "latent_noise", None),
        "pixel_noise_std": getattr(args, "pixel_noise", None),
        "spatial_augs": getattr(args, "spatial_augs", None),
        "seed": getattr(args, "seed", None),
    }
    embed_values.update({k: v for k, v in overrides.items() if v is not None})
    for role in ("codec", "feature", "perceptual"):
        value = getattr(args, role, None)
        if value is not None:
            names[role] = value
    return _cfg_from_dict(embed_values), names


def _get_backends(names: dict):
    codec = backends.get_backend("latent-codec", names["codec"])
    feat = backends.get_backend("feature-encoder", names["feature"])
    perc = backends.get_backend("perceptual", names["perceptual"])
    return codec, feat, perc


def backend_identities(names: dict) -> dict:
    return {
        **names,
        "jpeg_codec": codec_identity(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }


def _collect_images(paths: list[str]) -> list[tuple[str, Path]]:
    """Expand files and directories into unique (id, path) pairs."""
    entries: list[tuple[str, Path]] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            entries.extend(
                (f.stem, f) for f in sorted(p.iterdir()) if f.suffix.lower() in _IMAGE_SUFFIXES
            )
        else:
            entries.append((p.stem, p))
    ids = [iid for iid, _ in entries]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate image ids; rename files so stems are unique")
    return entries


def _append_record(path: Path, command: str, config: dict, names: dict, rows: list[dict]) -> None:
    record = {
        "schema": RECORD_SCHEMA,
        "run_id": uuid.uuid4().hex,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "command": command,
        "config": config,
        "backends": backend_identities(names),
        "rows": rows,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _battery_from_args(args) -> list[AttackSpec]:
    """Resolve --battery default|none|FILE or --attack NAME [--param k=v ...]."""
    name = getattr(args, "attack", None)
    battery = getattr(args, "battery", None)
    if name and battery:
        raise ConfigError("pass either --attack or --battery, not both")
    if name:
        params = {}
        for item in args.param or []:
            if "=" not in item:
                raise ConfigError(f"--param needs key=value, got {item!r}")
            k, _, v = item.partition("=")
            try:
                params[k] = json.loads(v)
            except json.JSONDecodeError:
                params[k] = v
        specs = [AttackSpec(name, params, seed=args.attack_seed)]
    elif battery in (None, "default"):
        specs = default_battery(seed=getattr(args, "attack_seed", 0))
    elif battery == "none":
        specs = []
    else:
        data = _read_json(battery, "battery file")
        if not isinstance(data, list):
            raise ConfigError("battery file must be a JSON array of attack specs")
        specs = []
        for entry in data:
            extra = set(entry) - {"name", "params", "seed", "label"}
            if extra:
                raise ConfigError(f"battery entry has unknown field(s) {sorted(extra)}")
            if "name" not in entry:
                raise ConfigError("battery entry is missing 'name'")
            if entry["name"] == "none":
                continue  # the unattacked baseline is always evaluated
            specs.append(
                AttackSpec(
                    entry["name"],
                    entry.get("params", {}),
                    seed=entry.get("seed", 0),
                    label=entry.get("label"),
                )
            )
    for spec in specs:
        validate_spec(spec)
    labels = [s.key() for s in specs]
    if len(set(labels)) != len(labels) or "none" in labels:
        raise ConfigError("battery labels must be unique and distinct from 'none'")
    return specs


def _read_manifest(path) -> dict:
    data = _read_json(path, "manifest")
    if data.get("schema") != MANIFEST_SCHEMA:
        raise ConfigError(f"manifest schema must be {MANIFEST_SCHEMA!r}, got {data.get('schema')!r}")
    return data


def _check_manifest_key(manifest: dict, key) -> None:
    want = manifest["key"]["fingerprint"]
    got = key_fingerprint(key)
    if want != got:
        raise ConfigError(f"key does not match manifest (fingerprint {got} != {want})")


# -- commands -------------------------------------------------------------


def cmd_gen_key(args) -> int:
    key = generate_key(
        args.bits,
        args.feature_dim,
        scheme=args.scheme,
        seed=args.key_seed,
        margin=args.margin,
    )
    save_key(key, args.out)
    print(f"wrote {args.out}: {key.bits} bits, feature_dim {key.feature_dim}, {key.scheme}")
    return EXIT_OK


def cmd_embed(args) -> int:
    cfg, names = _load_run_config(args)
    key = load_key(args.key)
    fixed = Message.from_binary(args.message) if args.message else None
    entries = _collect_images(args.images)
    codec, feat, perc = _get_backends(names)
    # preflight every input before the first output so failures leave nothing partial
    loaded = []
    for iid, path in entries:
        try:
            loaded.append((iid, load_image(path)))
        except (OSError, InvalidInputError) as exc:
            raise ConfigError(f"cannot read image {path}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx, (iid, image) in enumerate(loaded):
        message = fixed if fixed is not None else random_message(key.bits, args.message_seed + idx)
        result = embed(image, key, message, codec, feat, perc, cfg)
        save_image(result.watermarked, out / f"{iid}.png")
        rows.append(
            {
                "id": iid,
                "file": f"{iid}.png",
                "message": message.to_binary(),
                "bit_accuracy": result.final_bit_accuracy_clean,
                "matched_bits": int(result.final_bit_accuracy_clean * key.bits + 0.5),
                "psnr": result.final_psnr,
                "ssim": result.quality.ssim,
                "l2": result.quality.l2,
            }
        )
        print(f"{iid}: acc={result.final_bit_accuracy_clean:.4f} psnr={result.final_psnr:.2f}")
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "key": {"file": str(args.key), "bits": key.bits, "fingerprint": key_fingerprint(key)},
        "embed_config": dataclasses.asdict(cfg),
        "backends": names,
        "message_seed": args.message_seed,
        "images": rows,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _append_record(out / "run_records.jsonl", "embed", dataclasses.asdict(cfg), names, rows)
    return EXIT_OK


def cmd_decode(args) -> int:
    key = load_key(args.key)
    feat = backends.get_backend("feature-encoder", args.feature or _DEFAULT_BACKENDS["feature"])
    for iid, path in _collect_images(args.images):
        try:
            message = decode(load_image(path), key, feat)
            row = {"id": iid, "bits": message.to_binary()}
        except (OSError, InvalidInputError) as exc:
            row = {"id": iid, "error": f"{type(exc).__name__}: {exc}"}
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_detect(args) -> int:
    key = load_key(args.key)
    manifest = _read_manifest(args.manifest) if args.manifest else None
    if manifest is None and not args.message:
        raise ConfigError("detect needs --message or --manifest for the expected bits")
    feature_name = args.feature
    expected: dict[str, str] = {}
    if manifest is not None:
        _check_manifest_key(manifest, key)
        expected = {row["id"]: row["message"] for row in manifest["images"]}
        feature_name = feature_name or manifest["backends"]["feature"]
    feat = backends.get_backend("feature-encoder", feature_name or _DEFAULT_BACKENDS["feature"])
    entries = _collect_images(args.images)
    rows = []
    for iid, path in entries:
        try:
            image = load_image(path)
            bits = args.message if args.message else expected.get(iid)
            if bits is None:
                raise InvalidInputError(f"manifest has no entry for image id {iid!r}")
            report = detect(image, key, Message.from_binary(bits), feat, target_fpr=args.target_fpr)
            row = {"id": iid, **report.to_record()}
        except (OSError, InvalidInputError) as exc:
            row = {"id": iid, "error": f"{type(exc).__name__}: {exc}"}
        rows.append(row)
        print(json.dumps(row, sort_keys=True))
    if args.records:
        _append_record(
            Path(args.records),
            "detect",
            {"target_fpr": args.target_fpr},
            {**_DEFAULT_BACKENDS, "feature": feature_name or _DEFAULT_BACKENDS["feature"]},
            rows,
        )
    if len(entries) == 1:
        if "error" in rows[0]:
            return EXIT_RUNTIME
        return EXIT_OK if rows[0]["decision"] == "watermarked" else EXIT_NOT_WATERMARKED
    return EXIT_OK


def cmd_attack(args) -> int:
    specs = _battery_from_args(args)
    if not specs:
        raise ConfigError("nothing to apply; pass --attack or a non-empty --battery")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for iid, path in _collect_images(args.images):
        image = load_image(path)
        for spec in specs:
            save_image(apply_attack(image, spec), out / f"{iid}__{spec.key()}.png")
            count += 1
    print(f"wrote {count} attacked image(s) to {out}")
    return EXIT_OK


def _evaluate_one(image, message, key, feat, specs, target_fpr):
    """Decode the image and every attacked variant; rows keyed by attack label."""
    variants = [("none", image)]
    variants += [(spec.key(), apply_attack(image, spec)) for spec in specs]
    rows = []
    for label, attacked in variants:
        report = detect(attacked, key, message, feat, target_fpr=target_fpr)
        rows.append(
            {
                "attack": label,
                "bit_accuracy": report.bit_accuracy,
                "matched_bits": report.matched_bits,
                "decision": report.decision,
                "psnr": float(psnr(image, attacked)),
                "ssim": float(ssim(image, attacked)),
            }
        )
    return rows


def _aggregate(per_image: dict[str, list[dict]], labels: list[str], domain: str) -> list[list]:
    rows = []
    for label in labels:
        sample = per_image[label]
        acc = np.array([r["bit_accuracy"] for r in sample])
        q_psnr = np.array([r["psnr"] for r in sample])
        q_ssim = np.array([r["ssim"] for r in sample])
        detected = np.mean([r["decision"] == "watermarked" for r in sample])
        rows.append(
            [
                EVAL_SCHEMA,
                domain,
                label,
                len(sample),
                _fmt(acc.mean()),
                _fmt(acc.std()),
                _fmt(q_psnr.mean()),
                _fmt(q_psnr.std()),
                _fmt(q_ssim.mean()),
                _fmt(q_ssim.std()),
                _fmt(float(detected)),
            ]
        )
    return rows


_EVAL_HEADER = [
    "schema",
    "domain",
    "attack",
    "n",
    "bit_acc_mean",
    "bit_acc_std",
    "psnr_mean",
    "psnr_std",
    "ssim_mean",
    "ssim_std",
    "detect_rate",
]


def _curve_rows(counts: list[int], k: int, label: str) -> list[list]:
    """Parametric TPR/FPR curve: decision rule M >= threshold for all thresholds."""
    arr = np.array(counts)
    rows = []
    for threshold in range(0, k + 2):
        rate = 1.0 if threshold == 0 else fpr(threshold - 1, k)
        tpr = float(np.mean(arr >= threshold))
        rows.append([CURVE_SCHEMA, label, threshold, f"{rate:.12e}", _fmt(tpr)])
    return rows


def _plot_curve(rows: list[list], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [float(r[3]) for r in rows if float(r[3]) > 0]
    ys = [float(r[4]) for r in rows if float(r[3]) > 0]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.semilogx(xs, ys, "-o", markersize=3)
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    ax.set_title(rows[0][1])
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def cmd_evaluate(args) -> int:
    key = load_key(args.key)
    manifest = _read_manifest(args.manifest)
    _check_manifest_key(manifest, key)  # hard error before any attack runs
    specs = _battery_from_args(args)
    feature_name = args.feature or manifest["backends"]["feature"]
    feat = backends.get_backend("feature-encoder", feature_name)
    domain = manifest["embed_config"]["domain"]
    wm_dir = Path(args.watermarked)
    labels = ["none"] + [s.key() for s in specs]
    per_image: dict[str, list[dict]] = {label: [] for label in labels}
    record_rows = []
    errors = []
    for entry in manifest["images"]:
        iid = entry["id"]
        try:
            image = load_image(wm_dir / entry["file"])
            rows = _evaluate_one(
                image, Message.from_binary(entry["message"]), key, feat, specs, args.target_fpr
            )
        except (OSError, InvalidInputError) as exc:
            errors.append({"id": iid, "error": f"{type(exc).__name__}: {exc}"})
            record_rows.append(errors[-1])
            continue
        for row in rows:
            per_image[row["attack"]].append(row)
            record_rows.append({"id": iid, **row})
    if not any(per_image[label] for label in labels):
        raise FreqwmError("no image in the manifest could be evaluated")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "eval.csv", _EVAL_HEADER, _aggregate(per_image, labels, domain))
    curve_rows = []
    for label in labels:
        counts = [r["matched_bits"] for r in per_image[label]]
        rows = _curve_rows(counts, key.bits, label)
        curve_rows.extend(rows)
        if not args.no_plots:
            safe = "".join(c if c.isalnum() or c in "-_" else "-" for c in label)
            _plot_curve(rows, out / "plots" / f"tpr_fpr_{safe}.png")
    _write_csv(out / "curves.csv", ["schema", "attack", "threshold", "fpr", "tpr"], curve_rows)
    _append_record(
        out / "run_records.jsonl",
        "evaluate",
        {"manifest": str(args.manifest), "target_fpr": args.target_fpr},
        {**manifest["backends"], "feature": feature_name},
        record_rows,
    )
    for line in _aggregate(per_image, labels, domain):
        print(f"{line[2]}: acc={line[4]} +/- {line[5]} detect_rate={line[10]}")
    if errors:
        print(f"{len(errors)} image(s) skipped with errors; see run_records.jsonl")
    return EXIT_OK


def _sweep_images(args) -> list[tuple[str, torch.Tensor]]:
    if args.synthetic:
        corpus = synthetic_corpus(args.synthetic, size=args.size, seed=args.corpus_seed)
        return [(f"synthetic-{i:03d}", im) for i, im in enumerate(corpus)]
    if not args.images:
        raise ConfigError("sweep needs image paths or --synthetic N")
    return [(iid, load_image(path)) for iid, path in _collect_images(args.images)]


def _sweep_point(images, key, cfg, names, specs, target_fpr, message_seed):
    """Embed every image at one grid point and decode under the battery."""
    codec, feat, perc = _get_backends(names)
    labels = ["none"] + [s.key() for s in specs]
    per_label: dict[str, list[float]] = {label: [] for label in labels}
    quality = []
    for idx, (_, image) in enumerate(images):
        message = random_message(key.bits, message_seed + idx)
        result = embed(image, key, message, codec, feat, perc, cfg)
        quality.append(result.final_psnr)
        rows = _evaluate_one(result.watermarked, message, key, feat, specs, target_fpr)
        for row in rows:
            per_label[row["attack"]].append(row["bit_accuracy"])
    return per_label, float(np.mean(quality))


def _grid_values(axis: str, raw: str) -> list:
    if not raw:
        raise ConfigError("sweep needs --grid with comma-separated values")
    kind = int if axis in ("bits", "steps") else float
    try:
        return [kind(v) for v in raw.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad grid value for axis {axis}: {exc}") from exc


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; known: {', '.join(SWEEP_AXES)}")
    cfg, names = _load_run_config(args)
    key = load_key(args.key)
    specs = _battery_from_args(args)
    images = _sweep_images(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.axis == "noise-grid":
        s1_axis = [round(0.05 * i, 2) for i in range(11)]
        s2_axis = [round(0.02 * i, 2) for i in range(11)]
        header = ["schema", "s1"] + [f"s2={v:.2f}" for v in s2_axis]
        matrix = []
        for s1 in s1_axis:
            cells = []
            for s2 in s2_axis:
                point = dataclasses.replace(cfg, latent_noise_std=s1, pixel_noise_std=s2)
                per_label, _ = _sweep_point(
                    images, key, point, names, specs, args.target_fpr, args.message_seed
                )
                cells.append(_fmt(np.mean([np.mean(v) for v in per_label.values()])))
            matrix.append([GRID_SCHEMA, f"{s1:.2f}"] + cells)
            print(f"s1={s1:.2f} done")
        _write_csv(out / "noise_grid.csv", header, matrix)
        _append_record(
            out / "run_records.jsonl",
            "sweep",
            {"axis": args.axis, "base": dataclasses.asdict(cfg)},
            names,
            [{"s1": row[1], "cells": row[2:]} for row in matrix],
        )
        return EXIT_OK

    values = _grid_values(args.axis, args.grid)
    rows = []
    record_rows = []
    for value in values:
        try:
            if args.axis == "bits":
                point_key = generate_key(
                    int(value), key.feature_dim, scheme=key.scheme, seed=key.seed, margin=key.margin
                )
                point_cfg = cfg
            else:
                point_key = key
                point_cfg = dataclasses.replace(cfg, **{_AXIS_FIELDS[args.axis]: value})
            per_label, mean_psnr = _sweep_point(
                images, key=point_key, cfg=point_cfg, names=names,
                specs=specs, target_fpr=args.target_fpr, message_seed=args.message_seed,
            )
        except FreqwmError as exc:  # record the failed point, keep sweeping
            rows.append([SWEEP_SCHEMA, args.axis, value, "", 0, "", "", f"{type(exc).__name__}: {exc}"])
            record_rows.append({"value": value, "error": str(exc)})
            continue
        for label in ["none"] + [s.key() for s in specs]:
            acc = per_label[label]
            rows.append(
                [SWEEP_SCHEMA, args.axis, value, label, len(acc), _fmt(np.mean(acc)), _fmt(mean_psnr), ""]
            )
            record_rows.append(
                {"value": value, "attack": label, "acc_mean": float(np.mean(acc)), "psnr_mean": mean_psnr}
            )
        print(f"{args.axis}={value} done")
    header = ["schema", "axis", "value", "attack", "n", "acc_mean", "psnr_mean", "error"]
    _write_csv(out / "sweep.csv", header, rows)
    if not args.no_plots:
        _plot_sweep(rows, out / "sweep.png")
    _append_record(
        out / "run_records.jsonl",
        "sweep",
        {"axis": args.axis, "grid": values, "base": dataclasses.asdict(cfg)},
        names,
        record_rows,
    )
    return EXIT_OK


def _plot_sweep(rows: list[list], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_attack: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        if row[7] or row[3] == "":
            continue
        by_attack.setdefault(row[3], []).append((float(row[2]), float(row[5])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, points in by_attack.items():
        xs, ys = zip(*sorted(points))
        ax.plot(xs, ys, "-o", label=label, markersize=3)
    ax.set_xlabel(rows[0][1] if rows else "value")
    ax.set_ylabel("bit accuracy")
    ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# -- argument parsing -------------------------------------------------------


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--codec", help="latent codec backend name")
    p.add_argument("--feature", help="feature encoder backend name")
    p.add_argument("--perceptual", help="perceptual metric backend name")


def _add_embed_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (config_version, embed, backends)")
    p.add_argument("--domain", choices=["pixel", "pixel-frequency", "latent", "latent-frequency"])
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-p", type=float, dest="lambda_p")
    p.add_argument("--lambda-i", type=float, dest="lambda_i")
    p.add_argument("--latent-noise", type=float, dest="latent_noise")
    p.add_argument("--pixel-noise", type=float, dest="pixel_noise")
    p.add_argument("--spatial-augs", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int, help="optimizer view-noise seed")
    p.add_argument("--message-seed", type=int, default=0, dest="message_seed")


def _add_battery_flags(p: argparse.ArgumentParser, default=None) -> None:
    p.add_argument("--battery", default=default, help="'default', 'none', or a JSON battery file")
    p.add_argument("--attack", help="single attack name instead of a battery")
    p.add_argument("--param", action="append", help="attack parameter key=value (repeatable)")
    p.add_argument("--attack-seed", type=int, default=0, dest="attack_seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqwm",
        description="Frequency-domain image watermarking: embed, decode, detect, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-key", help="generate and save a watermark key")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--feature-dim", type=int, required=True, dest="feature_dim")
    p.add_argument("--scheme", default="canonical-basis")
    p.add_argument("--key-seed", type=int, default=0, dest="key_seed")
    p.add_argument("--margin", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_key)

    p = sub.add_parser("embed", help="watermark images and write a manifest")
    p.add_argument("images", nargs="+", help="image files or directories")
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--message", help="fixed binary message for every image")
    _add_embed_flags(p)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("decode", help="print decoded bits per image")
    p.add_argument("images", nargs="+")
    p.add_argument("--key", required=True)
    p.add_argument("--feature")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("detect", help="decide watermarked vs not at a target FPR")
    p.add_argument("images", nargs="*")
    p.add_argument("--key", required=True)
    p.add_argument("--message", help="expected binary message")
    p.add_argument("--manifest", help="manifest.json from embed for per-image messages")
    p.add_argument("--target-fpr", type=float, default=1e-6, dest="target_fpr")
    p.add_argument("--feature")
    p.add_argument("--records", help="JSONL file to append the run record to")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("attack", help="write attacked copies of images")
    p.add_argument("images", nargs="+")
    p.add_argument("--out", required=True)
    _add_battery_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="per-attack accuracy table, TPR/FPR curves, plots")
    p.add_argument("--watermarked", required=True, help="directory of watermarked images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-fpr", type=float, default=1e-6, dest="target_fpr")
    p.add_argument("--feature")
    p.add_argument("--no-plots", action="store_true", dest="no_plots")
    _add_battery_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="embed+evaluate along a parameter grid")
    p.add_argument("images", nargs="*")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--grid", help="comma-separated grid values (ignored for noise-grid)")
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", type=int, help="use N synthetic images instead of files")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--corpus-seed", type=int, default=0, dest="corpus_seed")
    p.add_argument("--target-fpr", type=float, default=1e-6, dest="target_fpr")
    p.add_argument("--no-plots", action="store_true", dest="no_plots")
    _add_embed_flags(p)
    _add_backend_flags(p)
    _add_battery_flags(p, default="none")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, KeyFormatError, CapacityError, InvalidInputError, AttackError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (RegistryError, CapabilityError) as exc:
        return _fail(EXIT_BACKEND, exc)
    except (FreqwmError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)


def _fail(code: int, exc: Exception) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
