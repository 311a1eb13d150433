"""Command-line front end: dataset generation, experiments, compression
benchmarks, and report rendering.

All outputs embed the canonical config hash and seed so identical inputs
reproduce byte-identical files; wall-clock timings go to a separate file
(``timing.json``) that is excluded from that guarantee.

Exit codes: 0 success, 2 config or format error, 3 runtime numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import compression, data, protocols
from .core import FormatError
from .decoder import TrainingBatch, loss_gradients
from .replay import SamplerConfig


def canonical_json(obj) -> str:
    """Canonical serialization: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON in {path}: {exc}") from exc


def _spec_from_dict(raw: dict) -> data.SyntheticSpec:
    known = {f for f in data.SyntheticSpec.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown synthetic spec field(s): {sorted(unknown)}")
    spec = data.SyntheticSpec(**raw)
    spec.validate()
    return spec


def _sampler_from_dict(raw: dict) -> SamplerConfig:
    cfg = SamplerConfig(
        strategy=raw.get("strategy", "class_balanced"),
        batch_size=int(raw.get("batch_size", 32)),
        decay=float(raw.get("decay", 0.99)),
        weight_floor=float(raw.get("weight_floor", 0.01)),
    )
    cfg.validate()
    return cfg


def _engine_config_from_dict(raw: dict) -> protocols.EngineConfig:
    cfg = protocols.EngineConfig(
        decoder_variant=raw.get("decoder", "linear"),
        weighting=raw.get("weighting", "ocw"),
        sampler=_sampler_from_dict(raw.get("sampler", {})),
        beta=float(raw.get("beta", 0.1)),
        ema_decay=float(raw.get("ema_decay", 0.99)),
        lr=float(raw.get("lr", 9.375e-6)),
        weight_decay=float(raw.get("weight_decay", 0.05)),
        compression=raw.get("compression", "none"),
        pca_components=int(raw.get("pca_components", 5)),
        dataset_pca_components=int(raw.get("dataset_pca_components", 200)),
        chunk_size=int(raw.get("chunk_size", 5000)),
        p_other_weighting=bool(raw.get("p_other_weighting", False)),
        seed=int(raw.get("seed", 0)),
    )
    cfg.validate()
    return cfg


def _dataset_from_config(raw: dict) -> data.Dataset:
    if "dataset" in raw:
        return data.load(raw["dataset"])
    if "synthetic" in raw:
        return data.generate(_spec_from_dict(raw["synthetic"]))
    raise ValueError("config needs either a 'dataset' path or a 'synthetic' spec")


def _suites_from_config(raw: dict, dataset: data.Dataset):
    if "suites" not in raw:
        return None
    suites = []
    for entry in raw["suites"]:
        ids = entry.get("samples", "all")
        if ids == "all":
            ids = list(range(len(dataset.samples)))
        cands = entry.get("candidates", "all")
        if cands == "all":
            cands = dataset.labels()
        suites.append(protocols.EvalSuite(entry["name"], list(ids), set(cands)))
    return suites


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    raw = _load_json(args.spec)
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = _spec_from_dict(raw)
    dataset = data.generate(spec)
    data.save(dataset, args.out)
    print(f"wrote {args.out}: {len(dataset.samples)} samples, "
          f"{len(dataset.labels())} classes (config {config_hash(asdict(spec))})")
    return 0


def cmd_run(args) -> int:
    raw = _load_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    dataset = _dataset_from_config(raw)
    config = _engine_config_from_dict(raw)
    suites = _suites_from_config(raw, dataset)
    stream = protocols.build_stream(
        dataset, raw.get("protocol", "data_incremental"), seed=config.seed,
        fractions=raw.get("fractions", protocols.DEFAULT_FRACTIONS),
        class_groups=int(raw.get("class_groups", 5)), suites=suites)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        record = protocols.run_stream(dataset, stream, config)
        chash = config_hash(raw)
        metrics_path = out / "metrics.csv"
        _write_metrics_csv(record, metrics_path, chash, config.seed)
        written.append(metrics_path)
        last_stage = stream[-1].index
        summary = {
            "config_hash": chash,
            "seed": config.seed,
            "stages": len(stream),
            "suites": sorted({name for _, name, _ in record.rows}),
            "final": {name: acc for stage, name, acc in record.rows
                      if stage == last_stage},
        }
        summary_path = out / "summary.json"
        summary_path.write_text(canonical_json(summary) + "\n")
        written.append(summary_path)
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    print(f"wrote {out}/metrics.csv and summary.json (config {config_hash(raw)})")
    return 0


def _write_metrics_csv(record, path, chash, seed) -> None:
    lines = [f"# config_hash={chash}", f"# seed={seed}", "stage,suite,accuracy"]
    for stage, suite, acc in record.rows:
        lines.append(f"{stage},{suite},{acc!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_compress(args) -> int:
    dataset = data.load(args.dataset)
    if args.mode not in protocols.COMPRESSION_MODES:
        raise ValueError(f"unknown compression mode {args.mode!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.components
    tokens = [dataset.tokens(i) for i in range(len(dataset.samples))]

    codec = None
    payloads = []
    errors = []
    for i, tm in enumerate(tokens):
        if args.mode == "none":
            payloads.append(tm)
            errors.append(0.0)
            continue
        if args.mode == "dataset-pca":
            if codec is None:
                codec = compression.DatasetPcaCodec.fit(
                    tokens, chunk_size=args.chunk_size, n_components=n)
            recon = codec.decode(i, codec.encode(i, tm))
            # Storage for this mode is the coefficient matrix per sample.
            payloads.append(codec.encode(i, tm))
            errors.append(_rel_err(tm, recon))
            continue
        cf = compression.compress(
            tm, n, quantized=(args.mode == "pca-cls-quant"),
            cls_weight=(args.mode in ("pca-cls", "pca-cls-quant")))
        payloads.append(cf)
        errors.append(_rel_err(tm, compression.reconstruct(cf)))

    sizes = [compression.storage_bytes(p) for p in payloads]
    kb = float(np.mean(sizes)) / 1024.0
    err = float(np.mean(errors))
    # Identify the dataset by content, not path, so moving the file does
    # not change the report hash.
    dataset_digest = hashlib.sha256(Path(args.dataset).read_bytes()).hexdigest()[:16]
    meta = {"mode": args.mode, "components": n, "dataset": dataset_digest}
    chash = config_hash(meta)
    report = out / "compression.csv"
    report.write_text(
        f"# config_hash={chash}\n"
        "mode,kb_per_sample,bytes_per_sample,reconstruction_rel_error\n"
        f"{args.mode},{kb!r},{float(np.mean(sizes))!r},{err!r}\n")

    ms = _time_batch(dataset, payloads, args.mode, repetitions=args.repetitions)
    (out / "timing.json").write_text(canonical_json(
        {"mode": args.mode, "ms_per_batch": ms, "repetitions": args.repetitions}) + "\n")
    print(f"{args.mode}: {kb:.2f} KB/sample, recon rel err {err:.5f}, "
          f"{ms:.2f} ms/batch (report: {report})")
    return 0


def _rel_err(original, recon) -> float:
    o = np.asarray(original, dtype=np.float64)
    r = np.asarray(recon, dtype=np.float64)
    denom = np.linalg.norm(o)
    return float(np.linalg.norm(o - r) / denom) if denom else 0.0


def _time_batch(dataset, payloads, mode, repetitions=100, batch_size=32) -> float:
    """Mean ms to load, reconstruct, and run one decoder train step on a batch."""
    from .decoder import linear_params

    table = dataset.label_table
    params = linear_params(table.dim)
    ids = list(range(min(batch_size, len(payloads))))
    blobs = None
    if mode != "dataset-pca":
        blobs = [compression.payload_to_bytes(payloads[i]) for i in ids]
    start = time.perf_counter()
    for _ in range(repetitions):
        samples = []
        for i in ids:
            if blobs is not None:
                payload, _ = compression.payload_from_bytes(blobs[i])
                tm = (compression.reconstruct(payload)
                      if isinstance(payload, compression.CompressedFeature) else payload)
            else:
                tm = dataset.tokens(i)
            samples.append((tm, dataset.samples[i][1]))
        batch = TrainingBatch(samples, set(dataset.labels()))
        loss_gradients(batch, params, table, beta=0.1)
    return (time.perf_counter() - start) / repetitions * 1000.0


def cmd_report(args) -> int:
    metrics_dir = Path(args.metrics_dir)
    files = sorted(metrics_dir.rglob("metrics.csv"))
    if not files:
        raise FormatError(f"no metrics.csv found under {metrics_dir}")
    runs = {}
    for path in files:
        rows = _read_metrics_csv(path)
        if not rows:
            raise FormatError(f"empty metrics file {path}")
        runs[str(path.parent.relative_to(metrics_dir)) or "."] = rows

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suites = sorted({suite for rows in runs.values() for _, suite, _ in rows})
    for suite in suites:
        series = {
            run: [(stage, acc) for stage, s, acc in rows if s == suite]
            for run, rows in runs.items()
        }
        series = {run: pts for run, pts in series.items() if pts}
        svg = _line_chart_svg(f"accuracy: {suite}", series)
        (out / f"{suite}.svg").write_text(svg)

    # Stage x suite accuracy matrix for the first run, in stage order.
    first = runs[sorted(runs)[0]]
    stages = sorted({stage for stage, _, _ in first})
    lines = ["stage," + ",".join(suites)]
    for stage in stages:
        cells = []
        for suite in suites:
            match = [acc for s, name, acc in first if s == stage and name == suite]
            cells.append(repr(match[0]) if match else "")
        lines.append(f"{stage}," + ",".join(cells))
    (out / "matrix.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(suites)} chart(s) and matrix.csv to {out}")
    return 0


def _read_metrics_csv(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("stage,"):
            continue
        stage, suite, acc = line.split(",")
        rows.append((int(stage), suite, float(acc)))
    return rows


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _line_chart_svg(title: str, series: dict, width=640, height=400) -> str:
    """Deterministic standalone SVG line chart (stages on x, accuracy on y)."""
    pad = 50
    xs = sorted({x for pts in series.values() for x, _ in pts})
    x_min, x_max = min(xs), max(xs)
    span = (x_max - x_min) or 1

    def px(x):
        return pad + (x - x_min) / span * (width - 2 * pad)

    def py(y):
        return height - pad - y * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<text x="{pad - 8}" y="{py(frac) + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{frac:.2f}</text>')
    for x in xs:
        parts.append(
            f'<text x="{px(x):.1f}" y="{height - pad + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{x}</text>')
    for i, run in enumerate(sorted(series)):
        color = _PALETTE[i % len(_PALETTE)]
        pts = sorted(series[run])
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i + 10}" '
                     f'font-family="sans-serif" font-size="10" fill="{color}">{run}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovstream",
        description="Online continual learning over embedding streams")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate and save a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON synthetic spec file")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run a protocol experiment")
    p.add_argument("--config", required=True, help="JSON experiment config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compress", help="compression benchmark over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", required=True,
                   choices=protocols.COMPRESSION_MODES)
    p.add_argument("--components", type=int, default=5)
    p.add_argument("--chunk-size", type=int, default=5000)
    p.add_argument("--repetitions", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("report", help="render SVG charts and the accuracy matrix")
    p.add_argument("--metrics-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FormatError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, np.linalg.LinAlgError, OverflowError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
