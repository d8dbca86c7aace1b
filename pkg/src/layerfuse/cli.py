"""Pipeline orchestration: one config, staged subcommands, CSV artifacts.

Every invocation resolves a full run configuration (JSON file plus flag
overrides), hashes it, and works inside ``<out>/run-<hash12>/``. Stages
that consume another stage's artifacts refuse to run before them, so a
directory can never mix a fresh mask set with stale probes: changing any
config value changes the hash and lands in a fresh directory.

Subcommands
    synth      generate a dataset from the config's synth block
    diagnose   per-layer alignment report (``--post-probe``: rerun on
               probed readouts and report the change)
    probe      train base and norm probes for every candidate layer
    mask       score candidates standalone and cut retention masks
    fuse       train the fusion head for the configured variant
    eval       fused vs identity-baseline retrieval with paired t-tests
    bench      storage/latency accounting, dense vs multi-vector
    sweep      tau/rho grids around the configured defaults

Exit codes: 0 success, 2 config error, 3 data error, 4 stage-order error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .repr_store import (FORMAT_VERSION, DumpError, LayerReadoutDataset,
                         load_dump, save_dump, split)
from .diagnostics import (DegenerateRepresentationError, DiagnosticsReport,
                          NoCandidatesError, compute_report,
                          compute_report_from_arrays, report_to_csv,
                          select_candidates)
from .probes import (ProbeParams, TrainConfig, load_probe, probe_forward,
                     save_probe, train_probes)
from .masking import (STANDALONE_POOLS, build_mask_set, mask_set_from_json,
                      mask_set_to_csv, mask_set_to_json)
from .fusion import (VARIANTS, assemble_plan, embed_dataset, identity_plan,
                     load_head, save_head, train_fusion)
from .retrieval_eval import (DenseIndex, MultiVectorIndex, dense_search,
                             eff_report_csv, latency_bench, ndcg_at_k,
                             paired_ttest, storage_bytes, write_run)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ORDER = 4

TAU_GRID = (0.5, 0.55, 0.6, 0.65, 0.7)
RHO_GRID = (0.1, 0.2, 0.3, 0.4)


class ConfigError(ValueError):
    """The run configuration is malformed or inconsistent."""


class StageOrderError(RuntimeError):
    """A stage was invoked before the stage that produces its inputs."""


# ---------------------------------------------------------------------------
# configuration

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}

SYNTH_PRESETS: dict[str, dict] = {
    # A healthy stack: every layer close to the anchors, no planted structure.
    "aligned": {
        "n_pairs": 2048, "dim": 32, "anchor_sigma": 0.05,
        "layers": [
            {"index": 0, "kind": "noisy", "sigma": 0.8},
            {"index": 1, "kind": "aligned"},
            {"index": 2, "kind": "aligned"},
        ],
    },
    # One orthogonally rotated layer between a junk layer and the anchors:
    # the demonstration case for the alignment-ratio diagnostic and for
    # probe-based recovery.
    "rotated": {
        "n_pairs": 2048, "dim": 32, "anchor_sigma": 0.1,
        "layers": [
            {"index": 0, "kind": "rotated", "rotation_seed": 1},
            {"index": 1, "kind": "aligned"},
            {"index": 2, "kind": "aligned"},
        ],
    },
    # Benchmark stack where recoverable signal genuinely lives below the
    # final layer: a clean 4-coordinate code, a broader 10-coordinate code
    # at lower per-coordinate snr, and a noisy-but-best final layer. Pair
    # with standalone_pool="anchor" so standalone scores share one doc pool.
    "planted": {
        "n_pairs": 2048, "dim": 32, "anchor_sigma": 0.24,
        "layers": [
            {"index": 0, "kind": "noisy", "sigma": 1.0},
            {"index": 1, "kind": "sparse", "support": 4, "snr": 8.0},
            {"index": 2, "kind": "sparse", "support": 10, "snr": 1.5},
            {"index": 3, "kind": "aligned"},
        ],
    },
}

_DESK_PROBE = dict(learning_rate=1e-2, batch_size=128, epochs=40,
                   temperature=0.1, seed=42)
_DESK_FUSION = dict(learning_rate=1e-2, batch_size=128, epochs=60,
                    temperature=0.1, weight_decay=1e-4, l1_lambda=0.0, seed=42)


@dataclass
class RunConfig:
    """Resolved settings for one pipeline run.

    The tau/rho defaults are the operating point the rest of the defaults
    were tuned around; every field is overridable from the config file and
    the narrower set of flags below.
    """

    dump: Optional[str] = None          # external payload; None = synth output
    out: str = "runs"
    seed: int = 42
    tau_cka: float = 0.6
    rho: float = 0.2
    k_base: int = 3
    variant: str = "full"
    standalone_pool: str = "layer"
    eval_k: tuple[int, ...] = (5, 10)
    train_fraction: float = 0.8
    split_seed: int = 7
    center_cka: bool = True
    synth: Optional[dict] = None
    probe: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant {self.variant!r} not one of {VARIANTS}")
        if self.standalone_pool not in STANDALONE_POOLS:
            raise ConfigError(f"standalone_pool {self.standalone_pool!r} "
                              f"not one of {STANDALONE_POOLS}")
        if not (0.0 <= self.tau_cka <= 1.0):
            raise ConfigError(f"tau_cka {self.tau_cka} outside [0, 1]")
        if not (0.0 < self.rho <= 1.0):
            raise ConfigError(f"rho {self.rho} outside (0, 1]")
        if self.k_base < 1:
            raise ConfigError(f"k_base must be >= 1, got {self.k_base}")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError(f"train_fraction {self.train_fraction} outside (0, 1)")
        self.eval_k = tuple(int(k) for k in self.eval_k)
        if not self.eval_k or any(k < 1 for k in self.eval_k):
            raise ConfigError(f"eval_k must be positive ints, got {self.eval_k}")
        for name, block in (("probe", self.probe), ("fusion", self.fusion)):
            bad = set(block) - _TRAIN_FIELDS
            if bad:
                raise ConfigError(f"unknown {name} settings: {sorted(bad)}")
        if self.dump is None and self.synth is None:
            raise ConfigError("config needs either a dump path or a synth block")

    def probe_train(self) -> TrainConfig:
        merged = {**_DESK_PROBE, "seed": self.seed, **self.probe}
        return TrainConfig(**merged)

    def fusion_train(self) -> TrainConfig:
        merged = {**_DESK_FUSION, "seed": self.seed, **self.fusion}
        return TrainConfig(**merged)

    def canonical(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["eval_k"] = list(self.eval_k)
        # where runs are stored is not part of what a run is
        doc.pop("out")
        return doc

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def resolve_synth_block(block: dict) -> "SynthConfig":
    from .synth import LayerSpec, SynthConfig
    if not isinstance(block, dict):
        raise ConfigError("synth block must be an object")
    merged = dict(block)
    preset = merged.pop("preset", None)
    if preset is not None:
        if preset not in SYNTH_PRESETS:
            raise ConfigError(f"unknown synth preset {preset!r}, "
                              f"have {sorted(SYNTH_PRESETS)}")
        merged = {**SYNTH_PRESETS[preset], **merged}
    layers = merged.pop("layers", None)
    if not layers:
        raise ConfigError("synth block needs a non-empty layers list")
    known = {"n_pairs", "dim", "anchor_sigma", "seed", "final_layer", "provenance"}
    bad = set(merged) - known
    if bad:
        raise ConfigError(f"unknown synth settings: {sorted(bad)}")
    spec_fields = {f.name for f in dataclasses.fields(LayerSpec)}
    specs = []
    for i, entry in enumerate(layers):
        bad = set(entry) - spec_fields
        if bad:
            raise ConfigError(f"synth layer {i}: unknown settings {sorted(bad)}")
        if "index" not in entry:
            entry = {**entry, "index": i}
        try:
            specs.append(LayerSpec(**entry))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth layer {i}: {exc}") from exc
    try:
        return SynthConfig(layer_specs=specs, **merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth block: {exc}") from exc


def load_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    bad = set(doc) - known
    if bad:
        raise ConfigError(f"unknown config keys: {sorted(bad)}")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.tau_cka is not None:
        doc["tau_cka"] = args.tau_cka
    if args.rho is not None:
        doc["rho"] = args.rho
    if args.variant is not None:
        doc["variant"] = args.variant
    if args.k is not None:
        doc["eval_k"] = [args.k]
    if args.out is not None:
        doc["out"] = args.out
    # a seed override flows into both training blocks unless they pin one
    try:
        return RunConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# run directory and manifest

def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / f"run-{cfg.config_hash()}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def record_stage(cfg: RunConfig, rundir: Path, stage: str, artifacts: list[Path]) -> None:
    """Refresh the reproducibility manifest after a stage completes."""
    manifest_path = rundir / "run.json"
    if manifest_path.exists():
        doc = json.loads(manifest_path.read_text())
    else:
        doc = {
            "config": cfg.canonical(),
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "formats": {"lrd": FORMAT_VERSION, "probe": "MPR1", "fuse": "MFU1"},
            "tool_version": __version__,
            "stages": {},
        }
    doc["stages"][stage] = {
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
    }
    manifest_path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise StageOrderError(f"{path.name} not found in {path.parent}; "
                              f"run `{producer}` first")
    return path


# ---------------------------------------------------------------------------
# shared stage plumbing

def load_run_dataset(cfg: RunConfig, rundir: Path) -> LayerReadoutDataset:
    if cfg.dump is not None:
        path = Path(cfg.dump)
        if not path.exists():
            raise DumpError("truncated", f"dump {path} does not exist")
        return load_dump(path)
    path = rundir / "data.lrd"
    require(path, "synth")
    return load_dump(path)


def train_val(cfg: RunConfig, ds: LayerReadoutDataset,
              ) -> tuple[LayerReadoutDataset, LayerReadoutDataset]:
    return split(ds, cfg.train_fraction, seed=cfg.split_seed)


def candidate_selection(cfg: RunConfig, report: DiagnosticsReport):
    return select_candidates(report, tau_cka=cfg.tau_cka, k_base=cfg.k_base)


def probe_path(rundir: Path, layer: int, kind: str) -> Path:
    return rundir / f"probe-L{layer:03d}-{kind}.probe"


def load_stage_probes(cfg: RunConfig, rundir: Path, layers: list[int],
                      kinds: dict[int, str]) -> dict[int, ProbeParams]:
    index_path = require(rundir / "probes.json", "probe")
    index = json.loads(index_path.read_text())
    out = {}
    for layer in layers:
        kind = kinds[layer]
        entry = index.get(str(layer), {})
        if kind not in entry:
            raise StageOrderError(f"no trained {kind} probe for layer {layer}; "
                                  f"rerun `probe`")
        out[layer] = load_probe(rundir / entry[kind])
    return out


def variant_kinds(variant: str, selection) -> dict[int, str]:
    if variant == "all_norm":
        return {l: "norm" for l in selection.s_cand}
    if variant in ("all_base", "all_neurons"):
        return {l: "base" for l in selection.s_cand}
    return {l: selection.kind_of(l) for l in selection.s_cand}


# ---------------------------------------------------------------------------
# stages

def stage_synth(cfg: RunConfig, rundir: Path, args) -> None:
    from .synth import generate
    if cfg.synth is None:
        raise ConfigError("synth stage needs a synth block in the config")
    scfg = resolve_synth_block({**cfg.synth, "seed": cfg.synth.get("seed", cfg.seed)})
    ds = generate(scfg)
    payload = rundir / "data.lrd"
    manifest = save_dump(ds, payload)
    logger.info("synth: %d pairs, dim %d, layers %s -> %s",
                ds.n_pairs, ds.dim, ds.layers, payload)
    record_stage(cfg, rundir, "synth", [payload, manifest])


def stage_diagnose(cfg: RunConfig, rundir: Path, args) -> None:
    ds = load_run_dataset(cfg, rundir)
    _, va = train_val(cfg, ds)
    report = compute_report(va, center=cfg.center_cka)
    out = rundir / "diagnostics.csv"
    out.write_text(report_to_csv(report))
    artifacts = [out]
    logger.info("diagnose: %d layers -> %s", len(report.layers), out)
    if args.post_probe:
        selection = candidate_selection(cfg, report)
        kinds = variant_kinds("full", selection)
        trained = load_stage_probes(cfg, rundir, selection.s_cand, kinds)
        text = {l: va.text(l) for l in va.layers}
        vision = {l: va.vision(l) for l in va.layers}
        for layer, probe in trained.items():
            text[layer] = probe_forward(probe, text[layer])
            vision[layer] = probe_forward(probe, vision[layer])
        post = compute_report_from_arrays(va.layers, text, vision,
                                          va.anchors_text(), va.anchors_vision(),
                                          center=cfg.center_cka)
        out_post = rundir / "diagnostics_post_probe.csv"
        out_post.write_text(report_to_csv(post))
        artifacts.append(out_post)
        logger.info("diagnose --post-probe: probed %s -> %s",
                    sorted(trained), out_post)
    record_stage(cfg, rundir, "diagnose", artifacts)


def stage_probe(cfg: RunConfig, rundir: Path, args) -> None:
    ds = load_run_dataset(cfg, rundir)
    tr, va = train_val(cfg, ds)
    report = compute_report(va, center=cfg.center_cka)
    selection = candidate_selection(cfg, report)
    tcfg = cfg.probe_train()
    index: dict[str, dict[str, str]] = {}
    artifacts = []
    # Both kinds are trained for every candidate so ablation variants can
    # swap probe processing without touching earlier stages.
    for kind in ("base", "norm"):
        result = train_probes(tr, {l: kind for l in selection.s_cand}, tcfg)
        for layer, params in result.params.items():
            path = probe_path(rundir, layer, kind)
            save_probe(params, path)
            index.setdefault(str(layer), {})[kind] = path.name
            artifacts.append(path)
        logger.info("probe: trained %s probes for layers %s (final loss %.4f)",
                    kind, selection.s_cand, result.trace[-1][1])
    index_path = rundir / "probes.json"
    index_path.write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")
    artifacts.append(index_path)
    record_stage(cfg, rundir, "probe", artifacts)


def stage_mask(cfg: RunConfig, rundir: Path, args) -> None:
    ds = load_run_dataset(cfg, rundir)
    _, va = train_val(cfg, ds)
    report = compute_report(va, center=cfg.center_cka)
    selection = candidate_selection(cfg, report)
    kinds = variant_kinds("full", selection)
    trained = load_stage_probes(cfg, rundir, selection.s_cand, kinds)
    ms = build_mask_set(va, selection, trained, rho=cfg.rho,
                        pool=cfg.standalone_pool)
    json_path = rundir / "masks.json"
    json_path.write_text(mask_set_to_json(ms))
    csv_path = rundir / "masks.csv"
    csv_path.write_text(mask_set_to_csv(ms))
    logger.info("mask: rho=%.3g pool=%s ratios %s -> %s", cfg.rho,
                cfg.standalone_pool,
                {e.layer: round(e.p_ratio, 3) for e in ms.entries.values()},
                csv_path)
    record_stage(cfg, rundir, "mask", [json_path, csv_path])


def stage_fuse(cfg: RunConfig, rundir: Path, args) -> None:
    ds = load_run_dataset(cfg, rundir)
    tr, va = train_val(cfg, ds)
    report = compute_report(va, center=cfg.center_cka)
    selection = candidate_selection(cfg, report)
    kinds = variant_kinds(cfg.variant, selection)
    if cfg.variant == "all_neurons":
        trained = {}
    else:
        trained = load_stage_probes(cfg, rundir, selection.s_cand, kinds)
    ms = None
    if cfg.variant != "all_neurons":
        ms = mask_set_from_json(require(rundir / "masks.json", "mask").read_text())
    result = train_fusion(tr, cfg.variant, selection, trained, ms,
                          cfg.fusion_train())
    head_path = rundir / "head.fuse"
    save_head(result.head, head_path)
    trace_path = rundir / "fuse_trace.csv"
    trace_path.write_text("epoch,loss\n" + "".join(
        f"{e},{format(v, '.12g')}\n" for e, v in result.trace))
    plan_doc = {
        "variant": cfg.variant,
        "layers": result.head.layers,
        "final_layer": ds.final_layer,
        "probes": {str(l): probe_path(rundir, l, kinds[l]).name for l in trained},
        "masks": "masks.json" if ms is not None else None,
        "head": head_path.name,
    }
    plan_path = rundir / "plan.json"
    plan_path.write_text(json.dumps(plan_doc, sort_keys=True, indent=1) + "\n")
    logger.info("fuse: variant=%s layers=%s final loss %.4f -> %s",
                cfg.variant, result.head.layers, result.trace[-1][1], head_path)
    record_stage(cfg, rundir, "fuse", [head_path, trace_path, plan_path])


def assemble_run_plan(cfg: RunConfig, rundir: Path, ds: LayerReadoutDataset):
    report = compute_report(train_val(cfg, ds)[1], center=cfg.center_cka)
    selection = candidate_selection(cfg, report)
    plan_doc = json.loads(require(rundir / "plan.json", "fuse").read_text())
    if plan_doc["variant"] != cfg.variant:
        raise StageOrderError(f"plan.json was fused for variant "
                              f"{plan_doc['variant']!r}, config wants {cfg.variant!r}")
    kinds = variant_kinds(cfg.variant, selection)
    trained = {} if cfg.variant == "all_neurons" else \
        load_stage_probes(cfg, rundir, selection.s_cand, kinds)
    ms = None
    if cfg.variant != "all_neurons":
        ms = mask_set_from_json(require(rundir / "masks.json", "mask").read_text())
    head = load_head(rundir / plan_doc["head"])
    return assemble_plan(cfg.variant, selection, trained, ms, head,
                         ds.dim, ds.final_layer)


def _per_query_metrics(queries: np.ndarray, index: DenseIndex,
                       pair_ids: list[str], ks: tuple[int, ...],
                       ) -> tuple[dict[str, np.ndarray], dict[str, list[tuple[str, float]]]]:
    """nDCG@k per configured k plus top-1 hit rate, one score per query."""
    depth = max(max(ks), 1)
    metrics = {f"ndcg@{k}": np.zeros(len(pair_ids)) for k in ks}
    metrics["top1"] = np.zeros(len(pair_ids))
    rankings: dict[str, list[tuple[str, float]]] = {}
    for i, qid in enumerate(pair_ids):
        ranked = dense_search(index, queries[i], k=depth)
        rankings[qid] = ranked
        ids = [did for did, _ in ranked]
        rels = {qid: 1}
        for k in ks:
            metrics[f"ndcg@{k}"][i] = ndcg_at_k(ids[:k], rels, k)
        metrics["top1"][i] = 1.0 if ids and ids[0] == qid else 0.0
    return metrics, rankings


def _fmt_t(t: float, infinite: bool) -> str:
    return "inf" if infinite else format(t, ".12g")


def stage_eval(cfg: RunConfig, rundir: Path, args) -> None:
    import csv as _csv
    import io
    ds = load_run_dataset(cfg, rundir)
    _, va = train_val(cfg, ds)
    plan = assemble_run_plan(cfg, rundir, ds)
    fused_q = embed_dataset(plan, va, "text")
    fused_d = embed_dataset(plan, va, "vision")
    base = identity_plan(ds.dim, ds.final_layer)
    base_q = embed_dataset(base, va, "text")
    base_d = embed_dataset(base, va, "vision")

    fused_index = DenseIndex(vectors=fused_d, doc_ids=list(va.pair_ids))
    base_index = DenseIndex(vectors=base_d, doc_ids=list(va.pair_ids))
    fused_m, fused_runs = _per_query_metrics(fused_q, fused_index, va.pair_ids, cfg.eval_k)
    base_m, base_runs = _per_query_metrics(base_q, base_index, va.pair_ids, cfg.eval_k)

    buf = io.StringIO()
    writer = _csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "plan", "baseline", "diff", "t", "p", "dof",
                     "significant_at_0.05"])
    for name in list(fused_m):
        test = paired_ttest(fused_m[name], base_m[name])
        f_mean = float(fused_m[name].mean())
        b_mean = float(base_m[name].mean())
        writer.writerow([
            name, format(f_mean, ".12g"), format(b_mean, ".12g"),
            format(f_mean - b_mean, ".12g"),
            _fmt_t(test.t, test.t_infinite), format(test.p, ".12g"),
            test.dof, int(test.p < 0.05),
        ])
    eval_path = rundir / "eval.csv"
    eval_path.write_text(buf.getvalue())

    fused_run_path = rundir / "plan.run"
    fused_run_path.write_text(write_run(fused_runs, tag=cfg.variant))
    base_run_path = rundir / "baseline.run"
    base_run_path.write_text(write_run(base_runs, tag="identity"))
    qrels_path = rundir / "qrels.txt"
    qrels_path.write_text("".join(f"{pid} 0 {pid} 1\n" for pid in va.pair_ids))
    logger.info("eval: plan top1 %.4f vs baseline %.4f -> %s",
                float(fused_m["top1"].mean()), float(base_m["top1"].mean()),
                eval_path)
    record_stage(cfg, rundir, "eval",
                 [eval_path, fused_run_path, base_run_path, qrels_path])


BENCH_TOKENS = 100
BENCH_MAX_DOCS = 400
BENCH_MAX_QUERIES = 50


def stage_bench(cfg: RunConfig, rundir: Path, args) -> None:
    ds = load_run_dataset(cfg, rundir)
    _, va = train_val(cfg, ds)
    n = min(va.n_pairs, BENCH_MAX_DOCS)
    docs = np.asarray(va.anchors_vision()[:n], dtype=np.float32)
    ids = list(va.pair_ids[:n])
    queries = [np.asarray(q, dtype=np.float32)
               for q in va.anchors_text()[:min(n, BENCH_MAX_QUERIES)]]

    dense = DenseIndex(vectors=docs, doc_ids=ids)
    rng = np.random.default_rng(cfg.seed)
    token_mats = [np.asarray(d + 0.05 * rng.standard_normal((BENCH_TOKENS, ds.dim)),
                             dtype=np.float32) for d in docs]
    multi = MultiVectorIndex(token_mats=token_mats, doc_ids=ids)

    reports = {
        "dense": latency_bench(dense, queries, k=10, repetitions=3),
        "maxsim": latency_bench(multi, [q[None, :] for q in queries],
                                k=10, repetitions=3),
    }
    ratio = storage_bytes(multi) / storage_bytes(dense)
    csv_text = eff_report_csv(reports)
    csv_text += f"# storage_ratio multi/dense,{format(ratio, '.12g')}\n"
    bench_path = rundir / "bench.csv"
    bench_path.write_text(csv_text)
    logger.info("bench: dense %.0f qps vs maxsim %.0f qps, storage ratio %.4g -> %s",
                reports["dense"].qps, reports["maxsim"].qps, ratio, bench_path)
    record_stage(cfg, rundir, "bench", [bench_path])


def _pipeline_point(cfg: RunConfig, ds, tr, va, report, probe_cache: dict,
                    tau: float, rho: float) -> dict[str, float]:
    """Score one (tau, rho) grid point in memory, reusing trained probes."""
    selection = select_candidates(report, tau_cka=tau, k_base=cfg.k_base)
    tcfg = cfg.probe_train()

    def probes_for(kinds: dict[int, str]) -> dict[int, ProbeParams]:
        key = tuple(sorted(kinds.items()))
        if key not in probe_cache:
            probe_cache[key] = train_probes(tr, kinds, tcfg).params
        return probe_cache[key]

    full_kinds = variant_kinds("full", selection)
    kinds = variant_kinds(cfg.variant, selection)
    trained = {} if cfg.variant == "all_neurons" else probes_for(kinds)
    ms = build_mask_set(va, selection, probes_for(full_kinds), rho=rho,
                        pool=cfg.standalone_pool)
    result = train_fusion(tr, cfg.variant, selection, trained, ms,
                          cfg.fusion_train())
    plan = assemble_plan(cfg.variant, selection, trained, ms, result.head,
                         ds.dim, ds.final_layer)
    queries = embed_dataset(plan, va, "text")
    docs = embed_dataset(plan, va, "vision")
    index = DenseIndex(vectors=docs, doc_ids=list(va.pair_ids))
    metrics, _ = _per_query_metrics(queries, index, va.pair_ids, cfg.eval_k)
    return {name: float(vals.mean()) for name, vals in metrics.items()}


def stage_sweep(cfg: RunConfig, rundir: Path, args) -> None:
    import csv as _csv
    import io
    ds = load_run_dataset(cfg, rundir)
    tr, va = train_val(cfg, ds)
    report = compute_report(va, center=cfg.center_cka)
    probe_cache: dict = {}

    default = _pipeline_point(cfg, ds, tr, va, report, probe_cache,
                              cfg.tau_cka, cfg.rho)
    metric_names = list(default)
    rows = [("default", "", default)]
    for tau in TAU_GRID:
        rows.append(("tau_cka", tau,
                     _pipeline_point(cfg, ds, tr, va, report, probe_cache,
                                     tau, cfg.rho)))
    for rho in RHO_GRID:
        rows.append(("rho", rho,
                     _pipeline_point(cfg, ds, tr, va, report, probe_cache,
                                     cfg.tau_cka, rho)))

    buf = io.StringIO()
    writer = _csv.writer(buf, lineterminator="\n")
    header = ["axis", "value"] + metric_names + \
        [f"{m}_rel_pct" for m in metric_names]
    writer.writerow(header)
    for axis, value, metrics in rows:
        rel = ["0" if axis == "default" else
               format(100.0 * (metrics[m] - default[m]) / default[m]
                      if default[m] != 0 else 0.0, ".12g")
               for m in metric_names]
        writer.writerow([axis, format(value, ".12g") if value != "" else ""] +
                        [format(metrics[m], ".12g") for m in metric_names] + rel)
    sweep_path = rundir / "sweep.csv"
    sweep_path.write_text(buf.getvalue())
    tops = [m["top1"] for _, _, m in rows[1:]]
    logger.info("sweep: top1 spread %.4f over %d points -> %s",
                max(tops) - min(tops), len(tops), sweep_path)
    record_stage(cfg, rundir, "sweep", [sweep_path])


STAGES = {
    "synth": stage_synth,
    "diagnose": stage_diagnose,
    "probe": stage_probe,
    "mask": stage_mask,
    "fuse": stage_fuse,
    "eval": stage_eval,
    "bench": stage_bench,
    "sweep": stage_sweep,
}


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--tau-cka", dest="tau_cka", type=float,
                        help="normalized-CKA candidate threshold")
    common.add_argument("--rho", type=float, help="retention floor")
    common.add_argument("--variant", choices=list(VARIANTS),
                        help="fusion pipeline variant")
    common.add_argument("--k", type=int, choices=(5, 10),
                        help="restrict eval nDCG depth to one k")
    common.add_argument("--out", help="output root directory")

    parser = argparse.ArgumentParser(
        prog="layerfuse",
        description="Layerwise diagnostics, probing, masking, and fusion "
                    "over layer-readout dumps.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common],
                           help=f"run the {name} stage")
        if name == "diagnose":
            p.add_argument("--post-probe", dest="post_probe",
                           action="store_true",
                           help="also report diagnostics on probed readouts")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "post_probe"):
        args.post_probe = False
    try:
        cfg = load_config(args)
        rundir = run_dir(cfg)
        rundir.mkdir(parents=True, exist_ok=True)
        STAGES[args.subcommand](cfg, rundir, args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except StageOrderError as exc:
        logger.error("stage-order error: %s", exc)
        return EXIT_ORDER
    except (DumpError, DegenerateRepresentationError, NoCandidatesError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    print(f"run {cfg.config_hash()} {args.subcommand}: ok ({rundir})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
