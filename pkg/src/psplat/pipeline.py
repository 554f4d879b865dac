"""Stage orchestration: configuration, artifacts, reports and staleness checks.

Stages only talk through files in the output directory. Each stage writes its
artifacts atomically plus ``reports/<stage>.json`` holding the digests of
everything it read and wrote and the parameters it ran with. Before a stage
reads an upstream artifact, that artifact's report is replayed against the
current files and configuration, recursively, so a changed input or parameter
anywhere upstream fails fast instead of propagating silently.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import formats
from .errors import ConfigError, MetricGateError, MissingArtifactError, StaleArtifactError
from .feature_field import DistillConfig, FeatureDecoder, PyramidTriPlane, distill, field_features
from .fusion import fuse
from .geometry import PrimitiveCloud, estimate_normals, knn_graph
from .graph_clustering import MaskAffinity, candidate_edges, progressive_cluster
from .metrics import evaluate
from .panoptic import VOID, PanopticLabeling, assemble, classify, text_query, vote
from .scene_sim import SimConfig, generate, write_scene
from .supersegment import CutSchedule, segment

log = logging.getLogger(__name__)

STAGES = ("simulate", "fuse", "distill", "supersegment", "cluster", "label", "eval", "export")
CHAIN = ("fuse", "distill", "supersegment", "cluster", "label", "eval")

ARTIFACTS = {
    "fuse": ("fused.fuse",),
    "distill": ("field.trip",),
    "supersegment": ("partition.supr",),
    "cluster": ("instances.inst", "instances.json"),
    "label": ("labeling.pano", "labeling.json"),
    "eval": ("eval.json", "eval.txt"),
    "export": ("export.ply",),
}
PRODUCER = {name: stage for stage, names in ARTIFACTS.items() for name in names}

DEFAULTS = {
    "paths": {"scene_dir": "scene", "cloud": None, "cameras": None, "queries": None, "ground_truth": None,
              "output_dir": "out"},
    "seed": 0,
    "deterministic": False,
    "threads": 1,
    "geometry": {"k": 16, "depth_tol": 0.05, "normals": "auto"},
    "fusion": {"eps": 1e-6, "gamma_max": 1e4},
    "field": {"resolutions": [64, 128, 256], "channels": 8, "hidden": 128, "margin": 0.05, "init_scale": 1e-4},
    "distill": {"iterations": 30000, "batch_size": 4096, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
                "eval_every": 0, "seed": None},
    "supersegment": {"iterations": 4, "normal_deg": [15.0, 40.0], "feature": [0.95, 0.80], "min_size": 20,
                     "use_language": True, "feature_source": "field"},
    "cluster": {"thresholds": [0.9, 0.8, 0.7, 0.6], "visibility": "frustum"},
    "label": {"min_similarity": None, "feature_source": "field"},
    "eval": {"min_miou": None, "min_macc": None, "min_prq_thing": None, "min_prq_stuff": None},
    "export": {"color_by": "instance"},
    "simulate": {},
}

# which config sections each stage's outputs depend on
STAGE_PARAMS = {
    "simulate": ("simulate", "seed"),
    "fuse": ("geometry", "fusion"),
    "distill": ("field", "distill", "seed"),
    "supersegment": ("geometry", "supersegment"),
    "cluster": ("geometry", "cluster"),
    "label": ("label",),
    "eval": ("eval",),
    "export": ("export",),
}


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and key != "simulate":
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


@dataclass
class PipelineConfig:
    data: dict
    base_dir: Path
    source: Optional[Path] = None
    _sim: Optional[SimConfig] = field(default=None, repr=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir=".", source=None) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        cfg = cls(_merge(DEFAULTS, data, ""), Path(base_dir).resolve(), source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        data = formats.read_json(path)
        return cls.from_dict(data, path.parent, path)

    def override(self, **kw) -> "PipelineConfig":
        data = copy.deepcopy(self.data)
        for dotted, val in kw.items():
            if val is None:
                continue
            parts = dotted.split(".")
            node = data
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = val
        out = PipelineConfig(data, self.base_dir, self.source)
        out.validate()
        return out

    def validate(self) -> None:
        d = self.data
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(d["threads"], int) or d["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        g = d["geometry"]
        if not isinstance(g["k"], int) or g["k"] < 1:
            raise ConfigError("geometry.k must be an integer >= 1")
        if not g["depth_tol"] > 0:
            raise ConfigError("geometry.depth_tol must be positive")
        if g["normals"] not in ("auto", "cloud", "estimate"):
            raise ConfigError("geometry.normals must be auto, cloud or estimate")
        f = d["fusion"]
        if not f["eps"] > 0 or not f["gamma_max"] > 0:
            raise ConfigError("fusion.eps and fusion.gamma_max must be positive")
        fl = d["field"]
        if not fl["resolutions"] or fl["channels"] < 1 or fl["hidden"] < 1 or fl["margin"] < 0 or fl["init_scale"] < 0:
            raise ConfigError("field parameters out of range")
        if any(int(r) < 2 for r in fl["resolutions"]) or list(fl["resolutions"]) != sorted(set(fl["resolutions"])):
            raise ConfigError("field.resolutions must be >= 2 and strictly increasing")
        self.distill_config()
        self.cut_schedule()
        s = d["supersegment"]
        if s["feature_source"] not in ("field", "fused") or d["label"]["feature_source"] not in ("field", "fused"):
            raise ConfigError("feature_source must be 'field' or 'fused'")
        th = [float(t) for t in d["cluster"]["thresholds"]]
        if not th or any(b >= a for a, b in zip(th, th[1:])):
            raise ConfigError("cluster.thresholds must be strictly decreasing")
        if d["cluster"]["visibility"] not in ("frustum", "depth"):
            raise ConfigError("cluster.visibility must be 'frustum' or 'depth'")
        ms = d["label"]["min_similarity"]
        if ms is not None and not -1 <= ms <= 1:
            raise ConfigError("label.min_similarity must lie in [-1, 1]")
        for k, v in d["eval"].items():
            if v is not None and not 0 <= v <= 1:
                raise ConfigError(f"eval.{k} must lie in [0, 1]")
        if d["export"]["color_by"] not in ("instance", "class", "confidence"):
            raise ConfigError("export.color_by must be instance, class or confidence")
        self._sim = self.sim_config()

    def section(self, name: str):
        return self.data[name]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def deterministic(self) -> bool:
        return bool(self.data["deterministic"])

    @property
    def threads(self) -> int:
        return 1 if self.deterministic else self.data["threads"]

    def distill_config(self) -> DistillConfig:
        d = dict(self.data["distill"])
        if d["seed"] is None:
            d["seed"] = self.seed
        return DistillConfig.from_dict(d)

    def cut_schedule(self) -> CutSchedule:
        s = self.data["supersegment"]
        if s["iterations"] < 1:
            raise ConfigError("supersegment.iterations must be >= 1")
        return CutSchedule.default(s["iterations"], tuple(s["normal_deg"]), tuple(s["feature"]), s["min_size"])

    def sim_config(self) -> SimConfig:
        return SimConfig.from_dict({**self.data["simulate"], "seed": self.seed})

    # paths

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def scene_dir(self) -> Path:
        return self.path(self.data["paths"]["scene_dir"])

    def input_path(self, name: str) -> Path:
        defaults = {"cloud": "cloud.ply", "cameras": "cameras.json", "queries": "queries.json",
                    "ground_truth": "ground_truth.json"}
        given = self.data["paths"][name]
        return self.path(given) if given else self.scene_dir / defaults[name]

    @property
    def output_dir(self) -> Path:
        return self.path(self.data["paths"]["output_dir"])

    def artifact(self, name: str) -> Path:
        return self.output_dir / name

    def report_path(self, stage: str) -> Path:
        return self.output_dir / "reports" / f"{stage}.json"

    def rel(self, p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(self.base_dir).as_posix()
        except ValueError:
            return p.as_posix()

    def stage_parameters(self, stage: str) -> dict:
        out = {}
        for key in STAGE_PARAMS[stage]:
            out[key] = copy.deepcopy(self.data[key])
        if stage == "simulate":
            out["simulate"] = self._sim.to_dict()
        return out


def digest(path) -> str:
    return hashlib.sha256(formats.read_bytes(path)).hexdigest()


@contextmanager
def _blas_threads(n: int):
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


class _Run:
    """Bookkeeping for one stage invocation."""

    def __init__(self, cfg: PipelineConfig, stage: str):
        self.cfg = cfg
        self.stage = stage
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.counts: dict = {}
        self.t0 = time.perf_counter()

    def use(self, path: Path) -> Path:
        path = Path(path)
        if not path.exists():
            producer = PRODUCER.get(path.name) if path.parent == self.cfg.output_dir else None
            what = f"{producer} artifact" if producer else "input"
            raise MissingArtifactError(path, what)
        if path.parent == self.cfg.output_dir and path.name in PRODUCER:
            check_fresh(self.cfg, PRODUCER[path.name])
        self.inputs[self.cfg.rel(path)] = digest(path)
        return path

    def write(self, path: Path, data: bytes) -> None:
        formats.atomic_write(path, data)
        self.outputs[self.cfg.rel(path)] = hashlib.sha256(data).hexdigest()

    def write_json(self, path: Path, obj) -> None:
        self.write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())

    def finish(self) -> dict:
        report = {"stage": self.stage, "inputs": dict(sorted(self.inputs.items())),
                  "outputs": dict(sorted(self.outputs.items())),
                  "parameters": self.cfg.stage_parameters(self.stage), "counts": self.counts}
        if not self.cfg.deterministic:
            report["wall_time_s"] = round(time.perf_counter() - self.t0, 3)
        formats.write_json(self.cfg.report_path(self.stage), report)
        return report


def check_fresh(cfg: PipelineConfig, stage: str, _seen=None) -> None:
    """Raise :class:`StaleArtifactError` unless ``stage``'s outputs match its report and current config."""
    seen = _seen if _seen is not None else set()
    if stage in seen:
        return
    seen.add(stage)
    rpath = cfg.report_path(stage)
    if not rpath.exists():
        raise StaleArtifactError(f"{stage} artifacts have no report ({cfg.rel(rpath)}); rerun `{stage}`")
    report = formats.read_json(rpath)
    if report.get("parameters") != json.loads(json.dumps(cfg.stage_parameters(stage))):
        raise StaleArtifactError(f"{stage} ran with different parameters; rerun `{stage}`")
    for rel, want in report.get("outputs", {}).items():
        p = cfg.path(rel)
        if not p.exists():
            raise MissingArtifactError(p, f"{stage} artifact")
        if digest(p) != want:
            raise StaleArtifactError(f"{rel} changed since `{stage}` wrote it; rerun `{stage}`")
    for rel, want in report.get("inputs", {}).items():
        p = cfg.path(rel)
        if not p.exists():
            raise MissingArtifactError(p, "input")
        if digest(p) != want:
            raise StaleArtifactError(f"{rel} changed since `{stage}` read it; rerun `{stage}`")
        if p.parent == cfg.output_dir and p.name in PRODUCER:
            check_fresh(cfg, PRODUCER[p.name], seen)


# ---------------------------------------------------------------- loaders

def _load_cloud(run: _Run) -> PrimitiveCloud:
    return formats.load_ply(run.use(run.cfg.input_path("cloud")))


def _load_views(run: _Run, what: str, need_depth: bool = True):
    """Cameras plus one raster per view (``feature_file`` or ``mask_file``)."""
    cam_path = run.use(run.cfg.input_path("cameras"))
    views = formats.load_cameras(cam_path, load_depth=False)
    rasters = []
    for v in views:
        if need_depth and v.depth_file:
            dpath = run.use(formats.resolve(cam_path, v.depth_file))
            v.depth_map = formats.depth_from_png(formats.load_png16(dpath))
        ref = getattr(v, what)
        if not ref:
            raise MissingArtifactError(f"{cam_path} (view {v.view_id} has no {what})", "input")
        rpath = run.use(formats.resolve(cam_path, ref))
        rasters.append(formats.load_fmap(rpath) if what == "feature_file" else formats.load_png16(rpath))
    return views, rasters


def _normals(cfg: PipelineConfig, cloud: PrimitiveCloud, views=None) -> np.ndarray:
    mode = cfg.section("geometry")["normals"]
    if mode == "cloud" and cloud.normals is None:
        raise ConfigError("geometry.normals is 'cloud' but the cloud has no normals")
    if cloud.normals is not None and mode != "estimate":
        return cloud.normals
    centers = np.array([v.center for v in views]) if views else None
    normals, _ = estimate_normals(cloud, cfg.section("geometry")["k"], centers)
    return normals


def _features(run: _Run, cloud: PrimitiveCloud, source: str) -> np.ndarray:
    if source == "fused":
        return formats.load_fuse(run.use(run.cfg.artifact("fused.fuse"))).features
    field_, dec = formats.load_trip(run.use(run.cfg.artifact("field.trip")))
    return field_features(field_, dec, cloud.positions)


# ---------------------------------------------------------------- stages

def stage_simulate(run: _Run) -> None:
    cfg = run.cfg
    scene = generate(cfg.sim_config())
    manifest = write_scene(scene, cfg.scene_dir)
    files = [manifest["files"][k] for k in ("cloud", "cameras", "queries", "ground_truth")]
    for k in ("depth", "features", "masks"):
        files.extend(manifest["files"][k])
    for rel in files + ["scene_manifest.json"]:
        p = cfg.scene_dir / rel
        run.outputs[cfg.rel(p)] = digest(p)
    things = np.isin(scene.gt.semantic, [i for i, k in enumerate(scene.gt.kinds) if k == "thing"])
    run.counts.update(primitives=len(scene.cloud), views=len(scene.views),
                      objects=int(len(np.unique(scene.gt.instance[things]))))


def stage_fuse(run: _Run) -> None:
    cfg = run.cfg
    cloud = _load_cloud(run)
    views, fmaps = _load_views(run, "feature_file")
    fused = fuse(cloud, views, fmaps, cfg.section("geometry")["depth_tol"], cfg.section("fusion")["eps"],
                 cfg.section("fusion")["gamma_max"], threads=cfg.threads)
    run.write(cfg.artifact("fused.fuse"), formats.fuse_bytes(fused))
    run.counts.update(primitives=len(cloud), valid_primitives=int(fused.valid.sum()), views=len(views))


def stage_distill(run: _Run) -> None:
    cfg = run.cfg
    cloud = _load_cloud(run)
    fused = formats.load_fuse(run.use(cfg.artifact("fused.fuse")))
    if len(fused.features) != len(cloud):
        raise ConfigError("fused feature cloud and primitive cloud differ in size")
    fl = cfg.section("field")
    rng = np.random.default_rng([cfg.seed, 7])
    field_ = PyramidTriPlane.for_positions(cloud.positions, fl["margin"], resolutions=tuple(fl["resolutions"]),
                                           channels=fl["channels"], rng=rng, init_scale=fl["init_scale"])
    dec = FeatureDecoder.create(field_.code_dim, fl["hidden"], fused.dim, rng)
    dcfg = cfg.distill_config()
    result = distill(field_, dec, fused, cloud, dcfg)
    run.write(cfg.artifact("field.trip"), formats.trip_bytes(field_, dec))
    feats = field_features(field_, dec, cloud.positions[fused.valid])
    cos = np.sum(feats * fused.features[fused.valid], axis=1)
    tail = result.history[-min(100, len(result.history)):]
    run.counts.update(iterations=dcfg.iterations, final_batch_loss=float(np.mean(tail)),
                      mean_cosine=float(np.mean(cos)), valid_primitives=int(fused.valid.sum()))


def stage_supersegment(run: _Run) -> None:
    cfg = run.cfg
    s = cfg.section("supersegment")
    cloud = _load_cloud(run)
    fused = formats.load_fuse(run.use(cfg.artifact("fused.fuse")))
    feats = _features(run, cloud, s["feature_source"])
    adj = knn_graph(cloud, cfg.section("geometry")["k"])
    part = segment(_normals(cfg, cloud), feats, adj, cfg.cut_schedule(), fused.confidence, s["use_language"])
    run.write(cfg.artifact("partition.supr"), formats.supr_bytes(part))
    run.counts.update(segments=part.n_segments, edges=adj.edge_count)


def stage_cluster(run: _Run) -> None:
    cfg = run.cfg
    c = cfg.section("cluster")
    cloud = _load_cloud(run)
    part = formats.load_supr(run.use(cfg.artifact("partition.supr")))
    if len(part.labels) != len(cloud):
        raise ConfigError("partition and primitive cloud differ in size")
    use_depth = c["visibility"] == "depth"
    views, masks = _load_views(run, "mask_file", need_depth=use_depth)
    adj = knn_graph(cloud, cfg.section("geometry")["k"])
    aff = MaskAffinity(cloud.positions, part.labels, views, masks, cfg.section("geometry")["depth_tol"], use_depth)
    inst = progressive_cluster(part.n_segments, candidate_edges(part.labels, adj), aff, c["thresholds"])
    run.write(cfg.artifact("instances.inst"), formats.inst_bytes(inst))
    run.write_json(cfg.artifact("instances.json"), {"iterations": inst.history, "instances": inst.n_instances,
                                                    "super_primitives": part.n_segments})
    run.counts.update(instances=inst.n_instances, super_primitives=part.n_segments)


def stage_label(run: _Run) -> None:
    cfg = run.cfg
    lab_cfg = cfg.section("label")
    cloud = _load_cloud(run)
    queries = formats.load_queries(run.use(cfg.input_path("queries")))
    part = formats.load_supr(run.use(cfg.artifact("partition.supr")))
    inst = formats.load_inst(run.use(cfg.artifact("instances.inst")))
    feats = _features(run, cloud, lab_cfg["feature_source"])
    if feats.shape[1] != queries.embeddings.shape[1]:
        raise ConfigError(f"feature dimension {feats.shape[1]} != query dimension {queries.embeddings.shape[1]}")
    classes, _, sims = classify(feats, queries, lab_cfg["min_similarity"])
    super_classes, _ = vote(part.labels, classes, len(queries))
    labeling = assemble(inst, super_classes, part, queries, sims)
    run.write(cfg.artifact("labeling.pano"), formats.pano_bytes(labeling))
    summary = {
        "instances": [{"id": i.id, "class": queries.names[i.class_index], "kind": i.kind, "count": i.count,
                       "mean_similarity": round(i.mean_similarity, 6)} for i in labeling.instances],
        "queries": {name: text_query(labeling, queries, name) for name in queries.names},
        "void_primitives": int(np.sum(labeling.instance == VOID)),
    }
    run.write_json(cfg.artifact("labeling.json"), summary)
    run.counts.update(things=len(labeling.things()), regions=labeling.n_instances)


def stage_eval(run: _Run, gates: Optional[dict] = None) -> dict:
    cfg = run.cfg
    queries = formats.load_queries(run.use(cfg.input_path("queries")))
    gt = formats.load_gt(run.use(cfg.input_path("ground_truth")))
    labeling = formats.load_pano(run.use(cfg.artifact("labeling.pano")), queries)
    report = evaluate(labeling, gt)
    run.write(cfg.artifact("eval.json"), (report.to_json() + "\n").encode())
    run.write(cfg.artifact("eval.txt"), report.to_text().encode())
    values = {"miou": report.miou, "macc": report.macc, "prq_thing": report.prq_thing,
              "prq_stuff": report.prq_stuff}
    run.counts.update({k: (round(v, 6) if np.isfinite(v) else None) for k, v in values.items()})
    gates = {**cfg.section("eval"), **(gates or {})}
    failed = []
    for key, bound in sorted(gates.items()):
        if bound is None:
            continue
        val = values[key[len("min_"):]]
        if not (np.isfinite(val) and val >= bound):
            failed.append(f"{key[len('min_'):]}={val:.4f} < {bound}")
    run.counts["gates_failed"] = failed
    return {"failed": failed}


def _palette(keys: np.ndarray) -> np.ndarray:
    """Deterministic well-spread RGB per integer key; -1 maps to grey."""
    keys = np.asarray(keys, dtype=np.int64)
    h = (keys * 0.618033988749895) % 1.0
    rgb = np.stack([np.abs(h * 6 - 3) - 1, 2 - np.abs(h * 6 - 2), 2 - np.abs(h * 6 - 4)], axis=1)
    rgb = np.clip(rgb, 0, 1) * 0.75 + 0.2
    rgb[keys < 0] = 0.5
    return np.round(rgb * 255).astype(np.uint8)


def stage_export(run: _Run, color_by: Optional[str] = None) -> None:
    cfg = run.cfg
    color_by = color_by or cfg.section("export")["color_by"]
    cloud = _load_cloud(run)
    if color_by == "confidence":
        fused = formats.load_fuse(run.use(cfg.artifact("fused.fuse")))
        g = np.log1p(fused.confidence)
        t = g / g.max() if g.max() > 0 else g
        colors = np.round(np.stack([t, t, 1 - t], axis=1) * 255).astype(np.uint8)
    else:
        labeling = formats.load_pano(run.use(cfg.artifact("labeling.pano")))
        colors = _palette(labeling.instance if color_by == "instance" else labeling.semantic)
    run.write(cfg.artifact("export.ply"), formats.ply_bytes(PrimitiveCloud(cloud.positions, cloud.normals), colors))
    run.counts.update(primitives=len(cloud), color_by=color_by)


_RUNNERS = {"simulate": stage_simulate, "fuse": stage_fuse, "distill": stage_distill,
            "supersegment": stage_supersegment, "cluster": stage_cluster, "label": stage_label,
            "eval": stage_eval, "export": stage_export}


def run_stage(name: str, cfg: PipelineConfig, **options) -> dict:
    """Run one stage and return its report. Metric gates failing in ``eval`` raise after the report is written."""
    if name not in _RUNNERS:
        raise ConfigError(f"unknown stage {name!r}; choose from {', '.join(STAGES)}")
    run = _Run(cfg, name)
    log.info("stage %s starting", name)
    blas = 1 if cfg.deterministic else cfg.threads
    with _blas_threads(blas):
        extra = _RUNNERS[name](run, **options)
    report = run.finish()
    log.info("stage %s done: %s", name, run.counts)
    if name == "eval" and extra["failed"]:
        raise MetricGateError("metric gate failed: " + "; ".join(extra["failed"]))
    return report


def run_chain(cfg: PipelineConfig, stages=CHAIN, **eval_options) -> dict:
    reports = {}
    for name in stages:
        reports[name] = run_stage(name, cfg, **(eval_options if name == "eval" else {}))
    return reports
