"""Synthetic grid cities: deterministic generator for desk-scale experiments.

Regions form a rows x cols grid with NearBy edges between orthogonal
neighbors. Per-region entity counts, category mixes, brand attachments,
gravity-model trips, image feature vectors and planted task labels are all
pure functions of (spec, seed), so the emitted files are byte-identical
across runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidSpecError
from .graph import FlowRecord, GraphConfig, Node, UrbanGraph, save_graph, save_task
from .schema import EdgeType, NodeType


@dataclass(frozen=True)
class SynthSpec:
    rows: int = 3
    cols: int = 3
    poi_range: tuple[int, int] = (6, 12)
    road_range: tuple[int, int] = (2, 5)
    junction_range: tuple[int, int] = (2, 5)
    n_poi_categories: int = 6
    n_brands: int = 5
    n_road_categories: int = 3
    n_junction_categories: int = 3
    brand_fraction: float = 0.6
    intervals: int = 24
    total_trips: int = 5000
    image_dim: int = 512
    images_per_region: tuple[int, int] = (1, 3)
    image_noise: float = 0.05
    task_noise: float = 0.05  # label noise, as a fraction of the clean-label std
    tasks: tuple[str, ...] = ("activity", "spending", "infrastructure")
    # radius (grid units) of the per-category districts that shape each
    # region's category mix; 0 disables spatial structure (iid profiles)
    district_radius: float = 1.5

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise InvalidSpecError(f"grid must have at least one region, got {self.rows}x{self.cols}")
        for name in ("poi_range", "road_range", "junction_range", "images_per_region"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise InvalidSpecError(f"bad range {name}={lo, hi}")
        for name in ("n_poi_categories", "n_road_categories", "n_junction_categories"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"{name} must be >= 1")
        if self.n_brands < 0 or not (0.0 <= self.brand_fraction <= 1.0):
            raise InvalidSpecError("bad brand settings")
        if self.intervals < 1 or self.image_dim < 1 or self.total_trips < 0:
            raise InvalidSpecError("bad intervals/image_dim/total_trips")


@dataclass
class City:
    """In-memory synthetic city: graph plus the side tables synth emits."""

    graph: UrbanGraph
    images: dict[str, list[list[float]]]
    tasks: dict[str, dict[str, float]]
    poi_category_counts: dict[str, np.ndarray] = field(default_factory=dict)


def _region_id(idx: int) -> str:
    return f"r{idx:04d}"


def generate_city(spec: SynthSpec, seed: int) -> City:
    """Build the city in memory; see synth_city for the file-emitting wrapper."""
    spec.validate()
    rng = np.random.default_rng(seed)

    nodes: dict[str, Node] = {}
    edges: set[tuple[str, str, EdgeType]] = set()

    # vocabulary nodes
    poi_cats = [f"pc{k:03d}" for k in range(spec.n_poi_categories)]
    brands = [f"b{k:03d}" for k in range(spec.n_brands)]
    road_cats = [f"rc{k:03d}" for k in range(spec.n_road_categories)]
    junc_cats = [f"jc{k:03d}" for k in range(spec.n_junction_categories)]
    for k, cid in enumerate(poi_cats):
        nodes[cid] = Node(cid, NodeType.POI_CATEGORY, f"poi category {k}")
    for k, bid in enumerate(brands):
        nodes[bid] = Node(bid, NodeType.BRAND, f"brand {k}")
    for k, cid in enumerate(road_cats):
        nodes[cid] = Node(cid, NodeType.ROAD_CATEGORY, f"road category {k}")
    for k, cid in enumerate(junc_cats):
        nodes[cid] = Node(cid, NodeType.JUNCTION_CATEGORY, f"junction category {k}")

    n_regions = spec.rows * spec.cols
    region_ids = [_region_id(i) for i in range(n_regions)]
    for i, rid in enumerate(region_ids):
        row, col = divmod(i, spec.cols)
        nodes[rid] = Node(rid, NodeType.REGION, f"region ({row},{col})", (float(col), float(row)))
        if col + 1 < spec.cols:
            right = _region_id(i + 1)
            edges.add((rid, right, EdgeType.NEARBY))
            edges.add((right, rid, EdgeType.NEARBY))
        if row + 1 < spec.rows:
            below = _region_id(i + spec.cols)
            edges.add((rid, below, EdgeType.NEARBY))
            edges.add((below, rid, EdgeType.NEARBY))

    # per-region category profiles: each category concentrates in a few
    # "districts" (random Gaussian bumps over the grid), so the mixes vary
    # across the city but change smoothly between adjacent regions
    coords = np.array([divmod(i, spec.cols) for i in range(n_regions)], dtype=np.float64)
    if spec.district_radius > 0:
        intensity = np.full((n_regions, spec.n_poi_categories), 0.25)
        for c in range(spec.n_poi_categories):
            n_bumps = int(rng.integers(1, 3))
            for _ in range(n_bumps):
                center = rng.uniform(low=(0, 0), high=(spec.rows, spec.cols), size=2)
                amp = rng.uniform(0.5, 2.0)
                d2 = ((coords - center) ** 2).sum(axis=1)
                intensity[:, c] += amp * np.exp(-d2 / (2.0 * spec.district_radius**2))
        profiles = intensity / intensity.sum(axis=1, keepdims=True)
    else:
        profiles = rng.dirichlet(np.full(spec.n_poi_categories, 0.8), size=n_regions)

    cat_counts: dict[str, np.ndarray] = {}
    brand_counts: dict[str, np.ndarray] = {}
    entity_counts = np.zeros(n_regions, dtype=np.int64)
    road_counts = np.zeros(n_regions, dtype=np.int64)
    junc_counts = np.zeros(n_regions, dtype=np.int64)
    poi_serial = road_serial = junc_serial = 0
    for i, rid in enumerate(region_ids):
        n_poi = int(rng.integers(spec.poi_range[0], spec.poi_range[1] + 1))
        counts = rng.multinomial(n_poi, profiles[i])
        cat_counts[rid] = counts.astype(np.float64)
        bcounts = np.zeros(max(spec.n_brands, 1))
        for c_idx in range(spec.n_poi_categories):
            for _ in range(int(counts[c_idx])):
                pid = f"p{poi_serial:05d}"
                poi_serial += 1
                nodes[pid] = Node(pid, NodeType.POI, f"poi {poi_serial - 1}")
                edges.add((rid, pid, EdgeType.CONTAINS))
                edges.add((poi_cats[c_idx], pid, EdgeType.CATE_OF))
                if spec.n_brands > 0 and rng.random() < spec.brand_fraction:
                    b_idx = int(rng.integers(0, spec.n_brands))
                    edges.add((brands[b_idx], pid, EdgeType.BRAND_OF))
                    bcounts[b_idx] += 1
        brand_counts[rid] = bcounts

        n_road = int(rng.integers(spec.road_range[0], spec.road_range[1] + 1))
        for _ in range(n_road):
            rdid = f"rd{road_serial:05d}"
            road_serial += 1
            nodes[rdid] = Node(rdid, NodeType.ROAD, f"road {road_serial - 1}")
            edges.add((rid, rdid, EdgeType.CONTAINS))
            c_idx = int(rng.integers(0, spec.n_road_categories))
            edges.add((road_cats[c_idx], rdid, EdgeType.RCATE_OF))

        n_junc = int(rng.integers(spec.junction_range[0], spec.junction_range[1] + 1))
        for _ in range(n_junc):
            jid = f"j{junc_serial:05d}"
            junc_serial += 1
            nodes[jid] = Node(jid, NodeType.JUNCTION, f"junction {junc_serial - 1}")
            edges.add((rid, jid, EdgeType.CONTAINS))
            c_idx = int(rng.integers(0, spec.n_junction_categories))
            edges.add((junc_cats[c_idx], jid, EdgeType.JCATE_OF))

        road_counts[i] = n_road
        junc_counts[i] = n_junc
        entity_counts[i] = n_poi + n_road + n_junc

    # gravity-model trips: m_ij ~ size_i * size_j / (1 + dist_ij), no self trips
    flows: list[FlowRecord] = []
    if n_regions > 1 and spec.total_trips > 0:
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        size = entity_counts.astype(np.float64)
        raw = np.outer(size, size) / (1.0 + dist)
        np.fill_diagonal(raw, 0.0)
        scale = spec.total_trips / raw.sum()
        trips = np.rint(raw * scale).astype(np.int64)
        profile = 2.0 + np.sin(2.0 * np.pi * np.arange(spec.intervals) / spec.intervals)
        profile /= profile.sum()
        for i in range(n_regions):
            for j in range(n_regions):
                if trips[i, j] <= 0:
                    continue
                per_interval = rng.multinomial(int(trips[i, j]), profile)
                for t in range(spec.intervals):
                    if per_interval[t] > 0:
                        flows.append(
                            FlowRecord(region_ids[i], region_ids[j], t, int(per_interval[t]))
                        )

    # image features: affine image of the per-category counts plus jitter
    # (denser development shows up in imagery, so counts drive the features)
    images: dict[str, list[list[float]]] = {}
    img_map = rng.normal(0.0, 1.0, size=(spec.image_dim, spec.n_poi_categories))
    img_bias = rng.normal(0.0, 0.1, size=spec.image_dim)
    count_scale = max(1.0, (spec.poi_range[0] + spec.poi_range[1]) / (2.0 * spec.n_poi_categories))
    for i, rid in enumerate(region_ids):
        base = img_map @ (cat_counts[rid] / count_scale) + img_bias
        n_img = int(rng.integers(spec.images_per_region[0], spec.images_per_region[1] + 1))
        n_img = max(n_img, 1)
        shots = []
        for _ in range(n_img):
            jitter = rng.normal(0.0, spec.image_noise, size=spec.image_dim)
            shots.append([float(v) for v in base + jitter])
        images[rid] = shots

    # planted tasks: affine in entity counts plus bounded noise
    tasks: dict[str, dict[str, float]] = {}

    def _plant(name: str, clean: np.ndarray) -> None:
        std = float(clean.std())
        bound = spec.task_noise * (std if std > 0 else 1.0)
        noise = rng.uniform(-bound, bound, size=n_regions)
        tasks[name] = {rid: float(clean[i] + noise[i]) for i, rid in enumerate(region_ids)}

    cat_matrix = np.stack([cat_counts[rid] for rid in region_ids])
    brand_matrix = np.stack([brand_counts[rid] for rid in region_ids])
    for name in spec.tasks:
        if name == "infrastructure":
            a_road, a_junc = rng.uniform(1.0, 10.0, size=2)
            clean = a_road * road_counts + a_junc * junc_counts + 5.0
        elif name == "spending":
            coef = rng.uniform(1.0, 10.0, size=spec.n_poi_categories)
            bcoef = rng.uniform(0.5, 3.0, size=brand_matrix.shape[1])
            clean = cat_matrix @ coef + brand_matrix @ bcoef + 10.0
        else:  # "activity" and any extra names: affine in POI-category counts
            coef = rng.uniform(1.0, 10.0, size=spec.n_poi_categories)
            clean = cat_matrix @ coef + 5.0
        _plant(name, clean)

    graph = UrbanGraph(nodes, edges, flows, GraphConfig(intervals=spec.intervals))
    return City(graph=graph, images=images, tasks=tasks, poi_category_counts=cat_counts)


@dataclass(frozen=True)
class CityPaths:
    root: Path
    nodes: Path
    edges: Path
    flows: Path
    images: Path
    tasks: dict[str, Path]
    manifest: Path


def synth_city(
    spec: SynthSpec, seed: int, out_dir: str | Path, config_hash: Optional[str] = None
) -> CityPaths:
    """Generate a city and write the full bundle of loadable files."""
    city = generate_city(spec, seed)
    out = Path(out_dir)
    (out / "tasks").mkdir(parents=True, exist_ok=True)

    comment = f"config_hash={config_hash}" if config_hash else None
    paths = CityPaths(
        root=out,
        nodes=out / "nodes.csv",
        edges=out / "edges.csv",
        flows=out / "flows.csv",
        images=out / "images.csv",
        tasks={name: out / "tasks" / f"{name}.csv" for name in city.tasks},
        manifest=out / "city.json",
    )
    save_graph(city.graph, paths.nodes, paths.edges, paths.flows, header_comment=comment)

    with open(paths.images, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if comment:
            fh.write(f"# {comment}\n")
        w.writerow(["region_id"] + [f"f{k}" for k in range(spec.image_dim)])
        for rid in sorted(city.images):
            for shot in city.images[rid]:
                w.writerow([rid] + [repr(v) for v in shot])

    for name, labels in city.tasks.items():
        save_task(paths.tasks[name], labels, header_comment=comment)

    manifest = {
        "spec": asdict(spec),
        "seed": seed,
        "regions": len(city.graph.regions),
        "nodes": len(city.graph.nodes),
        "edges": len(city.graph.edges),
    }
    if config_hash:
        manifest["config_hash"] = config_hash
    with open(paths.manifest, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
