"""Incremental protocol driver and seeded synthetic scene generator.

A split divides all classes into ordered groups; at step t the first t-1
groups are old, group t is new and the rest are unseen. Each step trains on
the new group's training scenes (plus memory replay), fits tail models for
the new classes only, refreshes the exemplar memory, then evaluates on every
test scene.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .ever import EvtBank, classify_batch, fit_class_model
from .losses import HyperParams
from .memory import ExemplarMemory, rebalance, select_exemplars
from .metrics import Detection, GroundTruth, map_over, per_class_ap
from .semantic import BACKGROUND, Registry, SemanticTable, build_table, l2_normalize
from .trainer import (
    LabeledFeatures,
    ModelState,
    TrainConfig,
    expand_classifier,
    init_state,
    train_first_step,
    train_incremental_step,
)

TRAIN, TEST = "train", "test"
IMAGE_SIZE = 100.0
GRID = 4


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassSplit:
    groups: tuple

    def __post_init__(self):
        groups = tuple(tuple(int(c) for c in g) for g in self.groups)
        if not groups or any(not g for g in groups):
            raise ValueError("split needs at least one nonempty group")
        flat = [c for g in groups for c in g]
        if len(flat) != len(set(flat)):
            raise ValueError("class groups must be pairwise disjoint")
        if BACKGROUND in flat:
            raise ValueError("class id 0 is reserved for background")
        object.__setattr__(self, "groups", groups)

    @property
    def num_steps(self) -> int:
        return len(self.groups)

    @property
    def all_classes(self) -> frozenset:
        return frozenset(c for g in self.groups for c in g)

    def registry(self, step: int) -> Registry:
        """Class sets at a one-based step."""
        if not 1 <= step <= self.num_steps:
            raise ProtocolError(f"step {step} outside 1..{self.num_steps}")
        old = [c for g in self.groups[: step - 1] for c in g]
        unseen = [c for g in self.groups[step:] for c in g]
        return Registry(frozenset(old), frozenset(self.groups[step - 1]), frozenset(unseen))

    def group_of(self, class_id: int) -> int:
        for k, g in enumerate(self.groups):
            if class_id in g:
                return k + 1
        raise KeyError(class_id)

    def dumps(self) -> str:
        return json.dumps({"groups": [list(g) for g in self.groups]})

    @classmethod
    def loads(cls, text: str) -> "ClassSplit":
        return cls(tuple(json.loads(text)["groups"]))

    @classmethod
    def even(cls, num_classes: int, num_groups: int) -> "ClassSplit":
        """Consecutive ids 1..C cut into ``num_groups`` equal groups."""
        if num_groups < 1 or num_classes % num_groups:
            raise ValueError(f"{num_classes} classes do not split evenly into {num_groups} groups")
        size = num_classes // num_groups
        return cls(tuple(tuple(range(1 + k * size, 1 + (k + 1) * size)) for k in range(num_groups)))


@dataclass(frozen=True)
class Proposal:
    box: tuple
    feature: np.ndarray = field(repr=False)
    label: int


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: str
    split: str
    proposals: tuple
    ground_truth: tuple

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "split": self.split,
            "proposals": [
                {"box": list(p.box), "label": p.label, "feature": [float(v) for v in p.feature]}
                for p in self.proposals
            ],
            "ground_truth": [{"box": list(g.box), "label": g.class_id} for g in self.ground_truth],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticScene":
        sid = str(obj["scene_id"])
        props = tuple(
            Proposal(tuple(float(v) for v in p["box"]), np.array(p["feature"], dtype=float), int(p["label"]))
            for p in obj.get("proposals", ())
        )
        gts = tuple(GroundTruth(sid, tuple(g["box"]), int(g["label"])) for g in obj.get("ground_truth", ()))
        return cls(sid, str(obj.get("split", TEST)), props, gts)


@dataclass(frozen=True)
class Dataset:
    """Scenes partitioned into training and test sets."""

    train: tuple
    test: tuple

    @property
    def feature_dim(self) -> int:
        for sc in self.train + self.test:
            for p in sc.proposals:
                return int(p.feature.size)
        raise ValueError("dataset has no proposals")

    def dumps(self) -> str:
        buf = io.StringIO()
        for sc in self.train + self.test:
            buf.write(json.dumps(sc.to_dict(), separators=(",", ":")))
            buf.write("\n")
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "Dataset":
        scenes = [SyntheticScene.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(tuple(s for s in scenes if s.split == TRAIN), tuple(s for s in scenes if s.split != TRAIN))


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 20
    d: int = 16
    r: int = 32
    scenes_per_class: int = 60
    proposals_per_scene: int = 6
    noise_sigma: float = 0.08
    bg_fraction: float = 0.5
    bg_spread: float = 1.5
    test_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.d < 2 or self.r < 2:
            raise ValueError("num_classes, d and r must be at least 2")
        if self.r < self.d:
            raise ValueError("raw feature dim r must be >= semantic dim d")
        if not 1 <= self.proposals_per_scene <= GRID * GRID:
            raise ValueError(f"proposals_per_scene must lie in 1..{GRID * GRID}")
        if not 0 <= self.bg_fraction < 1:
            raise ValueError("bg_fraction must lie in [0, 1)")
        if self.n_fg_per_scene < 1:
            raise ValueError("bg_fraction leaves no foreground proposal per scene")
        if self.noise_sigma < 0 or self.bg_spread < 0:
            raise ValueError("noise levels must be nonnegative")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.scenes_per_class < 2:
            raise ValueError("need at least 2 scenes per class")

    @property
    def n_bg_per_scene(self) -> int:
        return int(round(self.proposals_per_scene * self.bg_fraction))

    @property
    def n_fg_per_scene(self) -> int:
        return self.proposals_per_scene - self.n_bg_per_scene


@dataclass(frozen=True)
class SyntheticData:
    dataset: Dataset
    table: SemanticTable
    class_embeddings: np.ndarray
    class_names: tuple
    hidden_map: np.ndarray


def _cell_box(rng, cell: int) -> tuple:
    size = IMAGE_SIZE / GRID
    ox, oy = (cell % GRID) * size, (cell // GRID) * size
    x1 = ox + rng.uniform(0.0, 0.2 * size)
    y1 = oy + rng.uniform(0.0, 0.2 * size)
    w = rng.uniform(0.6 * size, 0.8 * size)
    h = rng.uniform(0.6 * size, 0.8 * size)
    return (float(x1), float(y1), float(x1 + w), float(y1 + h))


def _jitter(rng, box: tuple, amount: float = 1.0) -> tuple:
    x1, y1, x2, y2 = (b + rng.uniform(-amount, amount) for b in box)
    return (float(x1), float(y1), float(x2), float(y2))


def generate_synthetic(spec: SyntheticSpec, class_embeddings=None, class_names: Sequence[str] | None = None) -> SyntheticData:
    """Deterministic synthetic scenes from a hidden linear semantic-to-raw map.

    Class centers in raw space are ``M e_c`` for a random ``r x d`` matrix
    ``M`` with orthonormal columns and unit embedding rows ``e_c``.
    Foreground proposals add isotropic noise of ``noise_sigma`` around their
    center; background proposals scatter around the background row's center
    with ``bg_spread * noise_sigma``. Each scene holds objects of a single
    class, one foreground proposal per object, on non-overlapping grid cells.
    """
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes
    if class_embeddings is None:
        emb = rng.normal(size=(C, spec.d))
    else:
        emb = np.asarray(class_embeddings, dtype=float)
        if emb.shape != (C, spec.d):
            raise ValueError(f"embeddings of shape {emb.shape} do not match {C} x {spec.d}")
    names = tuple(class_names) if class_names is not None else tuple(f"class_{k:02d}" for k in range(1, C + 1))
    table = build_table(emb, names)
    M, _ = np.linalg.qr(rng.normal(size=(spec.r, spec.d)))
    centers = table.embeddings @ M.T  # row k: center of class k (0 = background)

    n_test = max(1, int(round(spec.scenes_per_class * spec.test_fraction)))
    n_train = spec.scenes_per_class - n_test
    if n_train < 1:
        raise ValueError("test_fraction leaves no training scenes")
    train, test = [], []
    for c in range(1, C + 1):
        for k in range(spec.scenes_per_class):
            split = TRAIN if k < n_train else TEST
            sid = f"c{c:03d}_s{k:04d}"
            cells = rng.permutation(GRID * GRID)[: spec.proposals_per_scene]
            props, gts = [], []
            for j, cell in enumerate(cells):
                box = _cell_box(rng, int(cell))
                if j < spec.n_fg_per_scene:
                    x = centers[c] + spec.noise_sigma * rng.normal(size=spec.r)
                    gts.append(GroundTruth(sid, box, c))
                    props.append(Proposal(_jitter(rng, box), x, c))
                else:
                    x = centers[BACKGROUND] + spec.bg_spread * spec.noise_sigma * rng.normal(size=spec.r)
                    props.append(Proposal(box, x, BACKGROUND))
            scene = SyntheticScene(sid, split, tuple(props), tuple(gts))
            (train if split == TRAIN else test).append(scene)
    return SyntheticData(Dataset(tuple(train), tuple(test)), table, emb, names, M)


def separation_stats(data: SyntheticData) -> dict:
    """Within-class 95th-percentile and mean between-class distances of the
    noise-free-map projections ``M^T x`` (ℓ2-normalized) of the foreground."""
    M = data.hidden_map
    within = []
    for sc in data.dataset.train + data.dataset.test:
        for p in sc.proposals:
            if p.label != BACKGROUND:
                s = l2_normalize(M.T @ p.feature)
                within.append(float(np.linalg.norm(s - data.table.embeddings[p.label])))
    E = data.table.embeddings[1:]
    diff = np.linalg.norm(E[:, None, :] - E[None, :, :], axis=2)
    iu = np.triu_indices(E.shape[0], k=1)
    return {"within_p95": float(np.percentile(within, 95)), "between_mean": float(diff[iu].mean())}


def _scene_features(scenes, keep_label) -> tuple[LabeledFeatures, list[str]]:
    xs, ys, ids = [], [], []
    for sc in scenes:
        for j, p in enumerate(sc.proposals):
            if keep_label(p.label):
                xs.append(p.feature)
                ys.append(p.label)
                ids.append(f"{sc.scene_id}#{j}")
    if not xs:
        return LabeledFeatures(np.empty((0, 1)), np.empty(0, dtype=int)), []
    return LabeledFeatures(np.vstack(xs), np.array(ys, dtype=int)), ids


def training_data(train_scenes, classes) -> tuple[LabeledFeatures, list[str]]:
    """Proposals of training scenes whose objects all belong to ``classes``.

    Background proposals from those scenes are included.
    """
    classes = set(classes)
    picked = []
    for sc in train_scenes:
        if sc.split != TRAIN:
            raise ProtocolError(f"scene {sc.scene_id} is not a training scene")
        labels = {g.class_id for g in sc.ground_truth}
        if labels and labels <= classes:
            picked.append(sc)
    return _scene_features(picked, lambda _: True)


@dataclass
class StepReport:
    step: int
    rows: list = field(default_factory=list)

    def add(self, group: str, metric: str, value: float):
        self.rows.append((group, metric, float(value)))

    def get(self, group: str, metric: str) -> float:
        for g, m, v in self.rows:
            if g == group and m == metric:
                return v
        raise KeyError((group, metric))


def reports_to_csv(reports: Sequence[StepReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "group", "metric", "value"])
    for rep in reports:
        for g, m, v in rep.rows:
            w.writerow([rep.step, g, m, repr(v)])
    return buf.getvalue()


def evaluate(state: ModelState, bank: EvtBank, table: SemanticTable, registry: Registry, split: ClassSplit, test_scenes, step: int, mode: str = "interp11") -> StepReport:
    """Route and label every test proposal, then score detections and routing."""
    X, labels = [], []
    boxes, scene_ids = [], []
    gts = []
    for sc in test_scenes:
        gts.extend(sc.ground_truth)
        for p in sc.proposals:
            X.append(p.feature)
            labels.append(p.label)
            boxes.append(p.box)
            scene_ids.append(sc.scene_id)
    X = np.vstack(X)
    y = np.array(labels, dtype=int)
    F = state.features(X)
    S = F @ state.W.T
    S_hat = l2_normalize(S)
    # background: the background row wins the cosine over every class row
    is_bg_pred = np.argmax(S_hat @ table.embeddings.T, axis=1) == BACKGROUND
    pred, route_seen, scores = classify_batch(S, F, bank, state, table, registry)
    dets = [
        Detection(scene_ids[i], boxes[i], int(pred[i]), float(scores[i]))
        for i in range(len(y))
        if not is_bg_pred[i]
    ]
    classes = sorted(split.all_classes)
    aps = per_class_ap(dets, gts, classes, mode=mode)

    rep = StepReport(step)
    fg = y != BACKGROUND
    correct = (pred == y) & ~is_bg_pred
    for k, g in enumerate(split.groups, start=1):
        name = f"G{k}"
        rep.add(name, "mAP", map_over(g, aps))
        in_g = np.isin(y, g)
        rep.add(name, "accuracy", correct[in_g].mean() if in_g.any() else math.nan)
    seen, unseen = sorted(registry.seen_classes), sorted(registry.unseen_classes)
    rep.add("seen", "mAP", map_over(seen, aps))
    rep.add("unseen", "mAP", map_over(unseen, aps) if unseen else math.nan)
    rep.add("all", "mAP", map_over(classes, aps))

    is_seen = np.isin(y, seen)
    is_unseen = np.isin(y, unseen)
    seen_rows = state.row_of(seen)
    ic_pred = np.asarray(seen)[np.argmax(state.logits(F)[:, seen_rows], axis=1)]
    rep.add("seen", "ic_accuracy", (ic_pred == y)[is_seen].mean() if is_seen.any() else math.nan)
    rep.add("routing", "seen_as_seen", np.sum(is_seen & route_seen))
    rep.add("routing", "seen_as_unseen", np.sum(is_seen & ~route_seen))
    rep.add("routing", "unseen_as_seen", np.sum(is_unseen & route_seen))
    rep.add("routing", "unseen_as_unseen", np.sum(is_unseen & ~route_seen))
    rep.add("routing", "seen_recall", route_seen[is_seen].mean() if is_seen.any() else math.nan)
    rep.add("routing", "unseen_recall", (~route_seen[is_unseen]).mean() if is_unseen.any() else math.nan)
    rep.add("background", "rejection_rate", is_bg_pred[~fg].mean() if (~fg).any() else math.nan)
    for c in classes:
        rep.add(f"class_{c}", "AP", aps[c])
    return rep


@dataclass
class ProtocolState:
    model: ModelState | None
    bank: EvtBank
    memory: ExemplarMemory


def run_step(
    step: int,
    split: ClassSplit,
    dataset: Dataset,
    state: ProtocolState,
    table: SemanticTable,
    hp: HyperParams,
    cfg: TrainConfig,
    visual_dim: int = 32,
    ap_mode: str = "interp11",
) -> tuple[ProtocolState, StepReport]:
    """Train, fit tail models, refresh memory and evaluate for one step."""
    registry = split.registry(step)
    if set(state.bank.models) != set(registry.old_classes):
        raise ProtocolError(f"step {step}: bank holds {sorted(state.bank.models)}, expected old classes {sorted(registry.old_classes)}")
    if hp.memory_size < registry.n_seen:
        raise ProtocolError(f"memory size {hp.memory_size} smaller than {registry.n_seen} seen classes")
    new_ids = sorted(registry.new_classes)
    data, source_ids = training_data(dataset.train, registry.new_classes)
    if len(data) == 0:
        raise ProtocolError(f"step {step}: no training scenes for classes {new_ids}")
    step_cfg = replace(cfg, seed=cfg.seed + step)

    if step == 1 or state.model is None:
        if registry.n_old:
            raise ProtocolError("a fresh model can only start at the first step")
        model = init_state(data.x.shape[1], visual_dim, table.d, seed=cfg.seed)
        model = expand_classifier(model, new_ids)
        model = train_first_step(data, model, table, registry, hp, step_cfg)
    else:
        old = state.model
        if set(old.class_ids) != set(registry.old_classes):
            raise ProtocolError(f"step {step}: model classes do not match the old classes")
        mem_x, mem_y = state.memory.features()
        mem = LabeledFeatures(mem_x, mem_y) if mem_y.size else None
        new = expand_classifier(old, new_ids)
        model = train_incremental_step(data, mem, old, new, table, registry, hp, step_cfg)
    model.step_index = step

    fg_by_class: dict[int, list[int]] = {c: [] for c in new_ids}
    for i, lab in enumerate(data.labels):
        if lab in fg_by_class:
            fg_by_class[lab].append(i)
    S = model.project(data.x)
    bank = state.bank.with_models(fit_class_model(c, S[fg_by_class[c]], hp.eta) for c in new_ids)

    memory = rebalance(state.memory, registry.seen_classes) if state.memory.per_class else state.memory
    quota = hp.memory_size // registry.n_seen
    for c in new_ids:
        idx = fg_by_class[c]
        cands = [(data.x[i], source_ids[i]) for i in idx]
        memory = memory.with_class(c, select_exemplars(c, cands, quota, embed=model.features))

    report = evaluate(model, bank, table, registry, split, dataset.test, step, ap_mode)
    return ProtocolState(model, bank, memory), report


def run_protocol(split: ClassSplit, dataset: Dataset, table: SemanticTable, hp: HyperParams, cfg: TrainConfig, visual_dim: int = 32, ap_mode: str = "interp11", on_step=None):
    """Run every step in order; returns ``(reports, final ProtocolState)``.

    ``on_step(step, state, report)`` is called after each step.
    """
    if not split.all_classes <= set(range(1, table.num_classes + 1)):
        raise ProtocolError("split references classes outside the embedding table")
    state = ProtocolState(None, EvtBank({}, hp.delta), ExemplarMemory(hp.memory_size))
    reports = []
    for step in range(1, split.num_steps + 1):
        state, rep = run_step(step, split, dataset, state, table, hp, cfg, visual_dim, ap_mode)
        reports.append(rep)
        if on_step is not None:
            on_step(step, state, rep)
    return reports, state
