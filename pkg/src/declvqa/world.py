"""Synthetic scene world: attributed objects, region features, templated QA.

A scene is a handful of objects on a small grid, each with a type, color and
size. Objects inside one scene have pairwise-distinct types and colors, so a
phrase like "the ball" or "the red object" always has a unique referent.
Region features are noisy one-hot encodings plus box geometry, and every
question/answer pair is generated from a fixed template whose answer is fully
determined by the scene, which keeps all downstream results checkable by a
brute-force interpreter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import save_tensors, load_tensors

COLOR_NAMES = ["red", "blue", "green", "yellow", "purple", "orange"]
TYPE_NAMES = ["ball", "cube", "cup", "book", "tray", "lamp", "vase", "clock"]
SIZE_NAMES = ["small", "large"]
SIDE_NAMES = ["left", "right"]

QTYPES = ["queryColor", "queryType", "queryRel", "querySide", "verify"]

SPLIT_NAMES = ["train", "val", "test"]


class ConfigError(ValueError):
    """Raised for infeasible or inconsistent world configuration."""


class FeasibilityError(RuntimeError):
    """Raised when a question type cannot be constructed on a scene."""


@dataclass
class WorldConfig:
    n_colors: int = 6
    n_object_types: int = 8
    n_sizes: int = 2
    grid: tuple[int, int] = (4, 4)
    objects_per_scene: tuple[int, int] = (2, 4)
    noise_sigma: float = 0.05
    seed: int = 0
    # Probability of each question type, in QTYPES order.
    qtype_weights: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    # Per annotator vote, probability of voting for a random wrong answer.
    vote_disagreement: float = 0.0
    n_votes: int = 10

    @property
    def region_feat_dim(self) -> int:
        return self.n_colors + self.n_object_types + self.n_sizes + 4

    def validate(self) -> None:
        w, h = self.grid
        lo, hi = self.objects_per_scene
        if self.n_colors > len(COLOR_NAMES) or self.n_object_types > len(TYPE_NAMES):
            raise ConfigError("not enough attribute names for the requested counts")
        if self.n_sizes > len(SIZE_NAMES):
            raise ConfigError("n_sizes exceeds available size names")
        if lo < 2:
            raise ConfigError("objects_per_scene.min must be >= 2")
        if hi < lo:
            raise ConfigError("objects_per_scene range is empty")
        if hi > min(self.n_colors, self.n_object_types, w * h):
            raise ConfigError(
                "objects_per_scene.max exceeds distinct colors/types/cells "
                f"({hi} > {min(self.n_colors, self.n_object_types, w * h)})"
            )
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if len(self.qtype_weights) != len(QTYPES) or abs(sum(self.qtype_weights) - 1.0) > 1e-9:
            raise ConfigError("qtype_weights must give one probability per question type, summing to 1")

    def to_dict(self) -> dict:
        return {
            "n_colors": self.n_colors,
            "n_object_types": self.n_object_types,
            "n_sizes": self.n_sizes,
            "grid": list(self.grid),
            "objects_per_scene": list(self.objects_per_scene),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "qtype_weights": list(self.qtype_weights),
            "vote_disagreement": self.vote_disagreement,
            "n_votes": self.n_votes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        d["grid"] = tuple(d.get("grid", (4, 4)))
        d["objects_per_scene"] = tuple(d.get("objects_per_scene", (2, 4)))
        d["qtype_weights"] = tuple(d.get("qtype_weights", (0.2,) * 5))
        return cls(**d)


@dataclass(frozen=True)
class ObjectSpec:
    type_id: int
    color_id: int
    size_id: int
    cell: tuple[int, int]

    def bbox(self, grid: tuple[int, int]) -> tuple[float, float, float, float]:
        w, h = grid
        x, y = self.cell
        return ((x + 0.5) / w, (y + 0.5) / h, 1.0 / w, 1.0 / h)


@dataclass
class Scene:
    scene_id: str
    objects: list[ObjectSpec]

    def object_by_type(self, type_id: int) -> ObjectSpec:
        return next(o for o in self.objects if o.type_id == type_id)


@dataclass
class QARecord:
    question_id: str
    scene_id: str
    question: str
    answer: str
    full_answer: str
    qtype: str
    human_counts: dict[str, int]

    def to_json(self) -> str:
        return json.dumps(
            {
                "question_id": self.question_id,
                "scene_id": self.scene_id,
                "question": self.question,
                "answer": self.answer,
                "full_answer": self.full_answer,
                "qtype": self.qtype,
                "human_counts": self.human_counts,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "QARecord":
        return cls(**json.loads(line))


def answer_vocabulary(cfg: WorldConfig) -> list[str]:
    """The closed answer set: colors, types, sides, yes/no, in fixed order."""
    return (
        COLOR_NAMES[: cfg.n_colors]
        + TYPE_NAMES[: cfg.n_object_types]
        + SIDE_NAMES
        + ["yes", "no"]
    )


def subrng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one (seed, stream...) coordinate."""
    return np.random.default_rng((seed,) + stream)


def generate_scene(cfg: WorldConfig, rng: np.random.Generator, scene_id: str = "scene") -> Scene:
    """Draw one scene: distinct types, colors and cells per invariants."""
    cfg.validate()
    lo, hi = cfg.objects_per_scene
    n = int(rng.integers(lo, hi + 1))
    w, h = cfg.grid
    type_ids = rng.choice(cfg.n_object_types, size=n, replace=False)
    color_ids = rng.choice(cfg.n_colors, size=n, replace=False)
    size_ids = rng.integers(0, cfg.n_sizes, size=n)
    cell_ids = rng.choice(w * h, size=n, replace=False)
    objects = [
        ObjectSpec(
            type_id=int(t),
            color_id=int(c),
            size_id=int(s),
            cell=(int(cell % w), int(cell // w)),
        )
        for t, c, s, cell in zip(type_ids, color_ids, size_ids, cell_ids)
    ]
    return Scene(scene_id=scene_id, objects=objects)


def encode_regions(scene: Scene, cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """One feature row per object: onehot(color|type|size) + bbox + noise."""
    n = len(scene.objects)
    feats = np.zeros((n, cfg.region_feat_dim), dtype=np.float32)
    for i, obj in enumerate(scene.objects):
        feats[i, obj.color_id] = 1.0
        feats[i, cfg.n_colors + obj.type_id] = 1.0
        feats[i, cfg.n_colors + cfg.n_object_types + obj.size_id] = 1.0
        feats[i, -4:] = obj.bbox(cfg.grid)
    if cfg.noise_sigma > 0:
        feats = feats + rng.normal(0.0, cfg.noise_sigma, size=feats.shape).astype(np.float32)
    return feats.astype(np.float32)


def decode_regions(feats: np.ndarray, cfg: WorldConfig) -> list[tuple[int, int, int]]:
    """Argmax within each one-hot block; inverse of encode_regions at low noise."""
    nc, nt = cfg.n_colors, cfg.n_object_types
    out = []
    for row in feats:
        color = int(np.argmax(row[:nc]))
        typ = int(np.argmax(row[nc : nc + nt]))
        size = int(np.argmax(row[nc + nt : nc + nt + cfg.n_sizes]))
        out.append((color, typ, size))
    return out


def _left_neighbors(scene: Scene, obj: ObjectSpec) -> list[ObjectSpec]:
    """Objects in the same row with strictly smaller x-cell."""
    return [
        o
        for o in scene.objects
        if o is not obj and o.cell[1] == obj.cell[1] and o.cell[0] < obj.cell[0]
    ]


def _rel_targets(scene: Scene) -> list[tuple[ObjectSpec, ObjectSpec]]:
    """(target, left-object) pairs where the left reference is unambiguous."""
    pairs = []
    for obj in scene.objects:
        left = _left_neighbors(scene, obj)
        if len(left) == 1:
            pairs.append((obj, left[0]))
    return pairs


def qtype_feasible(scene: Scene, qtype: str) -> bool:
    if qtype == "queryRel":
        return len(_rel_targets(scene)) > 0
    return True


def _human_counts(cfg: WorldConfig, answer: str, answers: list[str], rng: np.random.Generator) -> dict[str, int]:
    if cfg.vote_disagreement <= 0:
        return {answer: cfg.n_votes}
    counts: dict[str, int] = {}
    others = [a for a in answers if a != answer]
    for _ in range(cfg.n_votes):
        if rng.random() < cfg.vote_disagreement:
            vote = others[int(rng.integers(len(others)))]
        else:
            vote = answer
        counts[vote] = counts.get(vote, 0) + 1
    return dict(sorted(counts.items()))


def generate_qa(
    scene: Scene,
    cfg: WorldConfig,
    rng: np.random.Generator,
    qtype: str | None = None,
    question_id: str = "q",
) -> QARecord:
    """Build one templated QA record whose answer is forced by the scene."""
    if qtype is None:
        qtype = QTYPES[int(rng.choice(len(QTYPES), p=np.asarray(cfg.qtype_weights)))]
    if qtype not in QTYPES:
        raise ValueError(f"unknown question type: {qtype}")
    if not qtype_feasible(scene, qtype):
        raise FeasibilityError(f"{qtype} not constructible on scene {scene.scene_id}")

    answers = answer_vocabulary(cfg)
    obj = scene.objects[int(rng.integers(len(scene.objects)))]
    tname = TYPE_NAMES[obj.type_id]
    cname = COLOR_NAMES[obj.color_id]

    if qtype == "queryColor":
        question = f"what color is the {tname}?"
        answer = cname
        full = f"the {tname} is {cname}."
    elif qtype == "queryType":
        question = f"what is the {cname} object?"
        answer = tname
        full = f"the {cname} object is a {tname}."
    elif qtype == "queryRel":
        targets = _rel_targets(scene)
        target, left_obj = targets[int(rng.integers(len(targets)))]
        t2 = TYPE_NAMES[target.type_id]
        answer = TYPE_NAMES[left_obj.type_id]
        question = f"what is left of the {t2}?"
        full = f"the {answer} is left of the {t2}."
    elif qtype == "querySide":
        cx = obj.bbox(cfg.grid)[0]
        answer = "left" if cx < 0.5 else "right"
        question = f"on which side is the {tname}?"
        full = f"the {tname} is on the {answer}."
    else:  # verify
        present = {(o.color_id, o.type_id) for o in scene.objects}
        if rng.random() < 0.5:
            c_id, t_id = obj.color_id, obj.type_id
            answer = "yes"
        else:
            absent = [
                (c, t)
                for c in range(cfg.n_colors)
                for t in range(cfg.n_object_types)
                if (c, t) not in present
            ]
            c_id, t_id = absent[int(rng.integers(len(absent)))]
            answer = "no"
        c2, t2 = COLOR_NAMES[c_id], TYPE_NAMES[t_id]
        question = f"is there a {c2} {t2}?"
        full = f"yes, there is a {c2} {t2}." if answer == "yes" else f"no, there is no {c2} {t2}."

    return QARecord(
        question_id=question_id,
        scene_id=scene.scene_id,
        question=question,
        answer=answer,
        full_answer=full,
        qtype=qtype,
        human_counts=_human_counts(cfg, answer, answers, rng),
    )


def scene_statements(scene: Scene, cfg: WorldConfig) -> list[str]:
    """All simple true declaratives about a scene, for pre-training captions."""
    statements = []
    for obj in scene.objects:
        tname = TYPE_NAMES[obj.type_id]
        cname = COLOR_NAMES[obj.color_id]
        side = "left" if obj.bbox(cfg.grid)[0] < 0.5 else "right"
        statements.append(f"the {tname} is {cname}.")
        statements.append(f"the {cname} object is a {tname}.")
        statements.append(f"the {tname} is on the {side}.")
        statements.append(f"yes, there is a {cname} {tname}.")
    for target, left_obj in _rel_targets(scene):
        statements.append(
            f"the {TYPE_NAMES[left_obj.type_id]} is left of the {TYPE_NAMES[target.type_id]}."
        )
    return statements


@dataclass
class DatasetSplits:
    """An in-memory dataset: records per split plus scenes and region features."""

    cfg: WorldConfig
    records: dict[str, list[QARecord]]
    scenes: dict[str, Scene] = field(default_factory=dict)
    regions: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def answers(self) -> list[str]:
        return answer_vocabulary(self.cfg)

    def all_texts(self) -> list[str]:
        """Every sentence the corpus can produce, for vocabulary building."""
        texts = []
        for split in self.records.values():
            for rec in split:
                texts.append(rec.question)
                texts.append(rec.full_answer)
        for scene in self.scenes.values():
            texts.extend(scene_statements(scene, self.cfg))
        return texts


_MAX_SCENE_ATTEMPTS = 1000


def build_dataset(cfg: WorldConfig, sizes: dict[str, int]) -> DatasetSplits:
    """Generate disjoint train/val/test splits, one fresh scene per record.

    Question types follow cfg.qtype_weights exactly: the type is drawn first
    and scenes are redrawn until the type is constructible.
    """
    cfg.validate()
    for name, size in sizes.items():
        if name not in SPLIT_NAMES:
            raise ConfigError(f"unknown split name: {name}")
        if size <= 0:
            raise ConfigError(f"split size must be positive: {name}={size}")

    records: dict[str, list[QARecord]] = {}
    scenes: dict[str, Scene] = {}
    regions: dict[str, np.ndarray] = {}
    for split_idx, split in enumerate(s for s in SPLIT_NAMES if s in sizes):
        recs = []
        for i in range(sizes[split]):
            qa_rng = subrng(cfg.seed, split_idx, i, 0)
            qtype = QTYPES[int(qa_rng.choice(len(QTYPES), p=np.asarray(cfg.qtype_weights)))]
            scene = None
            for attempt in range(_MAX_SCENE_ATTEMPTS):
                scene_id = f"s{cfg.seed}-{split}-{i:06d}"
                candidate = generate_scene(cfg, subrng(cfg.seed, split_idx, i, 1, attempt), scene_id)
                if qtype_feasible(candidate, qtype):
                    scene = candidate
                    break
            if scene is None:
                raise FeasibilityError(f"could not construct a scene for {qtype}")
            rec = generate_qa(scene, cfg, qa_rng, qtype, question_id=f"{split}-{i:06d}")
            recs.append(rec)
            scenes[scene.scene_id] = scene
            regions[scene.scene_id] = encode_regions(scene, cfg, subrng(cfg.seed, split_idx, i, 2))
        records[split] = recs
    return DatasetSplits(cfg=cfg, records=records, scenes=scenes, regions=regions)


def save_dataset(ds: DatasetSplits, out_dir: str | Path) -> None:
    """Write the on-disk layout: per-split JSONL + region archives + vocab."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with open(out / "world_config.json", "w", encoding="utf-8") as fh:
            json.dump(ds.cfg.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        with open(out / "answers.json", "w", encoding="utf-8") as fh:
            json.dump(ds.answers, fh)
            fh.write("\n")
        for split, recs in ds.records.items():
            with open(out / f"{split}.jsonl", "w", encoding="utf-8") as fh:
                for rec in recs:
                    fh.write(rec.to_json() + "\n")
            split_regions = {
                rec.scene_id: ds.regions[rec.scene_id] for rec in recs
            }
            save_tensors(out / f"{split}_regions.bin", split_regions)
        with open(out / "scenes.json", "w", encoding="utf-8") as fh:
            json.dump(
                {
                    sid: [
                        {"type_id": o.type_id, "color_id": o.color_id, "size_id": o.size_id, "cell": list(o.cell)}
                        for o in scene.objects
                    ]
                    for sid, scene in sorted(ds.scenes.items())
                },
                fh,
                sort_keys=True,
            )
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out}: {exc}") from exc


def load_dataset(data_dir: str | Path) -> DatasetSplits:
    data = Path(data_dir)
    with open(data / "world_config.json", encoding="utf-8") as fh:
        cfg = WorldConfig.from_dict(json.load(fh))
    records: dict[str, list[QARecord]] = {}
    regions: dict[str, np.ndarray] = {}
    for split in SPLIT_NAMES:
        path = data / f"{split}.jsonl"
        if not path.exists():
            continue
        with open(path, encoding="utf-8") as fh:
            records[split] = [QARecord.from_json(line) for line in fh if line.strip()]
        split_regions, _ = load_tensors(data / f"{split}_regions.bin")
        regions.update(split_regions)
    scenes: dict[str, Scene] = {}
    scenes_path = data / "scenes.json"
    if scenes_path.exists():
        with open(scenes_path, encoding="utf-8") as fh:
            for sid, objs in json.load(fh).items():
                scenes[sid] = Scene(
                    scene_id=sid,
                    objects=[
                        ObjectSpec(o["type_id"], o["color_id"], o["size_id"], tuple(o["cell"]))
                        for o in objs
                    ],
                )
    return DatasetSplits(cfg=cfg, records=records, scenes=scenes, regions=regions)
