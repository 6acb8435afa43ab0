"""Stage runner: data, translation, teacher, pseudo-labels, refinement, student, evaluation.

Every stage writes into ``<out>/<stage>/`` and records a hash of its config
sections and upstream hashes in ``<out>/manifest.json``. With ``resume`` a
stage is skipped when its hash matches and all its artifacts exist; once any
stage executes, every later stage executes too.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import ConfigError, PipelineConfig
from .metrics import MetricReport, evaluate, slice_dice_profile
from .phantom import DomainPair, generate, read_dataset, write_dataset
from .refinery import ProbabilityVolume, RefinementPolicy, refine
from .selftrain import PatchVoxelSegmenter, PseudoLabeledSet, infer_pseudo_labels, train_student, train_teacher
from .translator import TranslationModel, train_cycle, translate_volume
from .volume import LabelVolume, Volume, VolumeFormatError, load_volume, save_volume

log = logging.getLogger(__name__)

STAGES = ("phantom-gen", "train-translation", "translate", "train-teacher", "infer-pseudo", "refine",
          "train-student", "evaluate")
STAGE_DIRS = {"phantom-gen": "data", "train-translation": "translation", "translate": "synthetic",
              "train-teacher": "teacher", "infer-pseudo": "pseudo", "refine": "refined",
              "train-student": "student", "evaluate": "evaluate"}
# config sections each stage depends on directly
STAGE_SECTIONS = {"phantom-gen": ("phantom", "data"), "train-translation": ("translation",), "translate": (),
                  "train-teacher": ("selftrain",), "infer-pseudo": (), "refine": ("refinement",),
                  "train-student": ("selftrain",), "evaluate": ()}


class DataError(RuntimeError):
    """Missing or malformed input data or upstream artifact."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class RunManifest:
    config_hash: str = ""
    stages: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        if not path.exists():
            return cls()
        d = json.loads(path.read_text())
        return cls(d.get("config_hash", ""), d.get("stages", {}))

    def save(self, path: Path) -> None:
        path.write_text(json.dumps({"config_hash": self.config_hash, "stages": self.stages},
                                   indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load(path: Path):
    try:
        return load_volume(path)
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    except VolumeFormatError as exc:
        raise DataError(f"{path}: {exc}") from None


class Pipeline:
    """Runs named stages against one run directory."""

    def __init__(self, cfg: PipelineConfig, out: Optional[str | os.PathLike] = None, workers: Optional[int] = None):
        self.cfg = cfg
        self.root = Path(out if out is not None else cfg.out)
        self.workers = workers if workers is not None else cfg.workers
        self.manifest_path = self.root / "manifest.json"
        self.executed: list[str] = []
        self._dirty = False

    def dir(self, stage: str) -> Path:
        return self.root / STAGE_DIRS[stage]

    # ---- hashing / resume ----

    def stage_hash(self, stage: str, manifest: RunManifest) -> str:
        i = STAGES.index(stage)
        parts = [stage, self.cfg.section_hash(*STAGE_SECTIONS[stage])]
        if i > 0:
            upstream = STAGES[i - 1]
            entry = manifest.stages.get(upstream)
            if entry is None:
                raise DataError(f"upstream stage {upstream} has not been run in {self.root}")
            parts.append(entry["hash"])
        return hashlib.sha256("|".join(parts).encode()).hexdigest()

    def _is_current(self, stage: str, manifest: RunManifest, h: str) -> bool:
        entry = manifest.stages.get(stage)
        if entry is None or entry.get("hash") != h:
            return False
        return all((self.root / a).exists() for a in entry.get("artifacts", []))

    def run_stage(self, stage: str, resume: bool = False) -> bool:
        """Run one stage; returns False when it was skipped as current."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.root.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest.load(self.manifest_path)
        manifest.config_hash = self.cfg.section_hash("phantom", "data", "translation", "refinement", "selftrain")
        h = self.stage_hash(stage, manifest)
        if resume and not self._dirty and self._is_current(stage, manifest, h):
            log.info("stage %s: up to date, skipped", stage)
            return False
        out = self.dir(stage)
        out.mkdir(parents=True, exist_ok=True)
        log.info("stage %s: running", stage)
        t0 = time.perf_counter()
        runner: Callable[[Path], list[Path]] = getattr(self, "_" + stage.replace("-", "_"))
        try:
            artifacts = runner(out)
        except (DataError, ConfigError, StageError):
            raise
        except (FileNotFoundError, VolumeFormatError) as exc:
            raise DataError(f"stage {stage}: {exc}") from exc
        except Exception as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        missing = [a for a in artifacts if not a.exists()]
        if missing:
            raise StageError(stage, f"declared artifact not written: {missing[0]}")
        manifest.stages[stage] = {
            "hash": h, "complete": True, "seconds": round(time.perf_counter() - t0, 3),
            "artifacts": [str(a.relative_to(self.root)) for a in artifacts],
        }
        # a rerun invalidates everything downstream
        for later in STAGES[STAGES.index(stage) + 1:]:
            manifest.stages.pop(later, None)
        manifest.save(self.manifest_path)
        self._dirty = True
        self.executed.append(stage)
        return True

    def run_all(self, resume: bool = False, stages: Sequence[str] = STAGES) -> list[str]:
        for s in stages:
            self.run_stage(s, resume)
        return self.executed

    # ---- data access ----

    def dataset(self, splits=("source", "target", "heldout")) -> DomainPair:
        d = self.dir("phantom-gen")
        if not (d / "manifest.json").exists():
            raise DataError(f"missing dataset manifest {d / 'manifest.json'}")
        return read_dataset(d, splits)

    def entries(self, split: str) -> list[dict]:
        return json.loads((self.dir("phantom-gen") / "manifest.json").read_text())[split]

    def images(self, split: str) -> list[Volume]:
        d = self.dir("phantom-gen")
        return [_load(d / e["image"]) for e in self.entries(split)]

    def _source_labels(self) -> list[LabelVolume]:
        d = self.dir("phantom-gen")
        return [_load(d / e["label"]) for e in self.entries("source")]

    def synthetic(self) -> list[tuple[Volume, LabelVolume]]:
        d = self.dir("translate")
        labels = self._source_labels()
        return [(_load(d / f"synthetic_{i:03d}.svol"), y) for i, y in enumerate(labels)]

    def pseudo(self) -> list[tuple[ProbabilityVolume, LabelVolume]]:
        d = self.dir("infer-pseudo")
        out = []
        for i in range(len(self.entries("target"))):
            y = _load(d / f"pseudo_{i:03d}.svol")
            probs = np.stack([_load(d / f"probs_{i:03d}_c{c}.svol").data for c in range(y.num_classes)])
            out.append((ProbabilityVolume(probs / probs.sum(axis=0, keepdims=True)), y))
        return out

    def refined(self) -> list[LabelVolume]:
        d = self.dir("refine")
        return [_load(d / f"refined_{i:03d}.svol") for i in range(len(self.entries("target")))]

    # ---- stages ----

    def _phantom_gen(self, out: Path) -> list[Path]:
        if self.cfg.data is not None:
            src = Path(self.cfg.data["dir"])
            if not (src / "manifest.json").exists():
                raise DataError(f"data.dir {src} has no manifest.json")
            pair = read_dataset(src)
            if not pair.source or not pair.target:
                raise DataError(f"data.dir {src} needs at least one source and one target volume")
            echo = json.loads((src / "manifest.json").read_text()).get("config") or {}
            write_dataset(pair, _ConfigEcho(echo), out)
        else:
            write_dataset(generate(self.cfg.phantom_config(), self.workers), self.cfg.phantom_config(), out)
        _write_json(self.root / "config.json", self.cfg.to_dict())
        (self.root / "config.toml").write_text(self.cfg.to_toml())
        m = json.loads((out / "manifest.json").read_text())
        files = [out / "manifest.json"] + [out / e[k] for s in ("source", "target", "heldout")
                                           for e in m[s] for k in ("image", "label")]
        return files

    def _plane(self) -> tuple[int, int]:
        x = self.images("source")[0]
        return x.dims[1], x.dims[2]

    def _train_translation(self, out: Path) -> list[Path]:
        source, target = self.images("source"), self.images("target")
        try:
            ccfg = self.cfg.cycle_config(self._plane())
        except ValueError as exc:
            raise DataError(f"volume plane incompatible with translator: {exc}") from None
        g_st, g_ts, history = train_cycle(source, target, ccfg)
        g_st.save(out / "g_s2t.sdcp")
        g_ts.save(out / "g_t2s.sdcp")
        _write_json(out / "log.json", history.to_dict())
        return [out / "g_s2t.sdcp", out / "g_s2t.sdcp.json", out / "g_t2s.sdcp", out / "g_t2s.sdcp.json",
                out / "log.json"]

    def _translate(self, out: Path) -> list[Path]:
        g = TranslationModel.load(self.dir("train-translation") / "g_s2t.sdcp")
        files = []
        for i, x in enumerate(self.images("source")):
            path = out / f"synthetic_{i:03d}.svol"
            save_volume(translate_volume(g, x, self.workers), path)
            files.append(path)
        return files

    def _save_segmenter(self, model: PatchVoxelSegmenter, out: Path, name: str) -> list[Path]:
        model.save(out / f"{name}.sdcp")
        _write_json(out / "history.json", {"loss": model.history})
        return [out / f"{name}.sdcp", out / f"{name}.sdcp.json", out / "history.json"]

    def _train_teacher(self, out: Path) -> list[Path]:
        model = train_teacher(self.synthetic(), self.cfg.selftrain_config(), self.workers)
        return self._save_segmenter(model, out, "teacher")

    def _infer_pseudo(self, out: Path) -> list[Path]:
        teacher = PatchVoxelSegmenter.load(self.dir("train-teacher") / "teacher.sdcp")
        files = []
        for i, (probs, labels) in enumerate(infer_pseudo_labels(teacher, self.images("target"), self.workers)):
            spacing = labels.spacing
            for c in range(probs.num_classes):
                path = out / f"probs_{i:03d}_c{c}.svol"
                save_volume(Volume(probs.data[c].astype(np.float32), spacing), path)
                files.append(path)
            path = out / f"pseudo_{i:03d}.svol"
            save_volume(labels, path)
            files.append(path)
        return files

    def _refine(self, out: Path) -> list[Path]:
        targets = self.images("target")
        pseudo = self.pseudo()
        policy = self.cfg.policy(pseudo[0][1].num_classes)
        teacher_id = _file_hash(self.dir("train-teacher") / "teacher.sdcp")
        files, reports = [], []
        for i, (x, (probs, y)) in enumerate(zip(targets, pseudo)):
            refined, report = refine(x, y, probs, policy)
            path = out / f"refined_{i:03d}.svol"
            save_volume(refined, path)
            files.append(path)
            reports.append(report.to_dict())
        _write_json(out / "report.json", {"teacher": teacher_id, "policy": _policy_dict(policy), "volumes": reports})
        return files + [out / "report.json"]

    def _train_student(self, out: Path) -> list[Path]:
        targets = self.images("target")
        report = json.loads((self.dir("refine") / "report.json").read_text())
        pseudo = PseudoLabeledSet(list(zip(targets, self.refined())), report["teacher"], report["policy"])
        model = train_student(self.synthetic(), pseudo, self.cfg.selftrain_config(), self.workers)
        return self._save_segmenter(model, out, "student")

    def _evaluate(self, out: Path) -> list[Path]:
        split = "heldout" if self.entries("heldout") else "target"
        d = self.dir("phantom-gen")
        pairs = [(_load(d / e["image"]), _load(d / e["label"])) for e in self.entries(split)]
        models = {"teacher": PatchVoxelSegmenter.load(self.dir("train-teacher") / "teacher.sdcp"),
                  "student": PatchVoxelSegmenter.load(self.dir("train-student") / "student.sdcp")}
        metrics = {"split": split}
        files = []
        profiles = {}
        for name, model in models.items():
            preds = [lab for _, lab in infer_pseudo_labels(model, [x for x, _ in pairs], self.workers)]
            reports = [evaluate(p, y) for p, (_, y) in zip(preds, pairs)]
            metrics[name] = _summarize(reports)
            for i, (p, (_, y)) in enumerate(zip(preds, pairs)):
                for c in range(1, y.num_classes):
                    prof = slice_dice_profile(p, y, c, axis=0)
                    path = out / f"profile_{name}_{i:03d}_c{c}.csv"
                    prof.to_csv(path)
                    files.append(path)
                    profiles[(name, i, c)] = prof.values
        _write_json(out / "metrics.json", metrics)
        png = out / "slice_profiles.png"
        plot_profiles(profiles, png)
        return [out / "metrics.json", png] + files


def _summarize(reports: Sequence[MetricReport]) -> dict:
    assds = [r.mean_assd for r in reports]
    return {
        "volumes": [r.to_dict() for r in reports],
        "mean_dice": float(np.mean([r.mean_dice for r in reports])),
        "mean_assd_mm": "NA" if any(a is None for a in assds) else float(np.mean(assds)),
    }


def _policy_dict(policy: RefinementPolicy) -> dict:
    return {str(c): {"mode": p.mode, "tau": p.tau, "alpha": p.alpha, "beta": p.beta, "connected": p.connected}
            for c, p in sorted(policy.classes.items())}


@dataclass
class _ConfigEcho:
    """Stands in for a generator config when the data came from disk."""
    values: dict

    def to_dict(self) -> dict:
        return dict(self.values)


def plot_profiles(profiles: dict, path: Path) -> None:
    """Static render of per-slice Dice curves, one panel per class."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    classes = sorted({c for _, _, c in profiles})
    fig, axes = plt.subplots(1, len(classes), figsize=(4.5 * len(classes), 3.2), squeeze=False)
    colors = {"teacher": "tab:orange", "student": "tab:blue"}
    for ax, c in zip(axes[0], classes):
        for (name, i, cc), values in sorted(profiles.items()):
            if cc != c:
                continue
            ax.plot(values, color=colors.get(name, "k"), alpha=0.7, label=name if i == 0 else None)
        ax.set_title(f"class {c}")
        ax.set_xlabel("slice")
        ax.set_ylabel("Dice")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def run_pipeline(pair: DomainPair, cfg: PipelineConfig, out: str | os.PathLike, resume: bool = False):
    """Run every stage on an in-memory dataset.

    Returns ``(student, run directory, refinement report)``.
    """
    out = Path(out)
    data_dir = out / "input"
    x, y = pair.source[0]
    write_dataset(pair, _ConfigEcho({"dims": list(x.dims), "num_classes": y.num_classes}), data_dir)
    d = cfg.to_dict()
    d.pop("phantom", None)
    d["data"] = {"dir": str(data_dir)}
    from .config import normalize
    pipe = Pipeline(normalize(d), out)
    pipe.run_all(resume)
    student = PatchVoxelSegmenter.load(pipe.dir("train-student") / "student.sdcp")
    report = json.loads((pipe.dir("refine") / "report.json").read_text())
    return student, out, report
