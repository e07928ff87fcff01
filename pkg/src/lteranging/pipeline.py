"""File-backed stages: simulate -> receive -> make-dataset -> train -> evaluate.

Each stage reads the previous stage's files under one working directory:

    <root>/capture/   rover.iq, base.iq (+ .json sidecars), truth_*.csv, scenario.json
    <root>/receiver/  tracking_rover.csv, tracking_base.csv, cir_rover.csv, corrected_range.csv
    <root>/dataset/   manifest.json, magnitudes.npy, ranges.npy, frames.npy, tokens.npy
    <root>/models/    <variant>.ckpt (+ .ckpt.json), train_<variant>.csv
    <root>/report/    metrics.json, comparison.csv, table.txt, cdf_*, errors_*, loss_*
"""

from __future__ import annotations

import copy
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import channel, evaluation, ranging
from .iqfile import atomic_write_bytes, atomic_write_text
from .receiver import capture as rxcap

DEFAULT_COMPARE = ("baseline", "proposed")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    scenario: dict = field(default_factory=dict)
    receiver: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    compare: list = field(default_factory=lambda: list(DEFAULT_COMPARE))
    claimed_reduction: float | None = None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
        return cls(**raw)

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        if seed is not None:
            cfg.scenario["seed"] = int(seed)
            cfg.train["seed"] = int(seed)
        return cfg

    def scenario_config(self) -> channel.ScenarioConfig:
        return channel.ScenarioConfig.from_dict(self.scenario)

    def receiver_config(self) -> rxcap.ReceiverConfig:
        return rxcap.ReceiverConfig(**self.receiver)

    def train_config(self) -> ranging.TrainConfig:
        return ranging.TrainConfig(**self.train)

    def model_spec(self, variant: str | None = None, input_length: int = 100,
                   vocab_size: int = 256) -> ranging.ModelSpec:
        kw = dict(self.model)
        if variant:
            kw["variant"] = variant
        kw.setdefault("input_length", input_length)
        kw.setdefault("vocab_size", vocab_size)
        return ranging.ModelSpec(**kw)


def _dirs(root) -> dict[str, Path]:
    root = Path(root)
    return {name: root / name for name in ("capture", "receiver", "dataset", "models", "report")}


# ---------------------------------------------------------------------------
# Stages


def simulate(cfg: ExperimentConfig, root) -> str:
    out = _dirs(root)["capture"]
    try:
        scenario = channel.Scenario(cfg.scenario_config())
        channel.generate_dataset(scenario, out)
    except (ValueError, OSError) as exc:
        raise StageError("simulate", f"{out}: {exc}") from exc
    sc = scenario.config
    return (f"simulate: {sc.n_frames} frames, cell {sc.cell_id}, {sc.bandwidth_mhz:g} MHz, "
            f"range {scenario.rover_range.min():.2f}..{scenario.rover_range.max():.2f} m -> {out}")


def receive(cfg: ExperimentConfig, root) -> str:
    d = _dirs(root)
    src, out = d["capture"], d["receiver"]
    out.mkdir(parents=True, exist_ok=True)
    scenario = _read_scenario(src, "receive")
    rx_cfg = cfg.receiver_config()
    rover_iq = src / "rover.iq"
    try:
        rover = rxcap.process_capture(rover_iq, scenario.bandwidth_mhz, rx_cfg)
    except (OSError, ValueError, RuntimeError) as exc:
        raise StageError("receive", f"{rover_iq}: {exc}") from exc
    truth = _read_truth(src / "truth_rover.csv")
    labels = dict(zip(truth["frame"].astype(int), truth["true_range_m"]))
    rover.write_tracking_log(out / "tracking_rover.csv")
    rover.write_cir_dataset(out / "cir_rover.csv", labels)
    msg = (f"receive: cell {rover.acquisition.cell_id}, {len(rover.frames)} CIR samples, "
           f"locked {int(np.sum(rover.lock))}/{len(rover.lock)}")
    base_iq = src / "base.iq"
    if base_iq.exists():
        try:
            base = rxcap.process_capture(base_iq, scenario.bandwidth_mhz, rx_cfg)
        except (OSError, ValueError, RuntimeError) as exc:
            raise StageError("receive", f"{base_iq}: {exc}") from exc
        base.write_tracking_log(out / "tracking_base.csv")
        base_range = float(np.linalg.norm(np.subtract(scenario.base_position,
                                                      scenario.enodeb_position)))
        corrected = rxcap.remove_clock_bias(rover.frames, rover.toa_s, base.frames, base.toa_s,
                                            base_range)
        err = corrected - np.array([labels[k] for k in rover.frames])
        rows = "".join(f"{k},{c!r},{e!r}\n" for k, c, e in zip(rover.frames, corrected, err))
        atomic_write_text(out / "corrected_range.csv", "frame,range_m,error_m\n" + rows)
        msg += f", bias-corrected range RMSE {np.sqrt(np.mean(err ** 2)):.3f} m"
    return msg + f" -> {out}"


def make_dataset(cfg: ExperimentConfig, root) -> str:
    d = _dirs(root)
    path = d["receiver"] / "cir_rover.csv"
    try:
        frames, labels, mags = rxcap.read_cir_dataset(path)
    except (OSError, ValueError) as exc:
        raise StageError("make-dataset", str(exc)) from exc
    opts = dict(cfg.dataset)
    stride = int(opts.get("decimate", 1))
    frames, labels, mags = frames[::stride], labels[::stride], mags[::stride]
    if np.any(np.isnan(labels)):
        raise StageError("make-dataset", f"{path}: samples without a range label")
    tc = cfg.train_config()
    scale = ranging.normalization_scale(mags)
    tokens = ranging.quantize_cir(mags, tc.levels, scale)
    try:
        train_idx, val_idx, test_idx = ranging.split_indices(
            len(labels), tc.fractions, tc.seed, tc.chronological)
    except ValueError as exc:
        raise StageError("make-dataset", f"{path}: {exc}") from exc
    out = d["dataset"]
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in (("magnitudes", mags), ("ranges", labels), ("frames", frames),
                      ("tokens", tokens)):
        buf = io.BytesIO()
        np.save(buf, arr)
        atomic_write_bytes(out / f"{name}.npy", buf.getvalue())
    manifest = {"n_samples": int(len(labels)), "n_cir": int(mags.shape[1]),
                "levels": tc.levels, "cir_scale": scale, "decimate": stride,
                "seed": tc.seed, "fractions": list(tc.fractions),
                "chronological": tc.chronological,
                "split": {"train": train_idx.tolist(), "val": val_idx.tolist(),
                          "test": test_idx.tolist()}}
    atomic_write_text(out / "manifest.json", json.dumps(manifest, sort_keys=True) + "\n")
    return (f"make-dataset: {len(labels)} samples x {mags.shape[1]} taps, split "
            f"{len(train_idx)}/{len(val_idx)}/{len(test_idx)}, {tc.levels} levels -> {out}")


@dataclass
class DatasetBundle:
    data: ranging.CirDataset
    manifest: dict

    def split(self, name: str) -> ranging.CirDataset:
        return self.data.subset(self.manifest["split"][name])

    @property
    def dataset_id(self) -> str:
        m = self.manifest
        return f"n{m['n_samples']}-cir{m['n_cir']}-seed{m['seed']}"


def load_bundle(root, stage: str = "train") -> DatasetBundle:
    d = _dirs(root)["dataset"]
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        arrays = {k: np.load(d / f"{k}.npy") for k in ("magnitudes", "ranges", "frames")}
    except (OSError, ValueError) as exc:
        raise StageError(stage, f"cannot load dataset bundle in {d}: {exc}") from exc
    return DatasetBundle(ranging.CirDataset(arrays["magnitudes"], arrays["ranges"],
                                            arrays["frames"]), manifest)


def train(cfg: ExperimentConfig, root, variant: str | None = None, progress=None) -> str:
    d = _dirs(root)
    bundle = load_bundle(root, "train")
    spec = cfg.model_spec(variant, bundle.manifest["n_cir"], bundle.manifest["levels"])
    tc = cfg.train_config()
    model = ranging.build_model(spec, tc.seed)
    try:
        record = ranging.train(model, bundle.split("train"), bundle.split("val"), tc,
                               cir_scale=bundle.manifest["cir_scale"], progress=progress)
    except ranging.TrainingDiverged as exc:
        raise StageError("train", f"{spec.variant}: {exc}") from exc
    out = d["models"]
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / f"{spec.variant}.ckpt")
    record.write_csv(out / f"train_{spec.variant}.csv")
    last = (f"final train {record.train_rmse_m[-1]:.3f} m, val {record.val_rmse_m[-1]:.3f} m"
            if record.epochs else "no epochs")
    return (f"train: {spec.variant}, {model.parameter_count()} parameters, "
            f"{record.epochs} epochs ({tc.optimizer}), {last} -> {out}")


def evaluate(cfg: ExperimentConfig, root, variants=None) -> str:
    d = _dirs(root)
    bundle = load_bundle(root, "evaluate")
    train_set, test = bundle.split("train"), bundle.split("test")
    variants = list(variants or cfg.compare)
    reports, records, diagnostics = [], {}, {}
    for v in variants:
        ckpt = d["models"] / f"{v}.ckpt"
        try:
            model = ranging.RangingModel.load(ckpt)
            records[v] = ranging.TrainRecord.read_csv(d["models"] / f"train_{v}.csv")
        except (OSError, ValueError) as exc:
            raise StageError("evaluate", str(exc)) from exc
        pred = ranging.predict(model, test)
        reports.append(evaluation.compute_metrics(pred, test.ranges_m, v, bundle.dataset_id))
        diagnostics[v] = ranging.detect_mean_collapse(pred, train_set.ranges_m).to_dict()
    straw = evaluation.compute_metrics(
        ranging.strawman_predictions(train_set, len(test)), test.ranges_m,
        "train-mean", bundle.dataset_id)
    extra = {"strawman": straw.summary(), "collapse": diagnostics,
             "dataset": {"id": bundle.dataset_id, "n_test": len(test)}}
    evaluation.emit_artifacts(reports, d["report"], records, extra,
                              claimed_reduction=cfg.claimed_reduction)
    parts = ", ".join(f"{r.model_id} RMSE {r.rmse_m:.3f} m" for r in reports)
    return f"evaluate: {parts}, train-mean RMSE {straw.rmse_m:.3f} m -> {d['report']}"


def pipeline(cfg: ExperimentConfig, root, progress=None) -> list[str]:
    lines = [simulate(cfg, root), receive(cfg, root), make_dataset(cfg, root)]
    for v in cfg.compare:
        lines.append(train(cfg, root, v, progress))
    lines.append(evaluate(cfg, root))
    return lines


# ---------------------------------------------------------------------------


def _read_scenario(src: Path, stage: str) -> channel.ScenarioConfig:
    path = src / "scenario.json"
    try:
        return channel.ScenarioConfig.from_json(path)
    except FileNotFoundError:
        raise StageError(stage, f"scenario file not found: {path}") from None


def _read_truth(path: Path) -> dict:
    try:
        return channel.read_truth(path)
    except (OSError, ValueError) as exc:
        raise StageError("receive", str(exc)) from exc


def config_summary(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
