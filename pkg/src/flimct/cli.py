"""Command-line front end wiring the pipeline end-to-end."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field

import click
import numpy as np

from . import classify, flim, preprocess, synth, volcore
from .errors import FlimError
from .flim import ConvLayerSpec, FlimModel, MarkerSet
from .preprocess import StandardizerConfig
from .volcore import Mask, Volume, _atomic_write_bytes


@dataclass
class PipelineConfig:
    standardizer: StandardizerConfig = field(default_factory=StandardizerConfig)
    layers: list[ConvLayerSpec] = field(
        default_factory=lambda: [ConvLayerSpec(seed=0), ConvLayerSpec(seed=1)])
    svm_c: float = 1.0
    svm_tol: float = 1e-4
    svm_max_iters: int = 10_000
    resample_mm: float = 1.0
    resize_dims: tuple[int, int, int] = (200, 200, 200)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "standardizer": json.loads(self.standardizer.to_json()),
            "layers": [s.to_dict() for s in self.layers],
            "svm": {"C": self.svm_c, "tol": self.svm_tol,
                    "max_iters": self.svm_max_iters},
            "resample_mm": self.resample_mm,
            "resize_dims": list(self.resize_dims),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        cfg = cls()
        if "standardizer" in d:
            cfg.standardizer = StandardizerConfig.from_json(
                json.dumps(d["standardizer"]))
        if "layers" in d:
            cfg.layers = [ConvLayerSpec.from_dict(s) for s in d["layers"]]
        svm = d.get("svm", {})
        cfg.svm_c = float(svm.get("C", cfg.svm_c))
        cfg.svm_tol = float(svm.get("tol", cfg.svm_tol))
        cfg.svm_max_iters = int(svm.get("max_iters", cfg.svm_max_iters))
        cfg.resample_mm = float(d.get("resample_mm", cfg.resample_mm))
        cfg.resize_dims = tuple(d.get("resize_dims", cfg.resize_dims))
        cfg.seed = int(d.get("seed", cfg.seed))
        return cfg

    @classmethod
    def load(cls, path: str) -> "PipelineConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def load_manifest(data_dir: str) -> list[dict]:
    with open(os.path.join(data_dir, "manifest.json")) as f:
        return json.load(f)["images"]


def load_dataset(data_dir: str):
    """Returns (volumes, labels) keyed by image id; labels are -1/+1."""
    volumes, labels = {}, {}
    for entry in load_manifest(data_dir):
        volumes[entry["id"]] = volcore.load_volume(
            os.path.join(data_dir, entry["file"]))
        labels[entry["id"]] = 1 if entry["label"] == "abnormal" else -1
    return volumes, labels


def preprocess_one(vol: Volume, mask: Mask | None, cfg: PipelineConfig) -> Volume:
    """Resample to isotropic spacing, crop, resize, standardize."""
    vol = volcore.resample_isotropic(vol, cfg.resample_mm)
    if mask is not None and mask.dims == vol.dims:
        vol = volcore.crop_to_mask(vol, mask)
        mask = None   # crop invalidates mask alignment; histogram uses all voxels
    vol = volcore.resize_trilinear(vol, cfg.resize_dims)
    return preprocess.standardize(vol, None, cfg.standardizer)


def train_split(volumes: dict, labels: dict, markers: dict,
                plan: classify.SplitPlan, cfg: PipelineConfig
                ) -> tuple[FlimModel, classify.SvmModel]:
    marker_imgs = [volumes[vid] for vid in plan.flim_marker_ids]
    marker_sets = [markers[vid] for vid in plan.flim_marker_ids]
    layers = []
    for spec in cfg.layers:
        layers.append(flim.train_layer(marker_imgs, marker_sets, spec,
                                       prior=layers))
    model = FlimModel(layers=layers, standardizer=cfg.standardizer)
    X = np.stack([flim.extract_descriptor(model, [volumes[vid]])
                  for vid in plan.svm_train_ids])
    y = np.array([labels[vid] for vid in plan.svm_train_ids], dtype=np.float64)
    svm = classify.train_svm(X, y, C=cfg.svm_c, tol=cfg.svm_tol,
                             max_iters=cfg.svm_max_iters, seed=cfg.seed)
    return model, svm


def eval_split(model: FlimModel, svm: classify.SvmModel, volumes: dict,
               labels: dict, ids: list[str]) -> dict:
    X = np.stack([flim.extract_descriptor(model, [volumes[vid]]) for vid in ids])
    y = np.array([labels[vid] for vid in ids])
    preds = classify.predict_batch(svm, X)
    cm = classify.ConfusionMatrix.from_labels(y, preds)
    return {"accuracy": classify.accuracy(cm),
            "kappa": classify.cohen_kappa(cm),
            "confusion": cm.counts.tolist()}


@click.group()
def main():
    """Marker-driven volumetric feature learning toolkit."""


@main.command("synth")
@click.option("--n-normal", type=int, default=24, show_default=True)
@click.option("--n-abnormal", type=int, default=24, show_default=True)
@click.option("--dims", type=int, default=64, show_default=True,
              help="Cubic volume edge length (>= 32).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--markers/--no-markers", default=True, show_default=True,
              help="Also write ground-truth-derived marker files.")
def cmd_synth(n_normal, n_abnormal, dims, seed, out, markers):
    """Generate a deterministic synthetic dataset with a label manifest."""
    if dims < 32:
        raise click.BadParameter("dims must be >= 32")
    d3 = (dims, dims, dims)
    entries = synth.generate_dataset(n_normal, n_abnormal, d3, seed)
    manifest_path = synth.write_dataset(entries, out, d3, seed)
    if markers:
        mdir = os.path.join(out, "markers")
        os.makedirs(mdir, exist_ok=True)
        for vid, sv in entries:
            if sv.label > 0:
                synth.auto_markers(vid, sv, seed=seed).save(
                    os.path.join(mdir, f"{vid}.json"))
    click.echo(f"wrote {len(entries)} volumes; manifest at {manifest_path}")


@main.command("preprocess")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--fallback-threshold", type=float, default=None,
              help="Enable the naive dark-component mask fallback.")
@click.option("--assume-full-mask", is_flag=True,
              help="Treat missing masks as all-ones (skip cropping).")
def cmd_preprocess(data_dir, out, config_path, fallback_threshold, assume_full_mask):
    """Resample, crop, resize, and standardize every manifest volume."""
    cfg = PipelineConfig.load(config_path) if config_path else PipelineConfig()
    os.makedirs(out, exist_ok=True)
    entries = load_manifest(data_dir)
    failures = []
    out_images = []
    for entry in entries:
        vid = entry["id"]
        try:
            vol = volcore.load_volume(os.path.join(data_dir, entry["file"]))
            mask = None
            if entry.get("mask"):
                mask = volcore.load_mask(os.path.join(data_dir, entry["mask"]))
            elif fallback_threshold is not None:
                mask = volcore.naive_lung_mask(vol, fallback_threshold)
            elif not assume_full_mask:
                raise FlimError(f"no mask for {vid} and fallback disabled")
            result = preprocess_one(vol, mask, cfg)
            volcore.save_volume(result, os.path.join(out, f"{vid}.vvf.json"),
                                dtype="f32")
            out_entry = dict(entry)
            out_entry["file"] = f"{vid}.vvf.json"
            out_entry.pop("mask", None)
            out_images.append(out_entry)
        except (FlimError, OSError) as e:
            failures.append((vid, str(e)))
            click.echo(f"FAILED {vid}: {e}", err=True)
    manifest = {"images": out_images,
                "preprocessing": cfg.to_dict()}
    _atomic_write_bytes(os.path.join(out, "manifest.json"),
                        json.dumps(manifest, sort_keys=True, indent=1).encode())
    click.echo(f"preprocessed {len(out_images)} volumes, {len(failures)} failures")
    if failures:
        sys.exit(1)


@main.command("splits")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--n-splits", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def cmd_splits(data_dir, n_splits, seed, out):
    """Generate patient-wise stratified split plans."""
    entries = load_manifest(data_dir)
    patients = [(e["id"], 1 if e["label"] == "abnormal" else -1) for e in entries]
    plans = classify.make_splits(patients, n_splits, seed)
    classify.save_splits(plans, out)
    click.echo(f"wrote {len(plans)} split plans to {out}")


@main.command("train")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--splits", "splits_path", type=click.Path(exists=True), required=True)
@click.option("--split-index", type=int, default=0, show_default=True)
@click.option("--markers", "markers_dir", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), required=True)
def cmd_train(data_dir, splits_path, split_index, markers_dir, config_path, out):
    """Train the FLIM layers and the SVM for one split."""
    cfg = PipelineConfig.load(config_path) if config_path else PipelineConfig()
    plan = classify.load_splits(splits_path)[split_index]
    volumes, labels = load_dataset(data_dir)
    markers = {}
    for vid in plan.flim_marker_ids:
        mpath = os.path.join(markers_dir, f"{vid}.json")
        if not os.path.isfile(mpath):
            raise click.ClickException(f"no marker file for volume {vid} at {mpath}")
        markers[vid] = MarkerSet.load(mpath)
    model, svm = train_split(volumes, labels, markers, plan, cfg)
    os.makedirs(out, exist_ok=True)
    flim.save_model(model, os.path.join(out, "model.json"))
    svm.save(os.path.join(out, "svm.json"))
    report = eval_split(model, svm, volumes, labels, plan.flim_validation_ids)
    _atomic_write_bytes(os.path.join(out, "train_report.json"),
                        json.dumps({"split": split_index,
                                    "validation": report}, sort_keys=True).encode())
    click.echo(f"trained split {split_index}: validation acc "
               f"{report['accuracy']:.3f}, kappa {report['kappa']:.3f}")


@main.command("eval")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--splits", "splits_path", type=click.Path(exists=True), required=True)
@click.option("--models", "models_dir", type=click.Path(exists=True), required=True,
              help="Directory with split_<i>/model.json and svm.json.")
@click.option("--out", type=click.Path(), required=True)
def cmd_eval(data_dir, splits_path, models_dir, out):
    """Score every split's model on its test set; emit a Table-style report."""
    plans = classify.load_splits(splits_path)
    volumes, labels = load_dataset(data_dir)
    rows = []
    for i, plan in enumerate(plans):
        mdir = os.path.join(models_dir, f"split_{i}")
        model = flim.load_model(os.path.join(mdir, "model.json"))
        svm = classify.SvmModel.load(os.path.join(mdir, "svm.json"))
        row = eval_split(model, svm, volumes, labels, plan.test_ids)
        row["split"] = i
        rows.append(row)
    accs = [r["accuracy"] for r in rows]
    kaps = [r["kappa"] for r in rows]
    report = {"splits": rows,
              "mean_accuracy": float(np.mean(accs)),
              "stdev_accuracy": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
              "mean_kappa": float(np.mean(kaps)),
              "stdev_kappa": float(np.std(kaps, ddof=1)) if len(kaps) > 1 else 0.0}
    _atomic_write_bytes(out, json.dumps(report, sort_keys=True, indent=1).encode())
    click.echo(f"mean acc {report['mean_accuracy']:.3f} "
               f"± {report['stdev_accuracy']:.3f}, "
               f"mean kappa {report['mean_kappa']:.3f} "
               f"± {report['stdev_kappa']:.3f}")


@main.command("extract")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def cmd_extract(data_dir, model_path, out):
    """Write last-layer descriptors for every manifest volume as JSON."""
    model = flim.load_model(model_path)
    volumes, labels = load_dataset(data_dir)
    rows = {vid: flim.extract_descriptor(model, [vol]).tolist()
            for vid, vol in volumes.items()}
    _atomic_write_bytes(out, json.dumps(rows, sort_keys=True).encode())
    click.echo(f"wrote {len(rows)} descriptors to {out}")


@main.command("serve")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--markers", "markers_dir", type=click.Path(), required=True)
@click.option("--session-dir", type=click.Path(), required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def cmd_serve(data_dir, markers_dir, session_dir, host, port):
    """Run the interactive HTTP session API."""
    import uvicorn
    from .service import create_app
    app = create_app(data_dir, markers_dir, session_dir)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
