"""Training, evaluation, prediction and throughput drivers."""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_network, save_network
from .config import RunConfig
from .errors import CheckpointError, EmptyDatasetError, NumericError
from .losses import ClassWeights, class_weights, read_frequencies, total_loss, write_frequencies
from .metrics import ConfusionMatrix
from .network import Network, build_network
from .postprocess import KnnConfig, knn_backproject
from .projection import (ModalityStats, ProjectionConfig, RangeImageSet, augment_scan, compute_stats,
                         normalize, project_scan, stack_inputs)
from .scanio import ClassMap, PointCloudScan, builtin_class_map, load_class_map, read_scan

log = logging.getLogger(__name__)


@dataclass
class Sample:
    name: str
    scan: PointCloudScan


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    running_loss: float = math.nan
    best_miou: float = -1.0
    lineage: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)


def resolve_class_map(spec: str) -> ClassMap:
    if spec.startswith("builtin:"):
        return builtin_class_map(spec.split(":", 1)[1])
    return load_class_map(spec)


def scan_files(path) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    return sorted(p.glob("*.bin"))


def load_samples(scan_path, label_path, cmap: ClassMap, subsample: int = 1) -> list[Sample]:
    files = scan_files(scan_path)[::max(subsample, 1)]
    if not files:
        raise EmptyDatasetError(f"no scans found at {scan_path}")
    out = []
    for f in files:
        lab = None
        if label_path:
            lp = Path(label_path)
            lab = lp if lp.is_file() else lp / (f.stem + ".label")
        out.append(Sample(f.stem, read_scan(f, lab, cmap)))
    return out


def class_frequencies(samples, num_classes: int) -> np.ndarray:
    """Fraction of all labeled points falling in each train id."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.scan.labels, minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise EmptyDatasetError("no labeled points")
    return counts / total


def dataset_stats(samples, proj: ProjectionConfig) -> ModalityStats:
    return compute_stats(project_scan(s.scan, proj) for s in samples)


def prepare(scan: PointCloudScan, proj: ProjectionConfig, stats: ModalityStats) -> RangeImageSet:
    return normalize(project_scan(scan, proj), stats)


def predict_pixels(net: Network, images: list[RangeImageSet]) -> np.ndarray:
    """Eval-mode per-pixel argmax, shape (N, H, W)."""
    with T.no_grad():
        logits = net(stack_inputs(images), "eval")
    return logits.data.argmax(axis=1)


def predict_points(net, scan, proj, stats, knn: KnnConfig):
    images = prepare(scan, proj, stats)
    pred2d = predict_pixels(net, [images])[0]
    return knn_backproject(pred2d, images, scan, knn), pred2d, images


def evaluate(net, samples, proj, stats, knn, num_classes) -> tuple[ConfusionMatrix, ConfusionMatrix]:
    """Point-level (after back-projection) and pixel-level confusion matrices."""
    cm3 = ConfusionMatrix(num_classes)
    cm2 = ConfusionMatrix(num_classes)
    for s in samples:
        labels, pred2d, images = predict_points(net, s.scan, proj, stats, knn)
        cm3.update(s.scan.labels, labels)
        m = images.valid_mask
        cm2.update(images.label_image[m], pred2d[m])
    return cm3, cm2


class Trainer:
    def __init__(self, cfg: RunConfig, net: Network, stats: ModalityStats, weights: ClassWeights,
                 train: list[Sample], val: list[Sample] | None = None, out_dir=None):
        self.cfg = cfg
        self.net = net
        self.stats = stats
        self.weights = weights
        self.train = train
        self.val = val
        self.proj = cfg.projection()
        self.loss_cfg = cfg.loss()
        self.knn = cfg.knn()
        self.params = net.parameters()
        self.state = TrainState()
        self.out_dir = Path(out_dir) if out_dir else None
        self._pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def _batch(self, epoch: int, idx: list[int]):
        def one(i):
            scan = self.train[i].scan
            if self.cfg.augment:
                scan = augment_scan(scan, seed=[self.cfg.seed, epoch, i])
            return prepare(scan, self.proj, self.stats)

        images = list(self._pool.map(one, idx)) if self._pool else [one(i) for i in idx]
        labels = np.stack([im.label_image for im in images])
        return stack_inputs(images), labels

    def train_step(self, inputs, labels, batch_id=None) -> float:
        logits = self.net(inputs, "train")
        probs = T.softmax(logits, axis=1)
        loss = total_loss(probs, labels, self.weights, self.loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {self.state.step} "
                               f"(lr={self.cfg.lr}, batch={batch_id})")
        T.backward(loss)
        T.adam_step(self.params, lr=self.cfg.lr)
        self.state.step += 1
        return value

    def run_epoch(self, epoch: int) -> float:
        rng = np.random.default_rng([self.cfg.seed, epoch])
        order = rng.permutation(len(self.train))
        bs = self.cfg.batch_size
        losses = []
        for b in range(0, len(order), bs):
            idx = order[b:b + bs].tolist()
            inputs, labels = self._batch(epoch, idx)
            losses.append(self.train_step(inputs, labels, batch_id=f"epoch{epoch}:{idx}"))
        return float(np.mean(losses))

    def validate(self) -> float:
        cm3, _ = evaluate(self.net, self.val, self.proj, self.stats, self.knn, self.net.cfg.num_classes)
        return cm3.miou()

    def run(self, epochs: int | None = None, log_path=None) -> TrainState:
        epochs = self.cfg.epochs if epochs is None else epochs
        writer = None
        fh = None
        if log_path:
            fh = open(log_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_miou", "wall_time"])
        t0 = time.perf_counter()
        try:
            for epoch in range(1, epochs + 1):
                loss = self.run_epoch(epoch)
                self.state.epoch = epoch
                self.state.running_loss = loss
                miou = math.nan
                if self.val and (epoch % self.cfg.val_every == 0 or epoch == epochs):
                    miou = self.validate()
                    if miou > self.state.best_miou:
                        self.state.best_miou = miou
                        self._checkpoint(epoch, miou)
                wall = time.perf_counter() - t0
                row = {"epoch": epoch, "train_loss": loss, "val_miou": miou, "wall_time": wall}
                self.state.history.append(row)
                log.info("epoch %d loss %.4f val mIoU %.4f (%.1fs)", epoch, loss, miou, wall)
                if writer:
                    writer.writerow([epoch, repr(loss), repr(miou), f"{wall:.3f}"])
                    fh.flush()
                if self.cfg.stop_at_miou and miou >= self.cfg.stop_at_miou:
                    break
        finally:
            if fh:
                fh.close()
        return self.state

    def _checkpoint(self, epoch: int, miou: float) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "best.fpsc"
        meta = {"epoch": epoch, "step": self.state.step, "val_miou": miou,
                "stats": self.stats.to_text(), "projection": vars(self.proj)}
        save_network(self.net, path, meta)
        self.state.lineage.append(f"{path}@epoch{epoch}")


# ---------------------------------------------------------------------------
# command drivers


def cmd_stats(cfg: RunConfig, stats_path=None, freq_path=None, hist_path=None) -> tuple[ModalityStats, np.ndarray]:
    cmap = resolve_class_map(cfg.class_map)
    samples = load_samples(cfg.train_scans, cfg.train_labels, cmap, cfg.subsample)
    stats = dataset_stats(samples, cfg.projection())
    freqs = (class_frequencies(samples, cmap.num_classes) if samples[0].scan.labels is not None
             else np.zeros(cmap.num_classes))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats.save(stats_path or cfg.stats or out / "stats.txt")
    write_frequencies(freqs, freq_path or cfg.frequencies or out / "frequencies.txt")
    write_histogram_csv(stats, hist_path or out / "histograms.csv")
    return stats, freqs


def write_histogram_csv(stats: ModalityStats, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "bin_lo", "bin_hi", "count"])
        for name, c in stats.channels.items():
            for i, k in enumerate(c.counts):
                w.writerow([name, repr(float(c.edges[i])), repr(float(c.edges[i + 1])), int(k)])


def _load_stats_and_weights(cfg: RunConfig, cmap: ClassMap):
    out = Path(cfg.out_dir)
    stats_path = Path(cfg.stats) if cfg.stats else out / "stats.txt"
    if not stats_path.exists():
        raise EmptyDatasetError(f"stats sidecar {stats_path} not found; run the stats command first")
    stats = ModalityStats.load(stats_path)
    freq_path = Path(cfg.frequencies) if cfg.frequencies else out / "frequencies.txt"
    freqs = read_frequencies(freq_path) if freq_path.exists() else None
    if freqs is None:
        weights = ClassWeights.uniform(cmap.num_classes)
    else:
        f = np.zeros(cmap.num_classes)
        f[:min(len(freqs), cmap.num_classes)] = freqs[:cmap.num_classes]
        weights = class_weights(f)
    return stats, weights


def cmd_train(cfg: RunConfig) -> TrainState:
    cmap = resolve_class_map(cfg.class_map)
    stats, weights = _load_stats_and_weights(cfg, cmap)
    train = load_samples(cfg.train_scans, cfg.train_labels, cmap, cfg.subsample)
    val = load_samples(cfg.val_scans, cfg.val_labels, cmap) if cfg.val_scans else None
    net = build_network(cfg.network(cmap.num_classes), cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, net, stats, weights, train, val, out)
    state = trainer.run(log_path=out / "train_log.csv")
    if not val:
        save_network(net, out / "last.fpsc", {"epoch": state.epoch, "step": state.step,
                                              "stats": stats.to_text()})
    return state


def _load_for_inference(cfg: RunConfig, checkpoint, cmap: ClassMap):
    net, meta = load_network(checkpoint)
    expect = cfg.network(cmap.num_classes)
    if net.cfg.to_dict() != expect.to_dict():
        raise CheckpointError("checkpoint architecture does not match the configuration")
    if "stats" in meta:
        stats = ModalityStats.from_text(meta["stats"])
    else:
        stats, _ = _load_stats_and_weights(cfg, cmap)
    return net, stats


def cmd_eval(cfg: RunConfig, checkpoint) -> dict:
    cmap = resolve_class_map(cfg.class_map)
    net, stats = _load_for_inference(cfg, checkpoint, cmap)
    scans, labels = (cfg.val_scans, cfg.val_labels) if cfg.val_scans else (cfg.train_scans, cfg.train_labels)
    samples = load_samples(scans, labels, cmap)
    cm3, cm2 = evaluate(net, samples, cfg.projection(), stats, cfg.knn(), cmap.num_classes)
    return {"points": cm3, "pixels": cm2, "rows": cm3.report(cmap.class_names),
            "miou": cm3.miou(), "miou_2d": cm2.miou()}


def cmd_predict(cfg: RunConfig, checkpoint, scan_path, out_label, out_pgm=None) -> np.ndarray:
    from .scanio import write_labels

    cmap = resolve_class_map(cfg.class_map)
    net, stats = _load_for_inference(cfg, checkpoint, cmap)
    scan = read_scan(scan_path)
    labels, pred2d, _ = predict_points(net, scan, cfg.projection(), stats, cfg.knn())
    Path(out_label).write_bytes(write_labels(labels, cmap))
    if out_pgm:
        write_pgm(pred2d, out_pgm)
    return labels


def write_pgm(image: np.ndarray, path) -> None:
    """Binary portable graymap of a class-id image (ids must fit in 16 bits)."""
    img = np.asarray(image)
    h, w = img.shape
    maxval = max(int(img.max()), 1)
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    dt = ">u1" if maxval < 256 else ">u2"
    Path(path).write_bytes(header + img.astype(dt).tobytes())


def cmd_bench(cfg: RunConfig, scans=None, runs: int = 20, warmup: int = 3,
              include_forward: bool = True, net: Network | None = None, objects: int = 200) -> dict:
    """Median scans/sec for projection, forward, post-process and end-to-end.

    Without ``scans``, four synthetic scans with ``objects`` random objects are
    generated at the configured resolution (200 objects gives ~110k points at 64x2048).
    """
    from .synth import generate_scan, random_scene

    proj = cfg.projection()
    if scans is None:
        scans = [generate_scan(random_scene(cfg.seed + i, beams=proj.H, azimuth_steps=proj.W, objects=objects))
                 for i in range(4)]
    stats = dataset_stats([Sample(str(i), s) for i, s in enumerate(scans)], proj)
    knn = cfg.knn()
    if include_forward and net is None:
        net = build_network(cfg.network(resolve_class_map(cfg.class_map).num_classes), cfg.seed)

    def timed(fn):
        for i in range(warmup):
            fn(scans[i % len(scans)])
        out = []
        for i in range(runs):
            t = time.perf_counter()
            fn(scans[i % len(scans)])
            out.append(time.perf_counter() - t)
        return 1.0 / statistics.median(out)

    prepared = {id(s): prepare(s, proj, stats) for s in scans}
    preds = {id(s): np.zeros(proj.H * proj.W, dtype=np.int64).reshape(proj.H, proj.W) for s in scans}
    if include_forward:
        for s in scans:
            preds[id(s)] = predict_pixels(net, [prepared[id(s)]])[0]

    report = {"projection": timed(lambda s: prepare(s, proj, stats)),
              "postprocess": timed(lambda s: knn_backproject(preds[id(s)], prepared[id(s)], s, knn))}
    report["projection+postprocess"] = timed(
        lambda s: knn_backproject(preds[id(s)], prepare(s, proj, stats), s, knn))
    if include_forward:
        report["forward"] = timed(lambda s: predict_pixels(net, [prepared[id(s)]]))
        report["end_to_end"] = timed(lambda s: predict_points(net, s, proj, stats, knn))
    return report


def ablation_matrix(cfg: RunConfig, train: list[Sample], val: list[Sample], stats, weights,
                    num_classes: int, epochs: int = 5, cells=None) -> list[dict]:
    """Train each (input mode, modality subset, fusion preset) cell and report its mIoU."""
    from .network import FUSION_PRESETS

    if cells is None:
        cells = [("fused", ("coord", "depth", "intensity"), p) for p in FUSION_PRESETS]
        cells.append(("stacked", ("coord", "depth", "intensity"), "early"))
    rows = []
    proj = cfg.projection()
    for mode, mods, preset in cells:
        c = RunConfig(**{**vars(cfg), "input_mode": mode, "modalities": tuple(mods), "fusion": preset})
        net = build_network(c.network(num_classes), c.seed)
        tr = Trainer(c, net, stats, weights, train, None)
        t0 = time.perf_counter()
        state = tr.run(epochs)
        cm3, cm2 = evaluate(net, val, proj, stats, c.knn(), num_classes)
        rows.append({"input_mode": mode, "modalities": "+".join(mods), "fusion": preset,
                     "train_loss": state.running_loss, "miou": cm3.miou(), "miou_2d": cm2.miou(),
                     "seconds": time.perf_counter() - t0})
    return rows
