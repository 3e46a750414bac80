"""Acceptance criteria 1-9. Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line."""

import contextlib
import math
import struct
import time

import numpy as np
import pytest

from rangeseg import tensor as T
from rangeseg.checkpoint import load_network
from rangeseg.config import make_config
from rangeseg.errors import MalformedScanError
from rangeseg.losses import ClassWeights, class_weights, lovasz_softmax, total_loss, weighted_xent
from rangeseg.metrics import ConfusionMatrix
from rangeseg.network import FUSION_PRESETS, build_network, preset_config
from rangeseg.postprocess import KnnConfig, knn_backproject
from rangeseg.projection import ModalityStats, ProjectionConfig, project_scan
from rangeseg.scanio import (ClassMap, PointCloudScan, parse_labels, parse_scan, read_scan, save_scan,
                             split_labels, write_labels, write_scan)
from rangeseg.synth import generate_scan, random_scene
from rangeseg.tensor import BatchNormState, Tensor, grad_check
from rangeseg.train import Sample, Trainer, ablation_matrix, class_frequencies, cmd_bench, dataset_stats, evaluate


@contextlib.contextmanager
def criterion(capsys, n, title, limit_s=None):
    """Run one criterion body; print its verdict line and enforce the runtime limit."""
    notes = []
    t0 = time.perf_counter()
    verdict, err = "PASS", None
    try:
        yield notes
    except BaseException as exc:  # noqa: BLE001 - reported, then re-raised
        verdict, err = "FAIL", exc
    elapsed = time.perf_counter() - t0
    if err is None and limit_s is not None and elapsed >= limit_s:
        verdict = "FAIL"
        err = AssertionError(f"took {elapsed:.1f}s, limit {limit_s}s")
    detail = "; ".join(notes + ([f"error: {err}"] if err else []))
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {verdict} {title} ({elapsed:.1f}s): {detail}")
    if err is not None:
        raise err


# -- 1 ---------------------------------------------------------------------------------

def _finite_floats(rng, n):
    out = rng.integers(0, 2 ** 32, size=n, dtype=np.uint64).astype(np.uint32).view(np.float32)
    bad = ~np.isfinite(out)
    out[bad] = rng.standard_normal(int(bad.sum())).astype(np.float32)
    return out


def test_parser_round_trip(capsys, tmp_path):
    with criterion(capsys, 1, "parser round trip", limit_s=10) as notes:
        rng = np.random.default_rng(1)
        ident = ClassMap.identity([f"c{i}" for i in range(40)])
        for i in range(1000):
            n = int(rng.integers(0, 300))
            floats = _finite_floats(rng, 4 * n)
            if n and i % 5 == 0:
                floats[rng.integers(0, 4 * n, 4)] = [-0.0, 1e-45, 3.4028235e38, -1.1754944e-38]
            data = floats.astype("<f4").tobytes()
            assert write_scan(parse_scan(data)) == data, f"scan {i}"
            sem = rng.integers(0, 40, n).astype("<u4")
            canonical = sem.tobytes()
            assert write_labels(parse_labels(canonical, ident), ident) == canonical, f"labels {i}"
            raw = (rng.integers(0, 1 << 16, n).astype("<u4") << 16 | sem).astype("<u4").tobytes()
            s, inst = split_labels(raw)
            assert ((inst.astype("<u4") << 16) | s.astype("<u4")).astype("<u4").tobytes() == raw
            if i % 20 == 0:
                scan = PointCloudScan(np.frombuffer(data, "<f4").reshape(-1, 4), sem.astype(np.int64))
                save_scan(scan, tmp_path / "s.bin", tmp_path / "s.label", ident)
                assert (tmp_path / "s.bin").read_bytes() == data
                assert (tmp_path / "s.label").read_bytes() == canonical
                assert read_scan(tmp_path / "s.bin", tmp_path / "s.label", ident) == scan
        rejected = 0
        for _ in range(200):
            n = int(rng.integers(1, 4000))
            if n % 16:
                with pytest.raises(MalformedScanError):
                    parse_scan(bytes(n))
                rejected += 1
            if n % 4:
                with pytest.raises(MalformedScanError):
                    parse_labels(bytes(n), ident)
                rejected += 1
        notes.append(f"1000 scans and label files byte-exact, {rejected} malformed inputs rejected")


# -- 2 ---------------------------------------------------------------------------------

def _eq5(x, y, z, W, H, up, f):
    r = math.sqrt(x * x + y * y + z * z)
    u = math.floor(0.5 * (1 - math.atan2(y, x) / math.pi) * W)
    v = math.floor((1 - (math.asin(z / r) + up) / f) * H)
    return min(max(u, 0), W - 1), min(max(v, 0), H - 1), r


def test_projection_oracle(capsys):
    with criterion(capsys, 2, "projection oracle", limit_s=30) as notes:
        cfg = ProjectionConfig(64, 2048, 3.0, 25.0)
        up, f = math.radians(3.0), math.radians(28.0)
        rng = np.random.default_rng(2)
        kept_total = collided = 0
        for i in range(100):
            n = int(rng.integers(1, 20_001))
            xyz = rng.normal(0, 25, (n, 3))
            xyz[:, 2] = rng.uniform(-5, 8, n)
            if n > 10:  # exact duplicates exercise the tie rule
                dup = rng.integers(0, n, n // 10)
                xyz[rng.integers(0, n, n // 10)] = xyz[dup]
            scan = PointCloudScan(np.column_stack([xyz, rng.random(n)]))
            im = project_scan(scan, cfg)
            pts = scan.points[:, :3].astype(np.float64).tolist()
            best = {}
            for k, (x, y, z) in enumerate(pts):
                u, v, r = _eq5(x, y, z, cfg.W, cfg.H, up, f)
                key = v * cfg.W + u
                if key not in best or r < best[key][0]:
                    best[key] = (r, k, u, v)
            expect = np.full(cfg.H * cfg.W, -1)
            for key, (_, k, u, v) in best.items():
                expect[key] = k
                assert (im.point_u[k], im.point_v[k]) == (u, v), f"scan {i} point {k}"
            assert np.array_equal(im.pixel_point.ravel(), expect), f"scan {i} rasterization"
            assert np.array_equal(np.flatnonzero(im.kept), np.sort(np.array([b[1] for b in best.values()])))
            kept_total += len(best)
            collided += n - len(best)
        notes.append(f"100 scans, {kept_total} kept points re-evaluated, {collided} occluded points resolved")


# -- 3 ---------------------------------------------------------------------------------

def _ws(out, probe):
    return T.tsum(T.mul(out, Tensor(probe)))


def _op_checks(seed):
    """Max relative error per operator on one seeded instance."""
    rng = np.random.default_rng(seed)
    def t(*shape):
        return Tensor(rng.standard_normal(shape))

    errs = {}
    x, w, b = t(2, 2, 5, 6), t(3, 2, 3, 3), t(3)
    stride = (1, 1 + seed % 2)
    probe = rng.standard_normal(T.conv2d(x, w, b, stride=stride).shape)
    errs["conv2d"] = grad_check(lambda x, w, b: _ws(T.conv2d(x, w, b, stride=stride), probe), [x, w, b])
    xb, g, beta = t(3, 2, 3, 4), Tensor(rng.uniform(0.5, 1.5, 2)), t(2)
    probe = rng.standard_normal(xb.shape)
    for mode in ("train", "eval"):
        errs[f"batchnorm2d/{mode}"] = grad_check(
            lambda x, g, b: _ws(T.batchnorm2d(x, g, b, BatchNormState(2, np.float64), mode), probe),
            [xb, g, beta], eps=1e-4)
    z = rng.standard_normal((2, 3, 4, 4))
    xl = Tensor(np.where(np.abs(z) < 0.05, 0.05 * np.sign(z) + z, z))
    probe = rng.standard_normal(xl.shape)
    errs["leaky_relu"] = grad_check(lambda x: _ws(T.leaky_relu(x), probe), xl)
    xr = Tensor(rng.permutation(48).reshape(1, 2, 3, 8) * 0.1 + rng.uniform(0, 0.01, (1, 2, 3, 8)))
    pd, pu = rng.standard_normal((1, 2, 3, 4)), rng.standard_normal((1, 2, 3, 16))
    errs["resample/down"] = grad_check(lambda x: _ws(T.resample(x, "down"), pd), xr)
    errs["resample/up"] = grad_check(lambda x: _ws(T.resample(x, "up"), pu), xr)
    a, c, d = t(2, 2, 3, 3), t(2, 1, 3, 3), t(2, 2, 3, 3)
    p3, p2 = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 2, 3, 3))
    errs["merge/concat"] = grad_check(lambda a, c: _ws(T.merge(a, c, "concat"), p3), [a, c])
    errs["merge/add"] = grad_check(lambda a, d: _ws(T.merge(a, d, "add"), p2), [a, d])
    xs = t(2, 4, 3, 3)
    probe = rng.standard_normal(xs.shape)
    errs["softmax"] = grad_check(lambda x: _ws(T.softmax(x), probe), xs)
    errs["add/mul/scale/sum"] = grad_check(lambda a, d: T.tsum(T.scale(T.mul(T.add(a, d), a), 0.5)), [a, d])
    z = t(2, 4, 3, 3)
    labels = rng.integers(0, 4, (2, 3, 3))
    cw = ClassWeights(np.r_[0.0, rng.uniform(0.5, 3, 3)], {0})
    errs["weighted_xent"] = grad_check(lambda z: weighted_xent(T.softmax(z), labels, cw), z, eps=1e-6)
    # piecewise linear in the probabilities: keep every pairwise error gap (p vs p and p vs 1 - p)
    # at least 0.4 grid steps so the finite-difference step never crosses a sort tie
    grid = 0.05 + 0.9 * (rng.permutation(180) + 0.3) / 180
    probs = Tensor(grid.reshape(1, 5, 6, 6))
    lab = rng.integers(0, 5, (1, 6, 6))
    errs["lovasz_softmax"] = grad_check(lambda q: lovasz_softmax(q, lab), probs, eps=1e-4)
    return errs


def _network_check(seed):
    rng = np.random.default_rng(seed)
    cfg = preset_config("early", encoder_channels=[4, 8], decoder_channels=[4], num_classes=4)
    net = build_network(cfg, seed=seed, dtype=np.float64)
    x = {m: Tensor(rng.standard_normal((2, c, 2, 4))) for m, c in (("coord", 3), ("depth", 1), ("intensity", 1))}
    labels = rng.integers(0, 4, (2, 2, 4))
    w = ClassWeights(np.r_[0, rng.uniform(0.5, 2, 3)], {0})
    names = list(x)
    f = lambda *ts: total_loss(T.softmax(net(dict(zip(names, ts)), "eval")), labels, w)
    params = [p for _, p in net.named_parameters()]
    return grad_check(f, [x[m] for m in names] + params, eps=(1e-5, 1e-6, 1e-7), samples=2, seed=seed)


def test_gradient_checks(capsys):
    with criterion(capsys, 3, "gradient checks", limit_s=300) as notes:
        worst: dict[str, float] = {}
        for seed in range(20):
            for name, e in _op_checks(seed).items():
                worst[name] = max(worst.get(name, 0.0), e)
        net_errs = [_network_check(seed) for seed in range(20)]
        worst["network(2-level)"] = max(net_errs)
        notes.append(", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
        bad = {k: v for k, v in worst.items() if not v < 1e-5}
        assert not bad, f"max relative error >= 1e-5: {bad}"


# -- 4 ---------------------------------------------------------------------------------

def _jaccard_loss(truth, pred):
    union = truth | pred
    return 0.0 if not union else 1.0 - len(truth & pred) / len(union)


def _hard_lovasz(truth_bits, pred_bits, n):
    labels = np.array([(truth_bits >> i) & 1 for i in range(n)]).reshape(1, 1, n)
    p1 = np.array([float((pred_bits >> i) & 1) for i in range(n)])
    probs = Tensor(np.stack([1 - p1, p1])[None, :, None, :])
    return lovasz_softmax(probs, labels, ignore=(), classes=[1]).item()


def test_lovasz_oracle(capsys):
    with criterion(capsys, 4, "Lovasz oracle", limit_s=60) as notes:
        worst = 0.0
        count = 0
        as_set = lambda bits, n: {i for i in range(n) if bits >> i & 1}
        # every (truth, prediction) pair on 6 pixels: 2^6 x 2^6 = 2^12 pairs
        for tb in range(64):
            for pb in range(64):
                worst = max(worst, abs(_hard_lovasz(tb, pb, 6) - _jaccard_loss(as_set(tb, 6), as_set(pb, 6))))
                count += 1
        # every one of the 2^12 truth sets on 12 pixels, and every prediction set, each
        # paired with a seeded partner
        rng = np.random.default_rng(4)
        for bits in range(4096):
            other = int(rng.integers(0, 4096))
            for tb, pb in ((bits, other), (other, bits)):
                got = _hard_lovasz(tb, pb, 12)
                worst = max(worst, abs(got - _jaccard_loss(as_set(tb, 12), as_set(pb, 12))))
                count += 1
        notes.append(f"{count} hard prediction/truth pairs, max |loss - (1 - Jaccard)| = {worst:.1e}")
        assert worst <= 1e-6


# -- 5 ---------------------------------------------------------------------------------

def test_metrics_oracle(capsys):
    with criterion(capsys, 5, "metrics oracle", limit_s=10) as notes:
        rng = np.random.default_rng(5)
        for i in range(100):
            c = int(rng.integers(2, 21))
            n = int(rng.integers(1, 10_001))
            truth = rng.integers(0, c, n)
            pred = rng.integers(0, c, n)
            truth[0] = max(truth[0], 1)
            cm = ConfusionMatrix(c).update(truth, pred)
            P = {k: set() for k in range(c)}
            G = {k: set() for k in range(c)}
            for idx, (t, p) in enumerate(zip(truth.tolist(), pred.tolist())):
                if t != 0:
                    G[t].add(idx)
                    P[p].add(idx)
            ious = []
            for k in range(1, c):
                union = P[k] | G[k]
                iou = len(P[k] & G[k]) / len(union) if union else None
                assert cm.iou(k) == iou, f"instance {i} class {k}"
                ious.append(0.0 if iou is None else iou)
            assert cm.miou() == sum(ious) / len(ious), f"instance {i} mIoU"
        notes.append("100 instances, per-class IoU and mIoU identical to set computation")


# -- 6 ---------------------------------------------------------------------------------

def _reference_knn(pred, images, scan, cfg):
    H, W = pred.shape
    half = cfg.S // 2
    out = []
    depth = images.depth.tolist()
    valid = images.valid_mask.tolist()
    pts = scan.points[:, :3].astype(np.float64).tolist()
    for k, (x, y, z) in enumerate(pts):
        u, v = int(images.point_u[k]), int(images.point_v[k])
        if images.kept[k] and not cfg.vote_kept:
            out.append(int(pred[v, u]))
            continue
        r = float(np.float32(math.sqrt(x * x + y * y + z * z)))
        window = [(abs(depth[vv][uu] - r), int(pred[vv, uu]))
                  for vv in range(v - half, v + half + 1) for uu in range(u - half, u + half + 1)
                  if 0 <= vv < H and 0 <= uu < W and valid[vv][uu]]
        if not window:
            out.append(0)
            continue
        cands = [c for c in window if c[0] < cfg.sigma]
        if not cands:
            out.append(min(window, key=lambda c: c[0])[1])
            continue
        votes = {}
        for d, c in sorted(cands, key=lambda c: c[0])[:cfg.K]:
            votes[c] = votes.get(c, 0.0) + math.exp(-d * d / (2 * cfg.gauss_bw ** 2))
        top = max(votes.values())
        out.append(min(c for c, wt in votes.items() if wt == top))
    return np.array(out)


def test_knn_oracle(capsys):
    with criterion(capsys, 6, "KNN oracle", limit_s=30) as notes:
        rng = np.random.default_rng(6)
        occluded = 0
        for i in range(50):
            if i % 2:  # random cloud crammed into a small image
                n = int(rng.integers(50, 3000))
                proj = ProjectionConfig(int(rng.integers(4, 17)), int(rng.integers(8, 65)))
                az, el = rng.uniform(-math.pi, math.pi, n), np.radians(rng.uniform(-2.9, 24.9, n))
                r = rng.uniform(1, 30, n)
                pts = np.c_[r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el), rng.random(n)]
                scan = PointCloudScan(pts)
            else:  # synthetic scene rendered at twice the image resolution
                proj = ProjectionConfig(16, 64)
                scan = generate_scan(random_scene(600 + i, beams=32, azimuth_steps=128, objects=16))
            images = project_scan(scan, proj)
            occluded += int((~images.kept).sum())
            pred = rng.integers(0, 6, (proj.H, proj.W))
            cfg = KnnConfig(S=int(rng.choice([1, 3, 5, 7])), K=int(rng.integers(1, 9)),
                            sigma=float(rng.uniform(0.1, 3)), gauss_bw=float(rng.uniform(0.3, 2)),
                            vote_kept=bool(i % 3 == 0))
            got = knn_backproject(pred, images, scan, cfg)
            assert np.array_equal(got, _reference_knn(pred, images, scan, cfg)), f"instance {i} {cfg}"
        for seed in range(5):
            scan = generate_scan(random_scene(650 + seed, beams=64, azimuth_steps=256))
            images = project_scan(scan, ProjectionConfig(64, 256))
            assert images.kept.all()
            pred = rng.integers(0, 6, (64, 256))
            for K in (1, 5, 9):
                out = knn_backproject(pred, images, scan, KnnConfig(K=K))
                assert np.array_equal(out, pred[images.point_v, images.point_u])
        notes.append(f"50 instances match the naive window scan ({occluded} occluded points voted); "
                     "5 collision-free scans reproduce own-pixel predictions")


# -- 7 ---------------------------------------------------------------------------------

def _overfit_setup(seed=0, **overrides):
    cfg = make_config("desk", seed=seed, **overrides)
    proj = cfg.projection()
    samples = [Sample(str(i), generate_scan(random_scene(100 + i, beams=proj.H, azimuth_steps=proj.W)))
               for i in range(4)]
    stats = dataset_stats(samples, proj)
    weights = class_weights(class_frequencies(samples, 6))
    return cfg, samples, stats, weights


def test_overfit_run(capsys, tmp_path):
    with criterion(capsys, 7, "desk-scale overfit", limit_s=30 * 60) as notes:
        trajectories = []
        for _ in range(2):
            cfg, samples, stats, w = _overfit_setup(seed=0)
            net = build_network(cfg.network(6), cfg.seed)
            state = Trainer(cfg, net, stats, w, samples).run(2)
            trajectories.append([h["train_loss"] for h in state.history])
        assert trajectories[0] == trajectories[1], "2-epoch loss trajectories differ"

        cfg, samples, stats, w = _overfit_setup(seed=0, val_every=5, stop_at_miou=0.9)
        assert cfg.encoder_channels == [8, 16, 32, 64, 128] and (cfg.H, cfg.W) == (64, 256)
        net = build_network(cfg.network(6), cfg.seed)
        t0 = time.perf_counter()
        state = Trainer(cfg, net, stats, w, samples, samples, tmp_path).run(300)
        minutes = (time.perf_counter() - t0) / 60
        back, meta = load_network(tmp_path / "best.fpsc")
        cm3, _ = evaluate(back, samples, cfg.projection(), ModalityStats.from_text(meta["stats"]), cfg.knn(), 6)
        notes.append(f"train mIoU {state.best_miou:.4f} after {state.epoch} epochs in {minutes:.1f} min "
                     f"(1 core); reloaded checkpoint mIoU {cm3.miou():.4f}; 2-epoch reruns identical")
        assert state.best_miou >= 0.90 and state.epoch <= 300
        assert cm3.miou() == meta["val_miou"] == state.best_miou


# -- 8 ---------------------------------------------------------------------------------

def test_variant_matrix(capsys):
    with criterion(capsys, 8, "variant matrix") as notes:
        cfg = make_config("desk", seed=0)
        proj = cfg.projection()
        train = [Sample(str(i), generate_scan(random_scene(200 + i, beams=proj.H, azimuth_steps=proj.W)))
                 for i in range(2)]
        val = [Sample("v", generate_scan(random_scene(250, beams=proj.H, azimuth_steps=proj.W)))]
        stats = dataset_stats(train, proj)
        w = class_weights(class_frequencies(train, 6))
        rows = ablation_matrix(cfg, train, val, stats, w, 6, epochs=5)
        cells = {(r["input_mode"], r["fusion"]) for r in rows}
        assert cells == {("fused", p) for p in FUSION_PRESETS} | {("stacked", "early")}
        assert all(math.isfinite(r["train_loss"]) and 0 <= r["miou"] <= 1 for r in rows)
        ranked = sorted(rows, key=lambda r: -r["miou"])
        with capsys.disabled():
            print()
            for r in rows:
                print(f"    {r['input_mode']:<8} {r['fusion']:<6} loss {r['train_loss']:.3f} "
                      f"val mIoU {r['miou']:.4f} ({r['seconds']:.0f}s)")
        notes.append(f"{len(rows)} cells trained 5 epochs without numeric failure; best "
                     f"{ranked[0]['input_mode']}/{ranked[0]['fusion']} (ordering reported, not asserted)")


# -- 9 ---------------------------------------------------------------------------------

def test_throughput(capsys):
    with criterion(capsys, 9, "projection + KNN throughput") as notes:
        cfg = make_config("desk", H=64, W=2048, knn_vote_kept=True)
        scans = [generate_scan(random_scene(900 + i, beams=64, azimuth_steps=2048, objects=300))
                 for i in range(4)]
        sizes = [len(s) for s in scans]
        assert min(sizes) >= 100_000, sizes
        report = cmd_bench(cfg, scans=scans, runs=20, warmup=3, include_forward=False)
        rate = report["projection+postprocess"]
        notes.append(f"{rate:.1f} scans/s end-to-end at 64x2048 on {min(sizes)}-{max(sizes)} points, "
                     f"every point re-voted, 1 core (projection {report['projection']:.1f}, "
                     f"KNN {report['postprocess']:.1f})")
        assert rate >= 20
