"""End-to-end acceptance suite.

Each test covers one numbered acceptance criterion and prints a single
PASS line (visible with `pytest -s`; under plain `pytest -v` the test name
itself is the pass/fail line).  Stated runtime budgets are asserted.
"""

import itertools
import time

import numpy as np
import pytest

import volrig.tensor as T
from volrig.extract import (
    NMSConfig,
    _prim_mst,
    edge_cost,
    predict,
    soft_nms,
    symmetrize_map,
)
from volrig.features import compute_curvatures, compute_local_shape_diameter
from volrig.mesh import SymmetryPlane, sample_surface
from volrig.metrics import cd_joint, cd_joint2bone, matching_rates
from volrig.network import StackedHourglass, NetworkConfig
from volrig.rig import Skeleton
from volrig.sdf import compute_sdf
from volrig.synth import make_character
from volrig.training import (
    TargetMaps,
    TrainConfig,
    compute_granularity_label,
    masked_loss,
    train,
)
from volrig.voxel import OccupancyMask, VoxelGrid, make_grid, voxelize

from conftest import cylinder, icosphere
from test_metrics import brute_cd_joint, brute_point_segment
from test_network import expected_module_shapes
from test_tensor import gradcheck, scalarize

SECONDS = {1: 120, 2: 300, 3: 2700, 4: 180, 5: 60, 6: 60, 7: 60}


def report(n, msg):
    print(f"[criterion {n}] PASS: {msg}")


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(0))

    def rand(*shape):
        return rng.standard_normal(shape)

    checked = []
    for k in (2, 3, 5):
        for stride in (1, 2):
            x = rand(6, 6, 6, 2)
            w = rand(k, k, k, 2, 3) / k
            b = rand(3)
            gradcheck(lambda ts, s=stride: scalarize(
                T.conv3d(ts[0], ts[1], ts[2], stride=s)), [x, w, b])
            checked.append(f"conv3d k={k} s={stride}")
    gradcheck(lambda ts: scalarize(T.conv_transpose3d(ts[0], ts[1], ts[2])),
              [rand(3, 3, 3, 2), rand(2, 2, 2, 2, 3), rand(3)])
    checked.append("conv_transpose3d")
    for train_mode in (True, False):
        rm, rv = rand(3) * 0.1, np.abs(rand(3)) + 1.0
        gradcheck(lambda ts, m=train_mode: scalarize(
            T.batchnorm3d(ts[0], ts[1], ts[2], m, rm.copy(), rv.copy())),
            [rand(4, 4, 4, 3), rand(3) + 2.0, rand(3)])
        checked.append(f"batchnorm train={train_mode}")
    x = rand(5, 5, 5, 2)
    x[np.abs(x) < 0.05] += 0.2
    gradcheck(lambda ts: scalarize(T.relu(ts[0])), [x])
    gradcheck(lambda ts: scalarize(T.sigmoid(ts[0])), [rand(4, 4, 4, 3)])
    gradcheck(lambda ts: scalarize(T.concat(ts[0], ts[1], axis=-1)),
              [rand(4, 4, 4, 2), rand(4, 4, 4, 3)])
    gradcheck(lambda ts: scalarize(T.add(ts[0], ts[1])),
              [rand(4, 4, 4, 3), rand(4, 4, 4, 3)])
    checked += ["relu", "sigmoid", "concat", "add"]
    pred = rng.uniform(0.05, 0.95, (4, 4, 4, 1))
    target = rng.uniform(0, 1, (4, 4, 4, 1))
    m = rng.random((4, 4, 4, 1)) > 0.4
    gradcheck(lambda ts: T.masked_bce(ts[0], target, m, int(m.sum())), [pred])
    checked.append("masked_loss")
    elapsed = time.perf_counter() - t0
    assert elapsed < SECONDS[1]
    report(1, f"{len(checked)} layer configurations, rel err < 1e-5, "
              f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. architecture conformance


def test_criterion_02_architecture_conformance():
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(0))
    for r in (88, 32):
        net = StackedHourglass(NetworkConfig(resolution=r, num_modules=4), seed=0)
        trace = []
        net.forward(rng.standard_normal((r, r, r, 5)), 0.02, trace=trace)
        assert trace[0] == ("pre_features", (r, r, r, 8))
        per = (len(trace) - 1) // 4
        assert trace[1:1 + per] == expected_module_shapes(r, 8)
        for m in range(1, 4):
            rows = trace[1 + m * per:1 + (m + 1) * per]
            assert rows == expected_module_shapes(r, 10)
        del net, trace
    elapsed = time.perf_counter() - t0
    assert elapsed < SECONDS[2]
    report(2, f"all per-module shape rows match at R=88 and R=32, "
              f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. overfit end-to-end


def test_criterion_03_overfit_end_to_end():
    t0 = time.perf_counter()
    dataset = [make_character(k, 0) for k in ("biped", "quadruped", "star")]
    cfg = TrainConfig(iterations=300, resolution=32, num_modules=2, seed=2)
    result = train(dataset, cfg)
    initial, final = result.losses[0], result.losses[-1]
    assert final < 0.25 * initial, f"loss ratio {final / initial:.3f}"

    for char in dataset:
        gamma = compute_granularity_label(char)
        pred = predict(char.mesh, result.net, granularity=gamma)
        cell = pred.grid.cell_size
        gt = char.skeleton
        d = np.linalg.norm(pred.skeleton.positions[:, None, :]
                           - gt.positions[None, :, :], axis=2) / cell
        assert pred.skeleton.n_joints == gt.n_joints, \
            f"{char.name}: {pred.skeleton.n_joints} joints vs {gt.n_joints}"
        nearest = d.argmin(axis=1)
        assert d.min(axis=1).max() < 1.5, \
            f"{char.name}: worst joint {d.min(axis=1).max():.2f} voxels off"
        assert len(set(nearest)) == gt.n_joints
        pred_edges = {tuple(sorted((nearest[a], nearest[b])))
                      for a, b in pred.skeleton.edges}
        gt_edges = {tuple(sorted(e)) for e in gt.edges}
        assert pred_edges == gt_edges, f"{char.name}: edge sets differ"
    elapsed = time.perf_counter() - t0
    assert elapsed < SECONDS[3]
    report(3, f"loss {initial:.2f} -> {final:.2f} "
              f"(ratio {final / initial:.3f} < 0.25); all joints within "
              f"1.5 voxels, exact adjacency on 3 characters, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 4. geometry oracles


def test_criterion_04_geometry_oracles():
    t0 = time.perf_counter()
    radius = 0.4
    center = np.array([0.0, 0.5, 0.0])
    mesh = icosphere(radius, 4, center=center)
    grid = make_grid(mesh, 64)
    surface, mask = voxelize(mesh, grid)
    sdf = compute_sdf(mesh, grid, surface, mask)
    exact = np.linalg.norm(grid.cell_centers() - center, axis=-1) - radius
    sdf_err = np.abs(sdf - exact).max()
    assert sdf_err <= 1.5 * grid.cell_size

    samples = sample_surface(mesh, 3000, seed=0)
    k1, k2, degenerate = compute_curvatures(samples)
    ok = ~degenerate
    for mean in (k1[ok].mean(), k2[ok].mean()):
        assert abs(mean - 1.0 / radius) < 0.15 / radius

    r_cyl = 0.2
    cyl = cylinder(r_cyl, 1.0, 96, center=(0.0, 0.5, 0.0))
    csamples = sample_surface(cyl, 2000, seed=0)
    lsd, missed = compute_local_shape_diameter(cyl, csamples)
    y = csamples.positions[:, 1]
    side = (np.abs(csamples.normals[:, 1]) < 0.1) & (y > 0.2) & (y < 0.8) & ~missed
    lsd_med = np.median(lsd[side])
    assert abs(lsd_med - 2 * r_cyl) < 0.15 * 2 * r_cyl
    elapsed = time.perf_counter() - t0
    assert elapsed < SECONDS[4]
    report(4, f"SDF max err {sdf_err / grid.cell_size:.2f} cells; sphere "
              f"curvature means within 15% of 1/r; cylinder LSD "
              f"{lsd_med:.3f} vs {2 * r_cyl}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. MST oracle


def _prufer_trees(n):
    """All labeled spanning trees on n nodes via Prüfer sequences."""
    if n == 1:
        yield []
        return
    if n == 2:
        yield [(0, 1)]
        return
    for seq in itertools.product(range(n), repeat=n - 2):
        degree = [1] * n
        for v in seq:
            degree[v] += 1
        edges = []
        seq_list = list(seq)
        leaves = sorted(i for i in range(n) if degree[i] == 1)
        for v in seq_list:
            leaf = leaves.pop(0)
            edges.append((min(leaf, v), max(leaf, v)))
            degree[v] -= 1
            if degree[v] == 1:
                # insert keeping sorted order
                import bisect
                bisect.insort(leaves, v)
        edges.append((leaves[0], leaves[1]))
        yield edges


def test_criterion_05_mst_oracle():
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(42))
    r = 16
    grid = VoxelGrid(r, np.zeros(3), 0.1)
    for trial in range(200):
        n = int(rng.integers(2, 8))
        mask = OccupancyMask(grid, rng.random((r, r, r)) < 0.85)
        prob = rng.uniform(0.01, 1.0, (r, r, r))
        # distinct random joint voxels
        flat = rng.choice(r ** 3, size=n, replace=False)
        voxels = np.stack(np.unravel_index(flat, (r, r, r)), axis=1)
        from volrig.extract import JointCandidate
        joints = [JointCandidate(tuple(int(x) for x in v),
                                 grid.cell_center(v), 1.0) for v in voxels]
        w = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                w[i, j] = w[j, i] = edge_cost(prob, mask, joints[i], joints[j])
        prim = sum(w[a, b] for a, b in _prim_mst(w))
        best = min(sum(w[a, b] for a, b in tree) for tree in _prufer_trees(n))
        assert prim == pytest.approx(best, abs=1e-9), f"trial {trial}"
    elapsed = time.perf_counter() - t0
    assert elapsed < SECONDS[5]
    report(5, f"200 random instances: Prim equals exhaustive spanning-tree "
              f"minimum, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 6. soft NMS


def test_criterion_06_soft_nms():
    t0 = time.perf_counter()
    cfg = NMSConfig()          # sigma 4.5, threshold 0.013
    r = 64
    grid = VoxelGrid(r, np.zeros(3), 1.0 / r)
    mask = OccupancyMask(grid, np.ones((r, r, r), dtype=bool))
    corners = [(5, 5, 5), (58, 5, 5), (5, 58, 5), (5, 5, 58),
               (58, 58, 5), (58, 5, 58)]
    min_sep = min(np.linalg.norm(np.subtract(a, b))
                  for a, b in itertools.combinations(corners, 2))
    assert min_sep >= 6 * cfg.sigma
    idx = np.stack(np.meshgrid(*[np.arange(r)] * 3, indexing="ij"), axis=-1)
    for k in range(1, 7):
        prob = np.zeros((r, r, r))
        peaks = [0.9 - 0.1 * i for i in range(k)]
        for c, p in zip(corners[:k], peaks):
            d2 = ((idx - np.asarray(c)) ** 2).sum(axis=-1)
            np.maximum(prob, p * np.exp(-d2 / (2.0 * cfg.sigma ** 2)), out=prob)
        joints = soft_nms(prob, mask, cfg)
        assert len(joints) == k
        assert [j.voxel for j in joints] == corners[:k]
        assert joints[0].voxel == tuple(
            np.unravel_index(np.argmax(prob), prob.shape))
        # threshold: every emitted joint sits above t in the pre-decay map
        assert all(prob[j.voxel] >= cfg.threshold for j in joints)
    # a bump below threshold is never emitted
    prob = np.zeros((r, r, r))
    d2 = ((idx - np.asarray(corners[0])) ** 2).sum(axis=-1)
    prob = 0.5 * cfg.threshold * np.exp(-d2 / (2.0 * cfg.sigma ** 2))
    assert soft_nms(prob, mask, cfg) == []
    elapsed = time.perf_counter() - t0
    assert elapsed < SECONDS[6]
    report(6, f"K in 1..6 bumps -> exactly K joints at peak voxels, first = "
              f"argmax, none below threshold, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7. metric oracles


def test_criterion_07_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(0))

    def rand_skel(n):
        pos = rng.uniform(-1, 1, (n, 3))
        edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
        return Skeleton([f"j{i}" for i in range(n)], pos, edges, 0)

    for _ in range(500):
        a = rand_skel(int(rng.integers(2, 8)))
        b = rand_skel(int(rng.integers(2, 8)))
        axis = float(rng.uniform(0.5, 2.0))
        assert cd_joint(a, b, axis) == pytest.approx(
            brute_cd_joint(a.positions, b.positions, axis), abs=1e-9)
        fwd = np.mean([min(brute_point_segment(p, s[0], s[1])
                           for s in b.bone_segments()) for p in a.positions])
        bwd = np.mean([min(brute_point_segment(p, s[0], s[1])
                           for s in a.bone_segments()) for p in b.positions])
        assert cd_joint2bone(a, b, axis) == pytest.approx(
            0.5 * (fwd + bwd) / axis, abs=1e-9)

    skel = Skeleton(["a", "b"], np.array([[0.0, 0.3, 0.0], [0.0, 0.7, 0.0]]),
                    [(0, 1)], 0)
    mesh = cylinder(0.2, 0.9, 48, center=(0.0, 0.5, 0.0))
    mp, mr, _ = matching_rates(skel, skel, mesh)
    assert (cd_joint(skel, skel, 1.0), cd_joint2bone(skel, skel, 1.0),
            mp, mr) == (0.0, 0.0, 100.0, 100.0)

    a, b, axis = rand_skel(5), rand_skel(6), 1.3
    for s in (0.25, 4.0):
        ta, tb = a.transformed(lambda p: p * s), b.transformed(lambda p: p * s)
        assert cd_joint(ta, tb, axis * s) == pytest.approx(
            cd_joint(a, b, axis), abs=1e-9)
        assert cd_joint2bone(ta, tb, axis * s) == pytest.approx(
            cd_joint2bone(a, b, axis), abs=1e-9)
    elapsed = time.perf_counter() - t0
    assert elapsed < SECONDS[7]
    report(7, f"500 brute-force pairs to 1e-9; identical -> (0,0,100,100); "
              f"scale-invariant; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 8. symmetry


def test_criterion_08_symmetry():
    r = 32
    grid = VoxelGrid(r, np.array([-0.5, 0.0, 0.0]), 1.0 / r)   # x=0 mid-plane
    plane = SymmetryPlane(np.array([1.0, 0.0, 0.0]), 0.0)
    mask = OccupancyMask(grid, np.ones((r, r, r), dtype=bool))
    idx = np.stack(np.meshgrid(*[np.arange(r)] * 3, indexing="ij"), axis=-1)
    prob = np.zeros((r, r, r))
    # two mirrored bump pairs (mirror of voxel i across x=0 is 31-i)
    for c, p in [((6, 16, 16), 0.9), ((25, 16, 16), 0.9), ((10, 6, 16), 0.8),
                 ((21, 6, 16), 0.8)]:
        d2 = ((idx - np.asarray(c)) ** 2).sum(axis=-1)
        np.maximum(prob, p * np.exp(-d2 / 4.0), out=prob)
    sym = symmetrize_map(prob, grid, plane)
    again = symmetrize_map(sym, grid, plane)
    fixed_err = np.abs(again - sym).max()
    assert fixed_err < 1e-6

    joints = soft_nms(sym, mask, NMSConfig(sigma=2.0, threshold=0.05))
    assert joints
    positions = np.stack([j.position for j in joints])
    mirrored = plane.reflect(positions)
    worst = 0.0
    for m in mirrored:
        d = np.linalg.norm(positions - m, axis=1).min()
        worst = max(worst, d)
    assert worst < 0.5 * grid.cell_size
    report(8, f"symmetrization fixed point {fixed_err:.1e}; joint set "
              f"mirror-symmetric within {worst / grid.cell_size:.2f} voxels")


# ---------------------------------------------------------------------------
# 9. determinism


def test_criterion_09_determinism(tmp_path, monkeypatch):
    from click.testing import CliRunner
    from volrig.cli import main as cli_main

    monkeypatch.setenv("VOLRIG_CACHE", str(tmp_path / "cache"))
    runner = CliRunner()

    def run(args):
        res = runner.invoke(cli_main, args, catch_exceptions=False)
        assert res.exit_code == 0, res.output

    data = tmp_path / "data"
    run(["synth", "--kind", "biped", "--seed", "1", "--out", str(data)])
    run(["synth", "--kind", "biped", "--seed", "1", "--out", str(tmp_path / "d2")])
    assert (data / "biped_1.obj").read_bytes() == \
        (tmp_path / "d2" / "biped_1.obj").read_bytes()

    feats = []
    for name in ("f1", "f2"):
        run(["featurize", str(data / "biped_1.obj"), "--resolution", "16",
             "--samples", "2000", "--out", str(tmp_path / name)])
        feats.append((tmp_path / name / "sdf.f32").read_bytes())
    assert feats[0] == feats[1]

    bins = []
    for stem, threads in (("t1", "1"), ("t2", "1"), ("t4", "4")):
        run(["train", "--data", str(data), "--iterations", "3",
             "--resolution", "16", "--modules", "1", "--seed", "0",
             "--threads", threads, "--out", str(tmp_path / stem)])
        bins.append(((tmp_path / stem).with_suffix(".bin").read_bytes(),
                     (tmp_path / (stem + ".loss.jsonl")).read_bytes()))
    assert bins[0] == bins[1] == bins[2]

    rigs = []
    for name in ("p1.rig", "p2.rig"):
        run(["predict", str(data / "biped_1.obj"),
             "--checkpoint", str(tmp_path / "t1"),
             "--out", str(tmp_path / name)])
        rigs.append((tmp_path / name).read_bytes())
    assert rigs[0] == rigs[1]
    report(9, "synth/featurize/train/predict bit-identical across runs and "
              "--threads 1 vs 4")


# ---------------------------------------------------------------------------
# 10. masked loss behavior


def test_criterion_10_masked_loss_behavior():
    rng = np.random.Generator(np.random.PCG64(0))
    r = 8
    grid = VoxelGrid(r, np.zeros(3), 0.1)
    mask = OccupancyMask(grid, rng.random((r, r, r)) < 0.5)
    targets = TargetMaps(rng.random((r, r, r)), rng.random((r, r, r)))

    net = StackedHourglass(NetworkConfig(resolution=r, num_modules=2), seed=0)
    x = rng.standard_normal((r, r, r, 5))
    out = net.forward(x, 0.02, train=False)
    loss = masked_loss(out, targets, mask)
    T.zero_grad(net.parameters())
    loss.backward()
    module1 = [p for p in net.parameters()
               if p.name.startswith(("stack.0.joint", "stack.0.bone"))]
    assert module1 and all(
        p.grad is not None and np.abs(p.grad).max() > 0 for p in module1)

    # unmasked gradient exactly zero (leaf probability maps)
    pj = T.Tensor(rng.uniform(0.1, 0.9, (r, r, r, 1)), requires_grad=True)
    pb = T.Tensor(rng.uniform(0.1, 0.9, (r, r, r, 1)), requires_grad=True)
    from volrig.network import StackOutputs
    masked_loss(StackOutputs([pj], [pb], pre_features=None),
                targets, mask).backward()
    outside = ~mask.data
    assert np.all(pj.grad[outside] == 0.0) and np.all(pb.grad[outside] == 0.0)

    # doubling the mask with replicated values leaves the loss unchanged
    pred = rng.uniform(0.05, 0.95, (r, r, r, 1))
    tgt = rng.random((r, r, r, 1))
    m = rng.random((r, r, r, 1)) < 0.6
    n_s = int(m.sum())
    single = T.masked_bce(T.Tensor(pred), tgt, m, n_s).item()
    double = T.masked_bce(T.Tensor(np.concatenate([pred, pred])),
                          np.concatenate([tgt, tgt]),
                          np.concatenate([m, m]), 2 * n_s).item()
    assert double == pytest.approx(single, rel=1e-12)
    report(10, "unmasked grads exactly zero; mask-doubling invariant; "
               "module-1 branches receive gradient")
